// enkf: estimator utilities, single-testbed filter runs, and the fast
// invariant selfcheck, all behind one deterministic command line.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "enkf/config.hpp"
#include "enkf/experiments.hpp"
#include "enkf/filters.hpp"
#include "enkf/io.hpp"

namespace {

using namespace enkf;

// ---------------------------------------------------------------------------
// shared plumbing

struct GlobalFlags {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out = ".";
    std::size_t threads = 1;
    std::size_t replicates = 0;  // 0 = keep config value
};

// bare names resolve against ./configs and the build-time config directory
std::string resolve_config_path(const std::string& arg) {
    namespace fs = std::filesystem;
    if (fs::exists(arg)) return arg;
    const std::string local = "configs/" + arg + ".cfg";
    if (fs::exists(local)) return local;
#ifdef ENKF_CONFIG_DIR
    const std::string shipped = std::string(ENKF_CONFIG_DIR) + "/" + arg + ".cfg";
    if (fs::exists(shipped)) return shipped;
#endif
    throw IoError("config not found: " + arg);
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
    if (s.empty() || s[0] == '-') throw ParseError(what + ": need a non-negative integer");
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size()) throw ParseError(what + ": bad integer '" + s + "'");
    return v;
}

double parse_f64(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
        throw ParseError(what + ": bad number '" + s + "'");
    return v;
}

// ---------------------------------------------------------------------------
// run-l96 / run-swe

struct RunFlags {
    std::string config_pos;
    std::string variants;
    double f_assim = 0.0;
    bool f_assim_set = false;
    double k_diff = 0.0;
    bool k_diff_set = false;
    std::uint64_t steps = 0;
    bool steps_set = false;
};

// precedence is flag > file > built-in default; realized by key=value text
// layering, where the last occurrence of a key wins
ExperimentConfig build_run_config(const std::string& testbed, const GlobalFlags& g,
                                  const RunFlags& rf) {
    std::string text = "testbed = " + testbed + "\n";
    std::string origin = "<builtin " + testbed + ">";
    const std::string cfg_arg = !rf.config_pos.empty() ? rf.config_pos : g.config;
    if (!cfg_arg.empty()) {
        const std::string path = resolve_config_path(cfg_arg);
        const std::string file_text = read_text_file(path);
        const auto kv = parse_key_values(file_text, path);
        const auto it = kv.find("testbed");
        if (it != kv.end() && it->second != testbed)
            throw ParseError(path + ": testbed '" + it->second + "' does not match subcommand");
        text += file_text;
        text += "\n";
        origin = path;
    }
    if (!rf.variants.empty()) text += "variants = " + rf.variants + "\n";
    if (rf.f_assim_set) text += "f_assim = " + format_double(rf.f_assim) + "\n";
    if (rf.k_diff_set) text += "k_diff_assim = " + format_double(rf.k_diff) + "\n";
    if (rf.steps_set) text += "total_steps = " + std::to_string(rf.steps) + "\n";
    if (g.seed_set) text += "seed = " + std::to_string(g.seed) + "\n";
    if (g.replicates > 0) text += "replicates = " + std::to_string(g.replicates) + "\n";
    if (g.threads > 0) text += "threads = " + std::to_string(g.threads) + "\n";

    ExperimentConfig cfg = experiment_config_from_text(text, origin);
    // a shortened run keeps its usefulness as a smoke test: drop a burn-in
    // that no longer fits instead of rejecting the config
    if (rf.steps_set && cfg.burn_in_steps >= cfg.total_steps) cfg.burn_in_steps = 0;
    if (cfg.burn_in_steps >= cfg.total_steps)
        throw ParseError(origin + ": burn_in_steps must be below total_steps");
    if (cfg.replicates < 1) throw ParseError(origin + ": need replicates >= 1");
    cfg.name = cfg_arg.empty() ? testbed : cfg_arg;
    return cfg;
}

int cmd_run(const std::string& testbed, const GlobalFlags& g, const RunFlags& rf) {
    const ExperimentConfig cfg = build_run_config(testbed, g, rf);
    std::printf("config %s: p=%zu q=%zu n=%zu windows=%zu replicates=%zu seed=%llu threads=%zu\n",
                cfg.name.c_str(), cfg.state_dim(), cfg.obs_dim(), cfg.n, cfg.windows(),
                cfg.replicates, static_cast<unsigned long long>(cfg.seed), cfg.threads);
    std::fflush(stdout);

    const ExperimentResult res = run_config(cfg);

    std::filesystem::create_directories(g.out);
    const std::string summary_path = g.out + "/summary.csv";
    const std::string steps_path = g.out + "/steps.plotdata";
    export_summary_csv(res.summary, summary_path);
    export_plotdata(res.steps, steps_path);

    std::printf("%-10s %-22s %-7s %12s %12s %12s %9s\n", "testbed", "variant", "target",
                "mean_rmse", "q25", "q75", "div_rate");
    for (const SummaryRow& row : res.summary)
        std::printf("%-10s %-22s %-7s %12.4f %12.4f %12.4f %9.2f\n", row.testbed.c_str(),
                    row.variant.c_str(), row.target.c_str(), row.mean_rmse, row.q25, row.q75,
                    row.div_rate);
    std::printf("wrote %s\nwrote %s\n", summary_path.c_str(), steps_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateFlags {
    std::string input;
    std::string kind;
    std::string mode = "linear";
    std::string grid;
    std::size_t splits = 20;
};

CovKind parse_kind(const std::string& s) {
    if (s == "sample") return CovKind::sample;
    if (s == "banding") return CovKind::banding;
    if (s == "mid_banding") return CovKind::mid_banding;
    if (s == "tapering") return CovKind::tapering;
    if (s == "thresholding") return CovKind::thresholding;
    throw ParseError("unknown estimator kind '" + s + "'");
}

std::vector<TuningParam> parse_grid(const std::string& spec, CovKind kind) {
    std::vector<TuningParam> grid;
    for (const std::string& tok : detail::split_list(spec)) {
        TuningParam t;
        t.kind = kind;
        switch (kind) {
            case CovKind::banding:
            case CovKind::tapering:
                t.k = parse_u64(tok, "grid");
                break;
            case CovKind::mid_banding: {
                const std::size_t colon = tok.find(':');
                if (colon == std::string::npos)
                    throw ParseError("grid: mid_banding entries are k1:k2, got '" + tok + "'");
                t.k1 = parse_u64(tok.substr(0, colon), "grid k1");
                t.k2 = parse_u64(tok.substr(colon + 1), "grid k2");
                break;
            }
            case CovKind::thresholding:
                t.s = parse_f64(tok, "grid");
                break;
            case CovKind::sample:
                throw ParseError("grid: the sample estimator takes no tuning");
        }
        grid.push_back(t);
    }
    if (grid.empty()) throw ParseError("grid: no entries in '" + spec + "'");
    return grid;
}

int cmd_estimate(const GlobalFlags& g, const EstimateFlags& ef) {
    const Matrix m = read_matrix_csv(ef.input);
    if (m.rows < 2 || m.cols < 1)
        throw ParseError(ef.input + ": need at least 2 members (rows are members)");
    Ensemble e(m.rows, m.cols);
    for (std::size_t j = 0; j < e.n; ++j) {
        double* row = e.member(j);
        for (std::size_t i = 0; i < e.p; ++i) row[i] = m(j, i);
    }
    e.refresh_mean();

    const CovKind kind = parse_kind(ef.kind);
    const DistanceMode mode = ef.mode == "circular" ? DistanceMode::circular : DistanceMode::linear;
    if (ef.mode != "linear" && ef.mode != "circular")
        throw ParseError("mode: expected linear or circular, got '" + ef.mode + "'");

    const CovarianceEstimate s = sample_covariance(e);
    CovarianceEstimate out = s;
    TuningParam chosen;
    if (kind != CovKind::sample) {
        const std::vector<TuningParam> grid = ef.grid.empty()
                                                  ? default_grid(kind, e.p, &s.matrix)
                                                  : parse_grid(ef.grid, kind);
        const RngStream rng = RngStream(g.seed, 0).child(stream_tag::selection);
        chosen = select_tuning(e, kind, mode, grid, ef.splits, rng);
        out = apply_estimator(s, chosen, mode);
    }

    std::filesystem::create_directories(g.out);
    const std::string path = g.out + "/covariance.csv";
    write_matrix_csv(path, out.matrix);
    std::printf("n=%zu p=%zu kind=%s mode=%s\n", e.n, e.p, to_string(kind),
                mode == DistanceMode::circular ? "circular" : "linear");
    std::printf("tuning: %s\n", chosen.describe().c_str());
    std::printf("wrote %s\n", path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// selfcheck

Matrix random_spd(std::size_t p, const RngStream& rng, double ridge) {
    const Ensemble e =
        sample_gaussian(Vector(p, 0.0), diagonal_spd_factor(Vector(p, 1.0)), 2 * p + 4, rng);
    Matrix s = sample_covariance(e).matrix;
    for (std::size_t i = 0; i < p; ++i) s(i, i) += ridge;
    return s;
}

Matrix invert(const Matrix& a) {
    const std::size_t n = a.rows;
    Matrix aug(n, 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) aug(i, j) = a(i, j);
        aug(i, n + i) = 1.0;
    }
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(aug(r, c)) > std::abs(aug(piv, c))) piv = r;
        for (std::size_t j = 0; j < 2 * n; ++j) std::swap(aug(c, j), aug(piv, j));
        const double d = aug(c, c);
        for (std::size_t j = 0; j < 2 * n; ++j) aug(c, j) /= d;
        for (std::size_t r = 0; r < n; ++r) {
            if (r == c) continue;
            const double f = aug(r, c);
            for (std::size_t j = 0; j < 2 * n; ++j) aug(r, j) -= f * aug(c, j);
        }
    }
    Matrix inv(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) inv(i, j) = aug(i, n + j);
    return inv;
}

double gain_distance(const Matrix& a, const Matrix& b) {
    const Matrix d = sub(a, b);
    return std::sqrt(spectral_norm_sym(matmul(transpose(d), d)));
}

bool check_gain_bound(bool inject, std::string& detail_msg) {
    const RngStream root(20260819, 1);
    for (std::size_t trial = 0; trial < 50; ++trial) {
        const RngStream tr = root.child(trial);
        const std::size_t p = 4 + trial % 9;
        const std::size_t q = 1 + trial % (p / 2);
        const Matrix sigma = random_spd(p, tr.child(1), 0.2);
        // trial 0 pins the estimated covariance to the true one, so any
        // distortion of the gain formula must overshoot a zero bound
        const Matrix sigma_hat = (trial == 0) ? sigma : random_spd(p, tr.child(2), 0.2);
        const Matrix r = random_spd(q, tr.child(3), 0.3);
        const ObservationSystem sys =
            make_selection_system(p, detail::draw_distinct(q, p, tr.child(4)), r);
        const Matrix k = kalman_gain(sigma, sys, r).matrix;
        Matrix k_hat = kalman_gain(sigma_hat, sys, r).matrix;
        if (inject)
            for (std::size_t i = 0; i < k_hat.rows * k_hat.cols; ++i) k_hat.a[i] *= 1.5;
        const double lhs = gain_distance(k_hat, k);
        const double bound =
            spectral_norm_sym(sub(sigma_hat, sigma)) / sym_eig(r).values.front();
        if (lhs > bound) {
            detail_msg = "trial " + std::to_string(trial) + ": gain moved " +
                         format_double(lhs) + " > bound " + format_double(bound);
            return false;
        }
    }
    return true;
}

bool check_estimator_algebra(std::string& detail_msg) {
    const std::size_t p = 6;
    const Matrix s = random_spd(p, RngStream(20260819, 2), 0.1);
    CovarianceEstimate cov;
    cov.matrix = s;
    const Matrix b0 = band(cov, 0, DistanceMode::linear).matrix;
    const Matrix bfull = band(cov, p - 1, DistanceMode::linear).matrix;
    const Matrix th = threshold(cov, 1e9).matrix;
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            const bool diag = i == j;
            if (b0(i, j) != (diag ? s(i, j) : 0.0)) { detail_msg = "band k=0"; return false; }
            if (bfull(i, j) != s(i, j)) { detail_msg = "band k=p-1"; return false; }
            if (th(i, j) != (diag ? s(i, j) : 0.0)) { detail_msg = "threshold diag"; return false; }
        }
    for (std::size_t d = 0; d <= 2; ++d)
        if (taper_weight(d, 4) != (d <= 2 ? 1.0 : 0.0) && d <= 2) {
            detail_msg = "taper flat top";
            return false;
        }
    if (taper_weight(3, 4) != 0.5 || taper_weight(4, 4) != 0.0) {
        detail_msg = "taper ramp";
        return false;
    }
    return true;
}

bool check_rk4_order(std::string& detail_msg) {
    const auto rhs = [](const Vector& x, double) { return x; };
    const auto integrate = [&](std::size_t nsteps) {
        Vector x{1.0};
        const double h = 1.0 / static_cast<double>(nsteps);
        for (std::size_t i = 0; i < nsteps; ++i)
            x = rk4_step(rhs, x, static_cast<double>(i) * h, h);
        return std::abs(x[0] - std::exp(1.0));
    };
    const double e8 = integrate(8), e16 = integrate(16);
    const double ratio = e8 / e16;
    if (!(ratio > 12.0 && ratio < 20.0)) {
        detail_msg = "halving the step scaled the error by " + format_double(ratio);
        return false;
    }
    return true;
}

bool check_linear_kf_agreement(std::string& detail_msg) {
    const ExperimentConfig cfg = experiment_config_from_text("testbed = linear\n", "selfcheck");
    const RngStream rep_rng = RngStream(cfg.seed, 0).child(stream_tag::replicate).child(0);
    const detail::TruthData td = detail::make_truth(cfg, rep_rng);
    const ObservationSystem sys =
        detail::make_obs_system(cfg, rep_rng.child(stream_tag::obs_indices));
    const auto stream = detail::make_obs_stream(td, sys, rep_rng.child(stream_tag::obs_noise));
    const auto kf_means = detail::exact_kf_means(stream, sys);
    const LinearFixture f = make_linear_fixture();
    const SpdFactor qf = cholesky(f.q_cov);
    const auto oracle_means = oracle_run(make_linear_operator(f.m), sys, stream, f.x1, f.sigma0,
                                         1000, &qf, rep_rng.child(stream_tag::oracle));
    double acc = 0.0;
    for (std::size_t k = 0; k < kf_means.size(); ++k) acc += rmse(oracle_means[k], kf_means[k]);
    const double mean = acc / static_cast<double>(kf_means.size());
    if (mean >= 0.05) {
        detail_msg = "1000-member mean sits " + format_double(mean) + " from the exact filter";
        return false;
    }
    return true;
}

bool check_variational_fit(std::string& detail_msg) {
    const RngStream root(20260819, 3);
    for (std::size_t trial = 0; trial < 10; ++trial) {
        const RngStream tr = root.child(trial);
        const std::size_t p = 4 + trial % 5;
        const std::size_t q = 1 + trial % 3;
        const Matrix sigma = random_spd(p, tr.child(1), 0.2);
        const Matrix r = random_spd(q, tr.child(2), 0.3);
        const ObservationSystem sys =
            make_selection_system(p, detail::draw_distinct(q, p, tr.child(3)), r);
        const Ensemble draw =
            sample_gaussian(Vector(p, 0.5), diagonal_spd_factor(Vector(p, 1.0)), 2, tr.child(4));
        const Vector xf = draw.member_vec(0);
        Vector y(q);
        for (std::size_t i = 0; i < q; ++i) y[i] = draw.member_vec(1)[sys.observed_indices[i]];
        const KfState an = kf_analysis({xf, sigma}, y, sys, r);
        // the analysis mean is the stationary point of the quadratic misfit:
        // (Σ⁻¹ + Hᵀ R⁻¹ H) x = Σ⁻¹ xf + Hᵀ R⁻¹ y
        const Matrix si = invert(sigma);
        const Matrix ri = invert(r);
        Matrix lhs = si;
        for (std::size_t a = 0; a < q; ++a)
            for (std::size_t b = 0; b < q; ++b)
                lhs(sys.observed_indices[a], sys.observed_indices[b]) += ri(a, b);
        Vector want = matvec(si, xf);
        for (std::size_t a = 0; a < q; ++a)
            for (std::size_t b = 0; b < q; ++b)
                want[sys.observed_indices[a]] += ri(a, b) * y[b];
        const Vector got = matvec(lhs, an.mean);
        double err = 0.0;
        for (std::size_t i = 0; i < p; ++i) err = std::max(err, std::abs(got[i] - want[i]));
        if (err > 1e-8) {
            detail_msg = "normal-equation residual " + format_double(err);
            return false;
        }
    }
    return true;
}

bool check_split_risk_selector(std::string& detail_msg) {
    const std::size_t p = 30, n = 60;
    const Ensemble e = sample_gaussian(Vector(p, 0.0), diagonal_spd_factor(Vector(p, 1.0)), n,
                                       RngStream(20260819, 4));
    const auto grid = default_grid(CovKind::banding, p);
    const TuningParam t = select_tuning(e, CovKind::banding, DistanceMode::linear, grid, 20,
                                        RngStream(20260819, 5));
    if (t.k != 0) {
        detail_msg = "independent coordinates tuned to k=" + std::to_string(t.k);
        return false;
    }
    return true;
}

bool check_thread_determinism(std::string& detail_msg) {
    const ExperimentConfig cfg = experiment_config_from_text(
        "testbed = l96\np = 12\nq = 6\nn = 10\ntotal_steps = 60\nburn_in_steps = 0\n"
        "replicates = 1\nvariants = standard\n",
        "selfcheck");
    const double thr = free_run_threshold(cfg);
    const ReplicateResult a = run_replicate(cfg, 0, thr, 1);
    const ReplicateResult b = run_replicate(cfg, 0, thr, 4);
    for (std::size_t k = 0; k < a.records[0].size(); ++k)
        if (a.records[0][k].analysis_mean != b.records[0][k].analysis_mean) {
            detail_msg = "window " + std::to_string(a.records[0][k].step) +
                         " differs between 1 and 4 threads";
            return false;
        }
    return true;
}

int cmd_selfcheck(bool inject_gain_bug) {
    struct Check {
        const char* name;
        std::function<bool(std::string&)> fn;
    };
    const std::vector<Check> checks = {
        {"gain-bound", [&](std::string& d) { return check_gain_bound(inject_gain_bug, d); }},
        {"estimator-algebra", check_estimator_algebra},
        {"rk4-order", check_rk4_order},
        {"linear-kf-agreement", check_linear_kf_agreement},
        {"variational-fit", check_variational_fit},
        {"split-risk-selector", check_split_risk_selector},
        {"thread-determinism", check_thread_determinism},
    };
    std::size_t passed = 0;
    for (const Check& c : checks) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail_msg;
        bool ok = false;
        try {
            ok = c.fn(detail_msg);
        } catch (const EnkfError& e) {
            detail_msg = e.what();
        }
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        std::printf("%-22s %s  (%.0f ms)%s%s\n", c.name, ok ? "PASS" : "FAIL", ms,
                    detail_msg.empty() ? "" : "  ", detail_msg.c_str());
        if (ok) ++passed;
    }
    std::printf("selfcheck: %zu/%zu passed\n", passed, checks.size());
    return passed == checks.size() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"high-dimensional ensemble Kalman filtering workbench"};
    app.fallthrough();
    app.require_subcommand(1);

    GlobalFlags g;
    app.add_option("--config", g.config, "config file path or shipped config name");
    auto* seed_opt = app.add_option("--seed", g.seed, "experiment seed");
    app.add_option("--out", g.out, "output directory")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads")->capture_default_str();
    app.add_option("--replicates", g.replicates, "override replicate count");

    EstimateFlags ef;
    CLI::App* est = app.add_subcommand("estimate", "regularize a sample covariance");
    est->add_option("input", ef.input, "ensemble CSV, one member per row")->required();
    est->add_option("--kind", ef.kind, "sample|banding|mid_banding|tapering|thresholding")
        ->required();
    est->add_option("--mode", ef.mode, "index distance: linear|circular")->capture_default_str();
    est->add_option("--grid", ef.grid, "candidate tuning values, comma separated");
    est->add_option("--splits", ef.splits, "random splits for risk tuning")->capture_default_str();

    RunFlags rf_l96, rf_swe;
    CLI::App* rl = app.add_subcommand("run-l96", "cycling experiments on the 40-variable ring");
    CLI::App* rs = app.add_subcommand("run-swe", "cycling experiments on the channel flow");
    for (auto [sub, rf] : {std::pair{rl, &rf_l96}, std::pair{rs, &rf_swe}}) {
        sub->add_option("config", rf->config_pos, "config file path or shipped config name");
        sub->add_option("--variants", rf->variants, "comma-separated filter variants");
        sub->add_option("--steps,--total-steps", rf->steps, "model steps to run");
    }
    rl->add_option("--f-assim", rf_l96.f_assim, "forcing used by the assimilating model");
    rs->add_option("--k-diff", rf_swe.k_diff, "diffusion used by the assimilating model");

    bool inject_gain_bug = false;
    CLI::App* sc = app.add_subcommand("selfcheck", "run the fast invariant suite");
    sc->add_flag("--inject-gain-bug", inject_gain_bug)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    g.seed_set = seed_opt->count() > 0;
    rf_l96.f_assim_set = rl->count("--f-assim") > 0;
    rf_swe.k_diff_set = rs->count("--k-diff") > 0;
    rf_l96.steps_set = rl->count("--steps") > 0;
    rf_swe.steps_set = rs->count("--steps") > 0;

    try {
        if (est->parsed()) return cmd_estimate(g, ef);
        if (rl->parsed()) return cmd_run("l96", g, rf_l96);
        if (rs->parsed()) return cmd_run("swe", g, rf_swe);
        if (sc->parsed()) return cmd_selfcheck(inject_gain_bug);
    } catch (const ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const EnkfError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 2;
}
