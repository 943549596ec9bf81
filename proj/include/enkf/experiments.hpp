#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "enkf/covariance.hpp"
#include "enkf/ensemble.hpp"
#include "enkf/errors.hpp"
#include "enkf/exec.hpp"
#include "enkf/filters.hpp"
#include "enkf/io.hpp"
#include "enkf/matrix.hpp"
#include "enkf/models.hpp"
#include "enkf/observations.hpp"
#include "enkf/rng.hpp"

namespace enkf {

enum class Testbed { l96, swe, linear_gaussian };

inline const char* to_string(Testbed t) {
    switch (t) {
        case Testbed::l96: return "l96";
        case Testbed::swe: return "swe";
        case Testbed::linear_gaussian: return "linear";
    }
    return "?";
}

// Twin-experiment description. Model-step quantities (total_steps,
// burn_in_steps) count integration steps; assimilation happens once per
// window of steps_per_window steps, every obs_every windows.
struct ExperimentConfig {
    Testbed testbed = Testbed::l96;
    std::string name = "experiment";

    std::size_t n = 30;
    std::size_t total_steps = 2000;
    std::size_t burn_in_steps = 1000;
    std::size_t obs_every = 1;  // cadence in windows
    std::vector<FilterVariant> variants;
    std::size_t replicates = 20;
    std::uint64_t seed = 1;
    std::size_t oracle_size = 1000;
    double divergence_threshold = 0.0;  // 0 = auto: 2x free-run time-mean RMSE
    std::size_t threads = 1;

    L96Params l96;  // l96.F is the assimilation forcing
    double f_true = 8.0;
    std::size_t q = 30;   // observed components (l96)
    double r_rho = 0.5;   // circular observation-error correlation (l96)

    SweParams swe;  // swe.k_diff is the assimilation diffusion
    double k_diff_true = 5.0e4;
    std::size_t swe_steps_per_window = 360;
    std::size_t pre_steps = 60;
    std::size_t obs_rows = 10;  // observed z1 columns per field
    double sigma_u2 = 0.5, sigma_v2 = 0.5, sigma_h2 = 1.0;

    std::size_t state_dim() const {
        switch (testbed) {
            case Testbed::l96: return l96.p;
            case Testbed::swe: return 3 * swe.nx * swe.ny;
            case Testbed::linear_gaussian: return 10;
        }
        return 0;
    }
    std::size_t steps_per_window() const {
        switch (testbed) {
            case Testbed::l96: return l96.steps_per_window;
            case Testbed::swe: return swe_steps_per_window;
            case Testbed::linear_gaussian: return 1;
        }
        return 1;
    }
    std::size_t windows() const { return total_steps / steps_per_window(); }
    std::size_t burn_in_windows() const { return burn_in_steps / steps_per_window(); }
    std::size_t obs_dim() const {
        switch (testbed) {
            case Testbed::l96: return q;
            case Testbed::swe: return 3 * obs_rows * swe.ny;
            case Testbed::linear_gaussian: return 5;
        }
        return 0;
    }
    std::string param_override() const {
        switch (testbed) {
            case Testbed::l96: return "F_assim=" + format_double(l96.F);
            case Testbed::swe: return "k_diff_assim=" + format_double(swe.k_diff);
            case Testbed::linear_gaussian: return "-";
        }
        return "-";
    }
};

struct SummaryRow {
    std::string testbed;
    std::string variant;
    std::string target;  // "oracle" | "true"
    std::string param_override;
    std::size_t n = 0, p = 0, q = 0;
    double mean_rmse = std::numeric_limits<double>::quiet_NaN();
    double q25 = std::numeric_limits<double>::quiet_NaN();
    double q75 = std::numeric_limits<double>::quiet_NaN();
    double div_rate = 0.0;
    std::uint64_t seed = 0;
};

struct StepRow {
    std::size_t step = 0;  // analysis window index
    std::string variant;
    double rmse_to_oracle = std::numeric_limits<double>::quiet_NaN();
    double rmse_to_truth = std::numeric_limits<double>::quiet_NaN();
};

struct ReplicateResult {
    std::vector<std::vector<AssimilationRecord>> records;  // aligned with config.variants
    std::vector<unsigned char> diverged;
};

struct ExperimentResult {
    std::vector<SummaryRow> summary;
    std::vector<StepRow> steps;
    double divergence_threshold = 0.0;
};

inline double rmse(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw DimensionMismatch("rmse: lengths differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

inline bool detect_divergence(const std::vector<double>& series, double threshold) {
    if (!(threshold > 0.0)) throw EnkfError("detect_divergence: need threshold > 0");
    for (const double v : series)
        if (!std::isfinite(v) || v > threshold) return true;
    return false;
}

// Fixed linear-Gaussian testbed: mildly contracting block rotations, so the
// exact Kalman filter is available as a zero-ambiguity oracle.
struct LinearFixture {
    Matrix m;      // 10×10
    Matrix q_cov;  // 0.1 I
    Matrix r;      // 0.5 I5
    std::vector<std::size_t> h_idx{0, 2, 4, 6, 8};
    Vector x1 = Vector(10, 0.0);
    Matrix sigma0;  // I
};

inline LinearFixture make_linear_fixture() {
    LinearFixture f;
    f.m = Matrix(10, 10);
    const double angles[5] = {0.3, 0.7, 1.1, 1.5, 1.9};
    for (std::size_t b = 0; b < 5; ++b) {
        const double c = 0.95 * std::cos(angles[b]);
        const double s = 0.95 * std::sin(angles[b]);
        f.m(2 * b, 2 * b) = c;
        f.m(2 * b, 2 * b + 1) = -s;
        f.m(2 * b + 1, 2 * b) = s;
        f.m(2 * b + 1, 2 * b + 1) = c;
    }
    f.q_cov = Matrix(10, 10);
    for (std::size_t i = 0; i < 10; ++i) f.q_cov(i, i) = 0.1;
    f.r = Matrix(5, 5);
    for (std::size_t i = 0; i < 5; ++i) f.r(i, i) = 0.5;
    f.sigma0 = Matrix::identity(10);
    return f;
}

namespace detail {

struct TruthData {
    Vector init;                          // truth state at window 0
    std::vector<Vector> at_obs;           // truth at each observation window
    std::vector<std::size_t> obs_windows; // strictly increasing window indices
};

inline std::vector<std::size_t> observation_windows(const ExperimentConfig& cfg) {
    std::vector<std::size_t> w;
    for (std::size_t i = cfg.obs_every; i <= cfg.windows(); i += cfg.obs_every) w.push_back(i);
    return w;
}

inline TruthData make_truth(const ExperimentConfig& cfg, const RngStream& rep_rng) {
    TruthData td;
    td.obs_windows = observation_windows(cfg);
    const RngStream trng = rep_rng.child(stream_tag::truth);
    switch (cfg.testbed) {
        case Testbed::l96: {
            L96Params tp = cfg.l96;
            tp.F = cfg.f_true;
            Vector x(tp.p, cfg.f_true);
            x[std::min<std::size_t>(19, tp.p - 1)] += 0.001;
            td.init = x;
            ModelOperator op;
            SpdFactor noise;
            if (tp.sigma0 > 0.0) {
                noise = diagonal_spd_factor(Vector(tp.p, std::sqrt(tp.sigma0)));
                op = make_l96_operator(tp, &noise, &trng);
            } else {
                op = make_l96_operator(tp);
            }
            std::size_t k = 0;
            for (std::size_t w = 1; w <= cfg.windows(); ++w) {
                x = op.advance(x, w);
                if (k < td.obs_windows.size() && td.obs_windows[k] == w) {
                    td.at_obs.push_back(x);
                    ++k;
                }
            }
            break;
        }
        case Testbed::swe: {
            SweParams tp = cfg.swe;
            tp.k_diff = cfg.k_diff_true;
            SweState s = swe_init(tp);
            for (std::size_t t = 0; t < cfg.pre_steps; ++t) s = swe_step(s, tp);
            td.init = swe_flatten(s);
            const ModelOperator op = make_swe_operator(tp, cfg.swe_steps_per_window);
            Vector x = td.init;
            std::size_t k = 0;
            for (std::size_t w = 1; w <= cfg.windows(); ++w) {
                x = op.advance(x, w);
                if (k < td.obs_windows.size() && td.obs_windows[k] == w) {
                    td.at_obs.push_back(x);
                    ++k;
                }
            }
            break;
        }
        case Testbed::linear_gaussian: {
            const LinearFixture f = make_linear_fixture();
            const SpdFactor qf = cholesky(f.q_cov);
            Vector x = f.x1;
            td.init = x;
            std::size_t k = 0;
            for (std::size_t w = 1; w <= cfg.windows(); ++w) {
                x = matvec(f.m, x);
                RngStream wr = trng.child(w);
                Vector z(x.size());
                for (double& v : z) v = wr.normal();
                const Vector noise = qf.apply_lower(z);
                for (std::size_t i = 0; i < x.size(); ++i) x[i] += noise[i];
                if (k < td.obs_windows.size() && td.obs_windows[k] == w) {
                    td.at_obs.push_back(x);
                    ++k;
                }
            }
            break;
        }
    }
    return td;
}

// Partial Fisher-Yates: the first `take` entries of a seeded permutation.
inline std::vector<std::size_t> draw_distinct(std::size_t take, std::size_t from,
                                              const RngStream& rng) {
    if (take > from) throw InvalidIndices("draw_distinct: take > from");
    std::vector<std::size_t> perm(from);
    for (std::size_t i = 0; i < from; ++i) perm[i] = i;
    RngStream r = rng;
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + r.below(from - i);
        std::swap(perm[i], perm[j]);
    }
    perm.resize(take);
    std::sort(perm.begin(), perm.end());
    return perm;
}

inline ObservationSystem make_obs_system(const ExperimentConfig& cfg, const RngStream& idx_rng) {
    switch (cfg.testbed) {
        case Testbed::l96: {
            const std::vector<std::size_t> idx = draw_distinct(cfg.q, cfg.l96.p, idx_rng);
            return make_selection_system(cfg.l96.p, idx, make_circular_r(cfg.q, cfg.r_rho));
        }
        case Testbed::swe: {
            const std::size_t nx = cfg.swe.nx, ny = cfg.swe.ny, cells = nx * ny;
            const std::vector<std::size_t> cols = draw_distinct(cfg.obs_rows, nx, idx_rng);
            std::vector<std::size_t> idx;
            idx.reserve(3 * cols.size() * ny);
            for (std::size_t b = 0; b < 3; ++b)
                for (std::size_t iy = 0; iy < ny; ++iy)
                    for (const std::size_t ix : cols) idx.push_back(b * cells + iy * nx + ix);
            const std::size_t qp = cols.size() * ny;
            const Matrix r = make_block_diag_r(
                {{qp, cfg.sigma_u2}, {qp, cfg.sigma_v2}, {qp, cfg.sigma_h2}});
            return make_selection_system(3 * cells, idx, r);
        }
        case Testbed::linear_gaussian: {
            const LinearFixture f = make_linear_fixture();
            return make_selection_system(10, f.h_idx, f.r);
        }
    }
    throw EnkfError("make_obs_system: unknown testbed");
}

inline std::vector<std::pair<std::size_t, Vector>> make_obs_stream(const TruthData& td,
                                                                   const ObservationSystem& sys,
                                                                   const RngStream& noise_rng) {
    std::vector<std::pair<std::size_t, Vector>> stream;
    stream.reserve(td.obs_windows.size());
    for (std::size_t k = 0; k < td.obs_windows.size(); ++k) {
        const std::size_t w = td.obs_windows[k];
        stream.emplace_back(w, observe_truth(td.at_obs[k], sys, noise_rng.child(w)));
    }
    return stream;
}

inline ModelOperator make_assim_operator(const ExperimentConfig& cfg) {
    switch (cfg.testbed) {
        case Testbed::l96: return make_l96_operator(cfg.l96);
        case Testbed::swe: return make_swe_operator(cfg.swe, cfg.swe_steps_per_window);
        case Testbed::linear_gaussian: return make_linear_operator(make_linear_fixture().m);
    }
    throw EnkfError("make_assim_operator: unknown testbed");
}

inline ModelOperator make_true_operator(const ExperimentConfig& cfg) {
    switch (cfg.testbed) {
        case Testbed::l96: {
            L96Params tp = cfg.l96;
            tp.F = cfg.f_true;
            return make_l96_operator(tp);
        }
        case Testbed::swe: {
            SweParams tp = cfg.swe;
            tp.k_diff = cfg.k_diff_true;
            return make_swe_operator(tp, cfg.swe_steps_per_window);
        }
        case Testbed::linear_gaussian: return make_linear_operator(make_linear_fixture().m);
    }
    throw EnkfError("make_true_operator: unknown testbed");
}

// Per-window propagation noise for ensemble forecasts: members receive one
// N(0, sigma0*I) draw per window, the same law the truth recipe applies per
// integration step. The cyclic-testbed filters run deliberately light on
// noise relative to the truth's accumulated per-window budget; the reference
// run models the full budget (oracle_noise_std below).
inline bool window_noise_std(const ExperimentConfig& cfg, double& std_out) {
    switch (cfg.testbed) {
        case Testbed::l96:
            if (cfg.l96.sigma0 <= 0.0) return false;
            std_out = std::sqrt(cfg.l96.sigma0);
            return true;
        case Testbed::swe: return false;
        case Testbed::linear_gaussian:
            std_out = std::sqrt(0.1);
            return true;
    }
    return false;
}

// Propagation noise for the large-ensemble reference: the truth accumulates
// steps_per_window independent N(0, sigma0*I) draws per window, and the
// reference models that full covariance.
inline bool oracle_noise_std(const ExperimentConfig& cfg, double& std_out) {
    switch (cfg.testbed) {
        case Testbed::l96:
            if (cfg.l96.sigma0 <= 0.0) return false;
            std_out = std::sqrt(cfg.l96.sigma0 *
                                static_cast<double>(cfg.l96.steps_per_window));
            return true;
        default: return window_noise_std(cfg, std_out);
    }
}

inline double init_spread_std(const ExperimentConfig& cfg) {
    switch (cfg.testbed) {
        case Testbed::l96: return std::sqrt(0.1);
        case Testbed::swe: return 1.0;
        case Testbed::linear_gaussian: return 1.0;
    }
    return 1.0;
}

// Exact KF analysis means on the shared observation sequence (linear oracle).
inline std::vector<Vector> exact_kf_means(const std::vector<std::pair<std::size_t, Vector>>& stream,
                                          const ObservationSystem& sys) {
    const LinearFixture f = make_linear_fixture();
    KfState kf{f.x1, f.sigma0};
    std::vector<Vector> out;
    out.reserve(stream.size());
    std::size_t t_now = 0;
    for (const auto& [w, y] : stream) {
        for (std::size_t t = t_now + 1; t <= w; ++t) kf = kf_forecast(kf, f.m, f.q_cov);
        t_now = w;
        kf = kf_analysis(kf, y, sys, sys.r);
        out.push_back(kf.mean);
    }
    return out;
}

} // namespace detail

// Twice the post-burn-in time-mean RMSE of a no-assimilation run: a single
// init-recipe draw propagated by the deterministic assimilation model against
// a dedicated truth draw.
inline double free_run_threshold(const ExperimentConfig& cfg) {
    if (cfg.divergence_threshold > 0.0) return cfg.divergence_threshold;
    const RngStream fr = RngStream(cfg.seed, 0).child(stream_tag::free_run);
    const detail::TruthData td = detail::make_truth(cfg, fr);
    const std::size_t p = cfg.state_dim();
    const Ensemble one = sample_gaussian(
        td.init, diagonal_spd_factor(Vector(p, detail::init_spread_std(cfg))), 1,
        fr.child(stream_tag::init_ens));
    Vector x = one.member_vec(0);
    const ModelOperator op = detail::make_assim_operator(cfg);
    double acc = 0.0;
    std::size_t count = 0;
    std::size_t k = 0;
    bool blown = false;
    for (std::size_t w = 1; w <= cfg.windows() && k < td.obs_windows.size(); ++w) {
        if (!blown) {
            try {
                x = op.advance(x, w);
            } catch (const EnkfError&) {
                blown = true;
            }
        }
        if (td.obs_windows[k] == w) {
            if (w > cfg.burn_in_windows() && !blown) {
                acc += rmse(x, td.at_obs[k]);
                ++count;
            }
            ++k;
        }
    }
    const double mean = (count > 0) ? acc / static_cast<double>(count) : 0.0;
    return std::max(2.0 * mean, 1e-12);
}

// One paired replicate: shared truth, observations, and initial ensemble;
// variants differ only in analysis-internal streams keyed by variant name.
inline ReplicateResult run_replicate(const ExperimentConfig& cfg, std::size_t replicate_id,
                                     double divergence_threshold, std::size_t threads = 1) {
    const RngStream rep_rng =
        RngStream(cfg.seed, 0).child(stream_tag::replicate).child(replicate_id);
    const detail::TruthData td = detail::make_truth(cfg, rep_rng);
    const ObservationSystem sys =
        detail::make_obs_system(cfg, rep_rng.child(stream_tag::obs_indices));
    const auto stream = detail::make_obs_stream(td, sys, rep_rng.child(stream_tag::obs_noise));
    const std::size_t p = cfg.state_dim();

    const Ensemble init_ens = sample_gaussian(
        td.init, diagonal_spd_factor(Vector(p, detail::init_spread_std(cfg))), cfg.n,
        rep_rng.child(stream_tag::init_ens));

    double qstd = 0.0;
    const bool has_q = detail::window_noise_std(cfg, qstd);
    SpdFactor q_factor;
    if (has_q) q_factor = diagonal_spd_factor(Vector(p, qstd));

    std::vector<Vector> oracle_means;
    if (cfg.testbed == Testbed::linear_gaussian) {
        oracle_means = detail::exact_kf_means(stream, sys);
    } else {
        Matrix init_cov(p, p);
        const double s0 = detail::init_spread_std(cfg);
        for (std::size_t i = 0; i < p; ++i) init_cov(i, i) = s0 * s0;
        double oqstd = 0.0;
        const bool has_oq = detail::oracle_noise_std(cfg, oqstd);
        SpdFactor oracle_q;
        if (has_oq) oracle_q = diagonal_spd_factor(Vector(p, oqstd));
        oracle_means = oracle_run(detail::make_true_operator(cfg), sys, stream, td.init, init_cov,
                                  cfg.oracle_size, has_oq ? &oracle_q : nullptr,
                                  rep_rng.child(stream_tag::oracle), threads);
    }

    const ModelOperator assim_op = detail::make_assim_operator(cfg);
    ReplicateResult out;
    out.records.resize(cfg.variants.size());
    out.diverged.assign(cfg.variants.size(), 0);
    for (std::size_t vi = 0; vi < cfg.variants.size(); ++vi) {
        const FilterVariant& v = cfg.variants[vi];
        const RngStream vrng =
            rep_rng.child(stream_tag::filter).child(name_tag(v.name()));
        std::vector<AssimilationRecord> recs =
            run_filter(v, assim_op, sys, stream, init_ens, has_q ? &q_factor : nullptr, vrng,
                       threads);
        std::vector<double> post_burn_truth;
        for (std::size_t k = 0; k < recs.size(); ++k) {
            recs[k].rmse_to_truth = rmse(recs[k].analysis_mean, td.at_obs[k]);
            recs[k].rmse_to_oracle = rmse(recs[k].analysis_mean, oracle_means[k]);
            if (recs[k].step > cfg.burn_in_windows())
                post_burn_truth.push_back(recs[k].rmse_to_truth);
        }
        out.diverged[vi] = detect_divergence(post_burn_truth, divergence_threshold) ? 1 : 0;
        out.records[vi] = std::move(recs);
    }
    return out;
}

namespace detail {

// Type-7 (linear interpolation) quantile of a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double prob) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (sorted.size() == 1) return sorted[0];
    const double h = prob * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

} // namespace detail

// Means over post-burn-in steps within a replicate, then across replicates;
// quantiles over the replicate means. Diverged replicates contribute only to
// the divergence rate. All replicates diverged leaves the RMSE fields NaN.
inline std::vector<SummaryRow> aggregate(const std::vector<ReplicateResult>& results,
                                         const ExperimentConfig& cfg) {
    if (results.empty()) throw EnkfError("aggregate: need >= 1 replicate");
    std::vector<SummaryRow> rows;
    const std::size_t burn_w = cfg.burn_in_windows();
    for (std::size_t vi = 0; vi < cfg.variants.size(); ++vi) {
        for (const bool to_oracle : {true, false}) {
            SummaryRow row;
            row.testbed = to_string(cfg.testbed);
            row.variant = cfg.variants[vi].name();
            row.target = to_oracle ? "oracle" : "true";
            row.param_override = cfg.param_override();
            row.n = cfg.n;
            row.p = cfg.state_dim();
            row.q = cfg.obs_dim();
            row.seed = cfg.seed;
            std::vector<double> rep_means;
            std::size_t diverged = 0;
            for (const ReplicateResult& rr : results) {
                if (rr.diverged[vi]) {
                    ++diverged;
                    continue;
                }
                double acc = 0.0;
                std::size_t count = 0;
                for (const AssimilationRecord& rec : rr.records[vi]) {
                    if (rec.step <= burn_w) continue;
                    acc += to_oracle ? rec.rmse_to_oracle : rec.rmse_to_truth;
                    ++count;
                }
                rep_means.push_back(count > 0 ? acc / static_cast<double>(count)
                                              : std::numeric_limits<double>::quiet_NaN());
            }
            row.div_rate = static_cast<double>(diverged) / static_cast<double>(results.size());
            if (!rep_means.empty()) {
                double acc = 0.0;
                for (const double v : rep_means) acc += v;
                row.mean_rmse = acc / static_cast<double>(rep_means.size());
                std::vector<double> sorted = rep_means;
                std::sort(sorted.begin(), sorted.end());
                row.q25 = detail::quantile_sorted(sorted, 0.25);
                row.q75 = detail::quantile_sorted(sorted, 0.75);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// Per-step means over non-diverged replicates, for figure regeneration.
inline std::vector<StepRow> aggregate_steps(const std::vector<ReplicateResult>& results,
                                            const ExperimentConfig& cfg) {
    std::vector<StepRow> rows;
    for (std::size_t vi = 0; vi < cfg.variants.size(); ++vi) {
        const std::size_t nsteps = results[0].records[vi].size();
        for (std::size_t k = 0; k < nsteps; ++k) {
            StepRow row;
            row.step = results[0].records[vi][k].step;
            row.variant = cfg.variants[vi].name();
            double acc_o = 0.0, acc_t = 0.0;
            std::size_t count = 0;
            for (const ReplicateResult& rr : results) {
                if (rr.diverged[vi]) continue;
                acc_o += rr.records[vi][k].rmse_to_oracle;
                acc_t += rr.records[vi][k].rmse_to_truth;
                ++count;
            }
            if (count > 0) {
                row.rmse_to_oracle = acc_o / static_cast<double>(count);
                row.rmse_to_truth = acc_t / static_cast<double>(count);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline ExperimentResult run_config(const ExperimentConfig& cfg) {
    if (cfg.replicates < 1) throw EnkfError("run_config: need replicates >= 1");
    if (cfg.burn_in_steps >= cfg.total_steps)
        throw EnkfError("run_config: burn-in must be below total steps");
    if (cfg.variants.empty()) throw EnkfError("run_config: no variants configured");
    ExperimentResult out;
    out.divergence_threshold = free_run_threshold(cfg);
    std::vector<ReplicateResult> results(cfg.replicates);
    const std::size_t outer = std::min<std::size_t>(std::max<std::size_t>(cfg.threads, 1),
                                                    cfg.replicates);
    const std::size_t inner = std::max<std::size_t>(1, cfg.threads / outer);
    parallel_for(cfg.replicates, outer, [&](std::size_t r) {
        results[r] = run_replicate(cfg, r, out.divergence_threshold, inner);
    });
    out.summary = aggregate(results, cfg);
    out.steps = aggregate_steps(results, cfg);
    return out;
}

inline void export_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("export_summary_csv: cannot open " + path);
    f << "testbed,variant,target,param_override,n,p,q,mean_rmse,q25,q75,div_rate,seed\n";
    for (const SummaryRow& r : rows) {
        f << r.testbed << ',' << r.variant << ',' << r.target << ',' << r.param_override << ','
          << r.n << ',' << r.p << ',' << r.q << ',' << format_double(r.mean_rmse) << ','
          << format_double(r.q25) << ',' << format_double(r.q75) << ','
          << format_double(r.div_rate) << ',' << r.seed << '\n';
    }
    if (!f) throw IoError("export_summary_csv: write failed for " + path);
}

inline void export_plotdata(const std::vector<StepRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("export_plotdata: cannot open " + path);
    f << "step,variant,rmse_to_oracle,rmse_to_truth\n";
    for (const StepRow& r : rows)
        f << r.step << ',' << r.variant << ',' << format_double(r.rmse_to_oracle) << ','
          << format_double(r.rmse_to_truth) << '\n';
    if (!f) throw IoError("export_plotdata: write failed for " + path);
}

inline std::vector<SummaryRow> parse_summary_csv(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<SummaryRow> rows;
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        std::vector<std::string> fields;
        std::size_t at = 0;
        while (true) {
            const std::size_t comma = line.find(',', at);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(at));
                break;
            }
            fields.push_back(line.substr(at, comma - at));
            at = comma + 1;
        }
        if (fields.size() != 12) throw ParseError("parse_summary_csv: bad row in " + path);
        SummaryRow r;
        r.testbed = fields[0];
        r.variant = fields[1];
        r.target = fields[2];
        r.param_override = fields[3];
        r.n = std::stoull(fields[4]);
        r.p = std::stoull(fields[5]);
        r.q = std::stoull(fields[6]);
        r.mean_rmse = std::strtod(fields[7].c_str(), nullptr);
        r.q25 = std::strtod(fields[8].c_str(), nullptr);
        r.q75 = std::strtod(fields[9].c_str(), nullptr);
        r.div_rate = std::strtod(fields[10].c_str(), nullptr);
        r.seed = std::stoull(fields[11]);
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace enkf
