#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "enkf/covariance.hpp"
#include "enkf/ensemble.hpp"
#include "enkf/errors.hpp"
#include "enkf/exec.hpp"
#include "enkf/matrix.hpp"
#include "enkf/models.hpp"
#include "enkf/observations.hpp"
#include "enkf/rng.hpp"

namespace enkf {

struct GainMatrix {
    Matrix matrix;  // p×q
};

struct KfState {
    Vector mean;
    Matrix covariance;
};

struct EstimatorSpec {
    CovKind kind = CovKind::banding;
    DistanceMode mode = DistanceMode::linear;
    std::vector<TuningParam> grid;  // empty = default grid for the kind
    std::size_t splits = 20;
};

struct FilterVariant {
    enum class Kind { standard, hd, inflation, iterative_hd, oracle };
    Kind kind = Kind::standard;
    EstimatorSpec estimator;  // meaningful for hd / iterative_hd
    std::pair<double, double> inflation_bounds{1.0, 20.0};
    std::size_t iterations = 3;     // iterative_hd analysis passes
    std::size_t oracle_size = 1000; // oracle ensemble size

    std::string name() const {
        switch (kind) {
            case Kind::standard: return "standard";
            case Kind::inflation: return "inflation";
            case Kind::oracle: return "oracle";
            case Kind::hd: return to_string(estimator.kind);
            case Kind::iterative_hd: return std::string("iterative_") + to_string(estimator.kind);
        }
        return "?";
    }
};

// K = Σ Hᵀ (H Σ Hᵀ + R)⁻¹ via a q×q SPD solve; no p×p inverse anywhere.
inline GainMatrix kalman_gain(const Matrix& sigma_f, const ObservationSystem& h, const Matrix& r) {
    if (sigma_f.rows != sigma_f.cols || sigma_f.rows != h.p)
        throw DimensionMismatch("kalman_gain: covariance shape mismatch");
    if (r.rows != h.q || r.cols != h.q) throw DimensionMismatch("kalman_gain: R shape mismatch");
    const Matrix g = h.h_sigma_ht(sigma_f);
    Matrix a = g;
    for (std::size_t i = 0; i < h.q; ++i)
        for (std::size_t j = 0; j < h.q; ++j) a(i, j) += r(i, j);
    // PSD Σ keeps 2·HΣHᵀ + R positive definite, so a Cholesky failure on the
    // shifted matrix certifies an indefinite estimate eroding over half the
    // noise floor in an observed direction. Checking A alone misses that: A
    // can stay barely PD with a near-singular inverse and the gain explodes.
    Matrix shifted = a;
    for (std::size_t i = 0; i < h.q; ++i)
        for (std::size_t j = 0; j < h.q; ++j) shifted(i, j) += g(i, j);
    SpdFactor fac;
    try {
        cholesky(shifted);
        fac = cholesky(a);
    } catch (const NotPositiveDefinite& e) {
        throw InnovationCovarianceNotPD(e.what());
    }
    const Matrix sht = h.sigma_ht(sigma_f);       // p×q
    const Matrix kt = solve_spd(fac, transpose(sht));  // q×p, solves A Kᵀ = (ΣHᵀ)ᵀ
    GainMatrix k;
    k.matrix = transpose(kt);
    return k;
}

inline KfState kf_analysis(const KfState& forecast, const Vector& y, const ObservationSystem& h,
                           const Matrix& r) {
    if (y.size() != h.q || forecast.mean.size() != h.p)
        throw DimensionMismatch("kf_analysis: dimension mismatch");
    const GainMatrix k = kalman_gain(forecast.covariance, h, r);
    Vector innov = h.apply_h(forecast.mean);
    for (std::size_t m = 0; m < h.q; ++m) innov[m] = y[m] - innov[m];
    KfState out;
    out.mean = forecast.mean;
    const Vector dx = matvec(k.matrix, innov);
    for (std::size_t i = 0; i < h.p; ++i) out.mean[i] += dx[i];
    // Σa = Σf − K (H Σf); H Σf is a q×p row gather
    Matrix h_sigma(h.q, h.p);
    for (std::size_t m = 0; m < h.q; ++m) {
        const double* src = forecast.covariance.row(h.observed_indices[m]);
        std::copy(src, src + h.p, h_sigma.row(m));
    }
    const Matrix khs = matmul(k.matrix, h_sigma);
    out.covariance = forecast.covariance;
    for (std::size_t i = 0; i < h.p; ++i)
        for (std::size_t j = 0; j < h.p; ++j) out.covariance(i, j) -= khs(i, j);
    symmetrize(out.covariance);
    return out;
}

inline KfState kf_forecast(const KfState& analysis, const Matrix& m, const Matrix& q_cov) {
    const std::size_t p = analysis.mean.size();
    if (m.rows != p || m.cols != p || q_cov.rows != p || q_cov.cols != p)
        throw DimensionMismatch("kf_forecast: dimension mismatch");
    KfState out;
    out.mean = matvec(m, analysis.mean);
    Matrix msm = matmul(matmul(m, analysis.covariance), transpose(m));
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j) msm(i, j) += q_cov(i, j);
    symmetrize(msm);
    out.covariance = std::move(msm);
    return out;
}

// One forecast window: advance every member, add one N(0,Q) draw per member
// (child stream indexed by member id), recompute the mean. Members run in
// parallel; a blown-up member sets a flag instead of throwing so the outcome
// is identical for every thread count.
inline Ensemble enkf_forecast(const Ensemble& analysis, const ModelOperator& model,
                              const SpdFactor* q_factor, const RngStream& rng,
                              std::size_t time_index = 0, std::size_t threads = 1) {
    if (model.state_dim != analysis.p)
        throw DimensionMismatch("enkf_forecast: model dimension mismatch");
    if (q_factor && q_factor->dimension() != analysis.p)
        throw DimensionMismatch("enkf_forecast: Q factor dimension mismatch");
    Ensemble out(analysis.n, analysis.p);
    std::vector<unsigned char> blew(analysis.n, 0);
    parallel_for(analysis.n, threads, [&](std::size_t j) {
        try {
            Vector x = model.advance(analysis.member_vec(j), time_index);
            if (q_factor) {
                RngStream mr = rng.child(j);
                Vector z(analysis.p);
                for (std::size_t i = 0; i < analysis.p; ++i) z[i] = mr.normal();
                const Vector w = q_factor->apply_lower(z);
                for (std::size_t i = 0; i < analysis.p; ++i) x[i] += w[i];
            }
            if (!is_finite(x)) {
                blew[j] = 1;
                return;
            }
            out.set_member(j, x);
        } catch (const NonFiniteState&) {
            blew[j] = 1;
        } catch (const CflViolation&) {
            blew[j] = 1;
        }
    });
    for (std::size_t j = 0; j < analysis.n; ++j)
        if (blew[j]) throw ModelBlewUp("enkf_forecast: member " + std::to_string(j) + " non-finite");
    out.refresh_mean();
    return out;
}

// Shared analysis core once innovations are drawn: one psd_repair retry on a
// non-PD innovation covariance, then the failure propagates.
inline Ensemble enkf_analysis_with(const Ensemble& forecast, const InnovationSet& innov,
                                   const ObservationSystem& obs, const Matrix& sigma_hat,
                                   bool* repaired = nullptr, std::size_t threads = 1) {
    // an overflowed covariance estimate can never produce a PD innovation
    // covariance; classify it the same way so callers see one failure mode
    if (!is_finite(sigma_hat))
        throw InnovationCovarianceNotPD("enkf_analysis_with: non-finite covariance estimate");
    GainMatrix k;
    try {
        k = kalman_gain(sigma_hat, obs, obs.r);
        if (repaired) *repaired = false;
    } catch (const InnovationCovarianceNotPD&) {
        const Matrix fixed = psd_repair(sigma_hat, 1e-8);
        k = kalman_gain(fixed, obs, obs.r);
        if (repaired) *repaired = true;
    }
    Ensemble out(forecast.n, forecast.p);
    parallel_for(forecast.n, threads, [&](std::size_t j) {
        const double* xf = forecast.member(j);
        const double* dj = innov.perturbed.row(j);
        double* xa = out.member(j);
        for (std::size_t i = 0; i < forecast.p; ++i) {
            const double* ki = k.matrix.row(i);
            double acc = xf[i];
            for (std::size_t m = 0; m < obs.q; ++m) acc += ki[m] * dj[m];
            xa[i] = acc;
        }
    });
    out.refresh_mean();
    return out;
}

inline Ensemble enkf_analysis(const Ensemble& forecast, const Vector& y,
                              const ObservationSystem& obs, const CovarianceEstimate& sigma_hat,
                              const RngStream& rng) {
    const InnovationSet innov = perturbed_innovations(y, forecast, obs, rng);
    return enkf_analysis_with(forecast, innov, obs, sigma_hat.matrix);
}

// 1-D ML multiplicative inflation: maximize the Gaussian log-likelihood of
// the mean innovation under N(0, λ·HΣ̂Hᵀ + R) by golden-section search.
inline double estimate_inflation(const Vector& d_mean, const CovarianceEstimate& sigma_hat,
                                 const ObservationSystem& obs,
                                 std::pair<double, double> bounds) {
    if (bounds.first < 1.0 || bounds.second > 100.0 || bounds.first > bounds.second)
        throw EnkfError("estimate_inflation: need 1 <= lo <= hi <= 100");
    if (d_mean.size() != obs.q) throw DimensionMismatch("estimate_inflation: innovation size");
    const Matrix g = obs.h_sigma_ht(sigma_hat.matrix);
    double tr = 0.0;
    for (std::size_t i = 0; i < obs.q; ++i) tr += g(i, i);
    if (!std::isfinite(tr) || tr <= 0.0)
        throw DegenerateLikelihood("estimate_inflation: degenerate projected covariance");

    auto loglik = [&](double lam) {
        Matrix a = obs.r;
        for (std::size_t i = 0; i < obs.q; ++i)
            for (std::size_t j = 0; j < obs.q; ++j) a(i, j) += lam * g(i, j);
        // an overflowing ensemble can push λ·G + R indefinite at roundoff
        // scale; that is a divergence signal, not a usage error
        try {
            const SpdFactor fac = cholesky(a);
            const Vector sol = fac.solve(d_mean);
            return -0.5 * (fac.log_det() + dot(d_mean, sol));
        } catch (const NotPositiveDefinite&) {
            throw DegenerateLikelihood("estimate_inflation: likelihood covariance not PD");
        }
    };

    double a = bounds.first, b = bounds.second;
    if (b - a < 1e-12) return a;
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
    double f1 = loglik(x1), f2 = loglik(x2);
    while (b - a > 1e-4) {
        if (f1 < f2) {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = loglik(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = loglik(x1);
        }
    }
    return 0.5 * (a + b);
}

namespace detail {

struct VariantAnalysis {
    Ensemble ensemble{0, 0};
    TuningParam tuning;
    double inflation = 1.0;
};

// Regularized analysis with optional recentering iterations. Iteration 0 is
// the plain estimator path; iteration i >= 1 recenters the covariance at the
// previous analysis mean, re-selects the tuning, and redoes the analysis from
// the original forecast ensemble with the same innovation draws.
inline VariantAnalysis hd_iterate(const Ensemble& forecast, const InnovationSet& innov,
                                  const ObservationSystem& obs, const FilterVariant& variant,
                                  const RngStream& selection_rng, std::size_t max_iters,
                                  std::size_t threads) {
    const EstimatorSpec& es = variant.estimator;
    const std::size_t p = forecast.p;
    VariantAnalysis out;

    CovarianceEstimate s = sample_covariance(forecast);
    std::vector<TuningParam> grid =
        es.grid.empty() ? default_grid(es.kind, p, &s.matrix) : es.grid;
    out.tuning = select_tuning(forecast, es.kind, es.mode, grid, es.splits, selection_rng);
    CovarianceEstimate reg = apply_estimator(s, out.tuning, es.mode);
    out.ensemble = enkf_analysis_with(forecast, innov, obs, reg.matrix, nullptr, threads);

    std::vector<std::size_t> all(forecast.n);
    for (std::size_t j = 0; j < forecast.n; ++j) all[j] = j;
    Vector prev_mean = out.ensemble.mean;
    for (std::size_t it = 1; it < max_iters; ++it) {
        CovarianceEstimate si;
        si.matrix = covariance_about(forecast, all, &prev_mean);
        std::vector<TuningParam> grid_i =
            es.grid.empty() ? default_grid(es.kind, p, &si.matrix) : es.grid;
        out.tuning = select_tuning(forecast, es.kind, es.mode, grid_i, es.splits,
                                   selection_rng.child(it), &prev_mean);
        reg = apply_estimator(si, out.tuning, es.mode);
        out.ensemble = enkf_analysis_with(forecast, innov, obs, reg.matrix, nullptr, threads);
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const double d = out.ensemble.mean[i] - prev_mean[i];
            acc += d * d;
        }
        prev_mean = out.ensemble.mean;
        if (std::sqrt(acc / static_cast<double>(p)) < 1e-6) break;
    }
    return out;
}

} // namespace detail

inline Ensemble iterative_hd_analysis(const Ensemble& forecast, const Vector& y,
                                      const ObservationSystem& obs, const FilterVariant& variant,
                                      const RngStream& rng) {
    if (variant.iterations < 1) throw EnkfError("iterative_hd_analysis: need iterations >= 1");
    const InnovationSet innov =
        perturbed_innovations(y, forecast, obs, rng.child(stream_tag::analysis));
    return detail::hd_iterate(forecast, innov, obs, variant, rng.child(stream_tag::selection),
                              variant.iterations, 1)
        .ensemble;
}

// One analysis record per observation time. RMSE fields stay NaN here; the
// experiment layer fills them against its truth and oracle trajectories.
struct AssimilationRecord {
    std::size_t step = 0;
    std::string variant;
    double rmse_to_oracle = std::numeric_limits<double>::quiet_NaN();
    double rmse_to_truth = std::numeric_limits<double>::quiet_NaN();
    std::string tuning = "-";
    double inflation = 1.0;
    bool diverged = false;
    double wall_ms = 0.0;
    Vector forecast_mean;
    Vector analysis_mean;
};

// Full forecast/analysis cycle over an observation stream. A blown-up model
// marks the remaining records diverged and stops integrating; a non-PD
// analysis (after the psd_repair retry inside the core) marks one record
// diverged and carries the forecast forward as the analysis.
inline std::vector<AssimilationRecord> run_filter(
    const FilterVariant& variant, const ModelOperator& model, const ObservationSystem& obs,
    const std::vector<std::pair<std::size_t, Vector>>& obs_stream, const Ensemble& init,
    const SpdFactor* q_factor, const RngStream& rng, std::size_t threads = 1) {
    if (init.n < 2) throw InsufficientMembers("run_filter: need n >= 2");
    if (variant.kind == FilterVariant::Kind::oracle && variant.oracle_size < 10 * init.n)
        throw EnkfError("run_filter: oracle variant needs oracle_size >= 10n");
    for (std::size_t i = 1; i < obs_stream.size(); ++i)
        if (obs_stream[i].first <= obs_stream[i - 1].first)
            throw EnkfError("run_filter: observation times must be strictly increasing");

    const std::string vname = variant.name();
    const RngStream forecast_rng = rng.child(stream_tag::forecast);
    const RngStream analysis_rng = rng.child(stream_tag::analysis);

    std::vector<AssimilationRecord> records;
    records.reserve(obs_stream.size());
    Ensemble current = init;
    std::size_t t_now = 0;
    bool dead = false;
    const Vector nan_mean(init.p, std::numeric_limits<double>::quiet_NaN());

    for (const auto& [t_obs, y] : obs_stream) {
        AssimilationRecord rec;
        rec.step = t_obs;
        rec.variant = vname;
        if (dead) {
            rec.diverged = true;
            rec.forecast_mean = nan_mean;
            rec.analysis_mean = nan_mean;
            records.push_back(std::move(rec));
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        try {
            for (std::size_t w = t_now + 1; w <= t_obs; ++w)
                current = enkf_forecast(current, model, q_factor, forecast_rng.child(w), w, threads);
            t_now = t_obs;
        } catch (const ModelBlewUp&) {
            dead = true;
            rec.diverged = true;
            rec.forecast_mean = nan_mean;
            rec.analysis_mean = nan_mean;
            records.push_back(std::move(rec));
            continue;
        }
        rec.forecast_mean = current.mean;

        const RngStream step_rng = analysis_rng.child(t_obs);
        try {
            switch (variant.kind) {
                case FilterVariant::Kind::standard:
                case FilterVariant::Kind::oracle: {
                    const InnovationSet innov =
                        perturbed_innovations(y, current, obs, step_rng.child(stream_tag::obs_noise));
                    const CovarianceEstimate s = sample_covariance(current);
                    current = enkf_analysis_with(current, innov, obs, s.matrix, nullptr, threads);
                    break;
                }
                case FilterVariant::Kind::inflation: {
                    const InnovationSet innov =
                        perturbed_innovations(y, current, obs, step_rng.child(stream_tag::obs_noise));
                    const CovarianceEstimate s = sample_covariance(current);
                    const double lam =
                        estimate_inflation(innov.mean, s, obs, variant.inflation_bounds);
                    Matrix inflated = s.matrix;
                    for (double& v : inflated.a) v *= lam;
                    current = enkf_analysis_with(current, innov, obs, inflated, nullptr, threads);
                    rec.inflation = lam;
                    break;
                }
                case FilterVariant::Kind::hd:
                case FilterVariant::Kind::iterative_hd: {
                    const InnovationSet innov =
                        perturbed_innovations(y, current, obs, step_rng.child(stream_tag::obs_noise));
                    const std::size_t iters =
                        (variant.kind == FilterVariant::Kind::hd) ? 1 : variant.iterations;
                    detail::VariantAnalysis va =
                        detail::hd_iterate(current, innov, obs, variant,
                                           step_rng.child(stream_tag::selection), iters, threads);
                    current = std::move(va.ensemble);
                    rec.tuning = va.tuning.describe();
                    break;
                }
            }
        } catch (const InnovationCovarianceNotPD&) {
            rec.diverged = true;  // forecast carried forward as the analysis
        } catch (const DegenerateLikelihood&) {
            rec.diverged = true;
        }
        rec.analysis_mean = current.mean;
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                          .count();
        records.push_back(std::move(rec));
    }
    return records;
}

// Large-ensemble reference: a standard EnKF at oracle_size members that, at
// each observation time, also emits the deterministic KF-style update of the
// forecast mean, x̂f + K(y − H x̂f), with K built from the large-ensemble
// sample covariance. That emitted sequence is the RMSE-to-oracle reference.
inline std::vector<Vector> oracle_run(const ModelOperator& model, const ObservationSystem& obs,
                                      const std::vector<std::pair<std::size_t, Vector>>& obs_stream,
                                      const Vector& init_mean, const Matrix& init_cov,
                                      std::size_t oracle_size, const SpdFactor* q_factor,
                                      const RngStream& rng, std::size_t threads = 1) {
    if (oracle_size < 500) throw EnkfError("oracle_run: need oracle_size >= 500");
    const std::size_t p = init_mean.size();
    const Vector nan_mean(p, std::numeric_limits<double>::quiet_NaN());
    Ensemble current =
        sample_gaussian(init_mean, cholesky(init_cov), oracle_size, rng.child(stream_tag::init_ens));
    const RngStream forecast_rng = rng.child(stream_tag::forecast);
    const RngStream analysis_rng = rng.child(stream_tag::analysis);

    std::vector<Vector> emitted;
    emitted.reserve(obs_stream.size());
    std::size_t t_now = 0;
    bool dead = false;
    for (const auto& [t_obs, y] : obs_stream) {
        if (dead) {
            emitted.push_back(nan_mean);
            continue;
        }
        try {
            for (std::size_t w = t_now + 1; w <= t_obs; ++w)
                current = enkf_forecast(current, model, q_factor, forecast_rng.child(w), w, threads);
            t_now = t_obs;
            const CovarianceEstimate s = sample_covariance(current);
            const GainMatrix k = kalman_gain(s.matrix, obs, obs.r);
            Vector innov = obs.apply_h(current.mean);
            for (std::size_t m = 0; m < obs.q; ++m) innov[m] = y[m] - innov[m];
            Vector kf_mean = current.mean;
            const Vector dx = matvec(k.matrix, innov);
            for (std::size_t i = 0; i < p; ++i) kf_mean[i] += dx[i];
            emitted.push_back(std::move(kf_mean));

            const RngStream step_rng = analysis_rng.child(t_obs);
            const InnovationSet iset =
                perturbed_innovations(y, current, obs, step_rng.child(stream_tag::obs_noise));
            current = enkf_analysis_with(current, iset, obs, s.matrix, nullptr, threads);
        } catch (const ModelBlewUp&) {
            dead = true;
            emitted.push_back(nan_mean);
        } catch (const InnovationCovarianceNotPD&) {
            dead = true;
            emitted.push_back(nan_mean);
        }
    }
    return emitted;
}

} // namespace enkf
