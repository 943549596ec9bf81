#pragma once

#include <cstddef>
#include <vector>

#include "enkf/ensemble.hpp"
#include "enkf/errors.hpp"
#include "enkf/matrix.hpp"
#include "enkf/rng.hpp"

namespace enkf {

// Selection observation operator plus its error covariance. H is never
// materialized as a dense q×p matrix; it acts by index gathering.
struct ObservationSystem {
    std::size_t p = 0;
    std::size_t q = 0;
    std::vector<std::size_t> observed_indices;  // strictly increasing, 0-based
    Matrix r;
    SpdFactor r_factor;

    Vector apply_h(const Vector& x) const {
        if (x.size() != p) throw DimensionMismatch("apply_h: state size mismatch");
        Vector y(q);
        for (std::size_t m = 0; m < q; ++m) y[m] = x[observed_indices[m]];
        return y;
    }

    void apply_h(const double* x, double* y) const {
        for (std::size_t m = 0; m < q; ++m) y[m] = x[observed_indices[m]];
    }

    // Hᵀ scatter: q-vector into a p-vector, zeros elsewhere.
    Vector apply_ht(const Vector& y) const {
        if (y.size() != q) throw DimensionMismatch("apply_ht: obs size mismatch");
        Vector x(p, 0.0);
        for (std::size_t m = 0; m < q; ++m) x[observed_indices[m]] = y[m];
        return x;
    }

    // Σ Hᵀ: gather of Σ's observed columns, p×q.
    Matrix sigma_ht(const Matrix& sigma) const {
        if (sigma.rows != p || sigma.cols != p)
            throw DimensionMismatch("sigma_ht: covariance size mismatch");
        Matrix out(p, q);
        for (std::size_t i = 0; i < p; ++i) {
            const double* si = sigma.row(i);
            double* oi = out.row(i);
            for (std::size_t m = 0; m < q; ++m) oi[m] = si[observed_indices[m]];
        }
        return out;
    }

    // H Σ Hᵀ: double gather into a q×q matrix.
    Matrix h_sigma_ht(const Matrix& sigma) const {
        if (sigma.rows != p || sigma.cols != p)
            throw DimensionMismatch("h_sigma_ht: covariance size mismatch");
        Matrix out(q, q);
        for (std::size_t m = 0; m < q; ++m) {
            const double* srow = sigma.row(observed_indices[m]);
            double* om = out.row(m);
            for (std::size_t l = 0; l < q; ++l) om[l] = srow[observed_indices[l]];
        }
        return out;
    }
};

inline ObservationSystem make_selection_system(std::size_t p, std::vector<std::size_t> indices,
                                               Matrix r) {
    if (indices.empty()) throw InvalidIndices("make_selection_system: no observed indices");
    std::vector<std::size_t> sorted = indices;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t m = 0; m < sorted.size(); ++m) {
        if (sorted[m] >= p) throw InvalidIndices("make_selection_system: index out of range");
        if (m > 0 && sorted[m] == sorted[m - 1])
            throw InvalidIndices("make_selection_system: duplicate index");
    }
    const std::size_t q = sorted.size();
    if (r.rows != q || r.cols != q)
        throw DimensionMismatch("make_selection_system: R size mismatch");
    ObservationSystem sys;
    sys.p = p;
    sys.q = q;
    sys.observed_indices = std::move(sorted);
    sys.r_factor = cholesky(r);  // throws NotPositiveDefinite
    sys.r = std::move(r);
    return sys;
}

// R_ij = rho^min(|i-j|, q-|i-j|): correlated errors on a ring.
inline Matrix make_circular_r(std::size_t q, double rho) {
    if (rho < 0.0 || rho >= 1.0) throw EnkfError("make_circular_r: need 0 <= rho < 1");
    Matrix r(q, q);
    for (std::size_t i = 0; i < q; ++i)
        for (std::size_t j = 0; j < q; ++j) {
            const std::size_t d = (i > j) ? i - j : j - i;
            r(i, j) = std::pow(rho, static_cast<double>(std::min(d, q - d)));
        }
    cholesky(r);  // cannot fail for rho in [0,1); asserted anyway
    return r;
}

inline Matrix make_block_diag_r(const std::vector<std::pair<std::size_t, double>>& blocks) {
    std::size_t q = 0;
    for (const auto& [size, var] : blocks) {
        if (var <= 0.0) throw EnkfError("make_block_diag_r: variance must be positive");
        q += size;
    }
    Matrix r(q, q);
    std::size_t at = 0;
    for (const auto& [size, var] : blocks)
        for (std::size_t i = 0; i < size; ++i, ++at) r(at, at) = var;
    return r;
}

inline Vector observe_truth(const Vector& x_true, const ObservationSystem& sys,
                            const RngStream& rng) {
    Vector y = sys.apply_h(x_true);
    Vector z(sys.q);
    RngStream r = rng;
    for (std::size_t m = 0; m < sys.q; ++m) z[m] = r.normal();
    const Vector noise = sys.r_factor.apply_lower(z);
    for (std::size_t m = 0; m < sys.q; ++m) y[m] += noise[m];
    return y;
}

// Perturbed residuals d_j = y + ε_j − H x_j with IID ε_j ~ N(0, R), one child
// stream per member. The stored mean is the plain average of the d_j.
struct InnovationSet {
    Matrix perturbed;  // n×q, row j = d_j
    Vector mean;       // length q
};

inline InnovationSet perturbed_innovations(const Vector& y, const Ensemble& forecast,
                                           const ObservationSystem& sys, const RngStream& rng) {
    if (y.size() != sys.q) throw DimensionMismatch("perturbed_innovations: obs size mismatch");
    if (forecast.p != sys.p) throw DimensionMismatch("perturbed_innovations: state size mismatch");
    const std::size_t n = forecast.n, q = sys.q;
    InnovationSet out;
    out.perturbed = Matrix(n, q);
    out.mean.assign(q, 0.0);
    Vector z(q), hx(q);
    for (std::size_t j = 0; j < n; ++j) {
        RngStream mr = rng.child(j);
        for (std::size_t m = 0; m < q; ++m) z[m] = mr.normal();
        const Vector eps = sys.r_factor.apply_lower(z);
        sys.apply_h(forecast.member(j), hx.data());
        double* dj = out.perturbed.row(j);
        for (std::size_t m = 0; m < q; ++m) dj[m] = y[m] + eps[m] - hx[m];
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double* dj = out.perturbed.row(j);
        for (std::size_t m = 0; m < q; ++m) out.mean[m] += dj[m];
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t m = 0; m < q; ++m) out.mean[m] *= inv;
    return out;
}

} // namespace enkf
