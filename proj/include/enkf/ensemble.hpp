#pragma once

#include <cstddef>
#include <vector>

#include "enkf/errors.hpp"
#include "enkf/matrix.hpp"
#include "enkf/rng.hpp"

namespace enkf {

// n members of dimension p, stored contiguously one member per row, with the
// arithmetic mean cached. Mutate members only through member()/set_member and
// call refresh_mean() before handing the ensemble on.
struct Ensemble {
    std::size_t n = 0;
    std::size_t p = 0;
    std::vector<double> data;  // n×p row-major
    Vector mean;

    Ensemble() = default;
    Ensemble(std::size_t n_, std::size_t p_) : n(n_), p(p_), data(n_ * p_, 0.0), mean(p_, 0.0) {}

    double* member(std::size_t j) { return data.data() + j * p; }
    const double* member(std::size_t j) const { return data.data() + j * p; }

    Vector member_vec(std::size_t j) const {
        return Vector(member(j), member(j) + p);
    }

    void set_member(std::size_t j, const Vector& x) {
        if (x.size() != p) throw DimensionMismatch("Ensemble::set_member: length");
        double* m = member(j);
        for (std::size_t i = 0; i < p; ++i) m[i] = x[i];
    }

    // Fixed summation order (member 0..n-1) so the mean is bit-stable
    // regardless of how members were produced.
    void refresh_mean() {
        mean.assign(p, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double* m = member(j);
            for (std::size_t i = 0; i < p; ++i) mean[i] += m[i];
        }
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < p; ++i) mean[i] *= inv;
    }

    bool finite() const {
        for (const double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// n independent draws mean + L·z, one child stream per member so the result
// does not depend on evaluation order.
inline Ensemble sample_gaussian(const Vector& mean, const SpdFactor& cov_factor, std::size_t n,
                                const RngStream& rng) {
    if (mean.size() != cov_factor.dimension())
        throw DimensionMismatch("sample_gaussian: mean length vs factor dimension");
    if (n < 1) throw DimensionMismatch("sample_gaussian: n must be >= 1");
    const std::size_t p = mean.size();
    Ensemble e(n, p);
    Vector z(p);
    for (std::size_t j = 0; j < n; ++j) {
        RngStream s = rng.child(j);
        for (std::size_t i = 0; i < p; ++i) z[i] = s.normal();
        const Vector y = cov_factor.apply_lower(z);
        double* m = e.member(j);
        for (std::size_t i = 0; i < p; ++i) m[i] = mean[i] + y[i];
    }
    e.refresh_mean();
    return e;
}

} // namespace enkf
