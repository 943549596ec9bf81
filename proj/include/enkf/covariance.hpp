#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "enkf/ensemble.hpp"
#include "enkf/errors.hpp"
#include "enkf/matrix.hpp"
#include "enkf/rng.hpp"

namespace enkf {

enum class CovKind { sample, banding, mid_banding, tapering, thresholding };
enum class DistanceMode { linear, circular };

inline const char* to_string(CovKind k) {
    switch (k) {
        case CovKind::sample: return "sample";
        case CovKind::banding: return "banding";
        case CovKind::mid_banding: return "mid_banding";
        case CovKind::tapering: return "tapering";
        case CovKind::thresholding: return "thresholding";
    }
    return "?";
}

// Tuning record for one estimator: k (banding/tapering), (k1,k2) for
// mid-banding, s for thresholding. Unused fields stay zero.
struct TuningParam {
    CovKind kind = CovKind::sample;
    std::size_t k = 0;
    std::size_t k1 = 0;
    std::size_t k2 = 0;
    double s = 0.0;

    std::string describe() const {
        switch (kind) {
            case CovKind::sample: return "-";
            case CovKind::banding:
            case CovKind::tapering: return "k=" + std::to_string(k);
            case CovKind::mid_banding:
                return "k1=" + std::to_string(k1) + ",k2=" + std::to_string(k2);
            case CovKind::thresholding: return "s=" + std::to_string(s);
        }
        return "?";
    }
};

struct CovarianceEstimate {
    Matrix matrix;  // symmetric p×p
    CovKind kind = CovKind::sample;
    DistanceMode distance_mode = DistanceMode::linear;
    TuningParam params;
};

inline std::size_t index_distance(std::size_t i, std::size_t j, std::size_t p, DistanceMode mode) {
    const std::size_t d = (i > j) ? i - j : j - i;
    return (mode == DistanceMode::circular) ? std::min(d, p - d) : d;
}

// S = (n-1)^-1 Σ_j (x_j - x̄)(x_j - x̄)ᵀ via rank-1 updates on the upper
// triangle. Row-wise mirroring afterwards keeps the result exactly symmetric.
inline CovarianceEstimate sample_covariance(const Ensemble& e) {
    if (e.n < 2) throw InsufficientMembers("sample_covariance: need n >= 2");
    const std::size_t p = e.p;
    Matrix s(p, p);
    Vector c(p);
    for (std::size_t j = 0; j < e.n; ++j) {
        const double* m = e.member(j);
        for (std::size_t i = 0; i < p; ++i) c[i] = m[i] - e.mean[i];
        for (std::size_t i = 0; i < p; ++i) {
            const double ci = c[i];
            double* si = s.row(i);
            for (std::size_t l = i; l < p; ++l) si[l] += ci * c[l];
        }
    }
    const double inv = 1.0 / static_cast<double>(e.n - 1);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t l = i; l < p; ++l) {
            const double v = s(i, l) * inv;
            s(i, l) = v;
            s(l, i) = v;
        }
    CovarianceEstimate out;
    out.matrix = std::move(s);
    out.kind = CovKind::sample;
    return out;
}

// Same sum over a member subset, recentered at `center` instead of the subset
// mean when a center is supplied (used by the iterative analysis).
inline Matrix covariance_about(const Ensemble& e, const std::vector<std::size_t>& members,
                               const Vector* center) {
    if (members.size() < 2) throw InsufficientMembers("covariance_about: need >= 2 members");
    const std::size_t p = e.p;
    Vector mu(p, 0.0);
    if (center) {
        mu = *center;
    } else {
        for (const std::size_t j : members) {
            const double* m = e.member(j);
            for (std::size_t i = 0; i < p; ++i) mu[i] += m[i];
        }
        const double inv = 1.0 / static_cast<double>(members.size());
        for (std::size_t i = 0; i < p; ++i) mu[i] *= inv;
    }
    Matrix s(p, p);
    Vector c(p);
    for (const std::size_t j : members) {
        const double* m = e.member(j);
        for (std::size_t i = 0; i < p; ++i) c[i] = m[i] - mu[i];
        for (std::size_t i = 0; i < p; ++i) {
            const double ci = c[i];
            double* si = s.row(i);
            for (std::size_t l = i; l < p; ++l) si[l] += ci * c[l];
        }
    }
    const double inv = 1.0 / static_cast<double>(members.size() - 1);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t l = i; l < p; ++l) {
            const double v = s(i, l) * inv;
            s(i, l) = v;
            s(l, i) = v;
        }
    return s;
}

inline CovarianceEstimate band(const CovarianceEstimate& s, std::size_t k, DistanceMode mode) {
    const std::size_t p = s.matrix.rows;
    if (k >= p) throw BandwidthOutOfRange("band: need 0 <= k < p");
    CovarianceEstimate out = s;
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
            if (index_distance(i, j, p, mode) > k) out.matrix(i, j) = 0.0;
    out.kind = CovKind::banding;
    out.distance_mode = mode;
    out.params = TuningParam{CovKind::banding, k, 0, 0, 0.0};
    return out;
}

// Keeps |i-j| <= k1 plus the wraparound corners |i-j| >= p-k2. Linear index
// distance by definition; band(S,k,circular) == mid_band(S,k,k) for k < p/2.
inline CovarianceEstimate mid_band(const CovarianceEstimate& s, std::size_t k1, std::size_t k2) {
    const std::size_t p = s.matrix.rows;
    if (k2 > p || k1 + k2 >= p) throw BandwidthOutOfRange("mid_band: need 0 <= k1 < p-k2 <= p");
    CovarianceEstimate out = s;
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            const std::size_t d = (i > j) ? i - j : j - i;
            if (d > k1 && d < p - k2) out.matrix(i, j) = 0.0;
        }
    out.kind = CovKind::mid_banding;
    out.params = TuningParam{CovKind::mid_banding, 0, k1, k2, 0.0};
    return out;
}

// Flat-top piecewise-linear taper: 1 up to k/2, linear down to 0 at k.
inline double taper_weight(std::size_t d, std::size_t k) {
    const double kk = static_cast<double>(k);
    const double dd = static_cast<double>(d);
    const double a = std::max(kk - dd, 0.0);
    const double b = std::max(0.5 * kk - dd, 0.0);
    return (2.0 / kk) * (a - b);
}

inline CovarianceEstimate taper(const CovarianceEstimate& s, std::size_t k, DistanceMode mode) {
    const std::size_t p = s.matrix.rows;
    if (k < 1 || k > p) throw BandwidthOutOfRange("taper: need 1 <= k <= p");
    if (k % 2 != 0) throw OddTaperWidth("taper: width must be even");
    CovarianceEstimate out = s;
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
            out.matrix(i, j) *= taper_weight(index_distance(i, j, p, mode), k);
    out.kind = CovKind::tapering;
    out.distance_mode = mode;
    out.params = TuningParam{CovKind::tapering, k, 0, 0, 0.0};
    return out;
}

// Hard thresholding of off-diagonal entries; the diagonal survives
// unconditionally (a zero forecast variance would poison the gain).
inline CovarianceEstimate threshold(const CovarianceEstimate& s, double level) {
    if (level < 0.0) throw BandwidthOutOfRange("threshold: level must be >= 0");
    const std::size_t p = s.matrix.rows;
    CovarianceEstimate out = s;
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
            if (i != j && std::abs(out.matrix(i, j)) < level) out.matrix(i, j) = 0.0;
    out.kind = CovKind::thresholding;
    out.params = TuningParam{CovKind::thresholding, 0, 0, 0, level};
    return out;
}

inline CovarianceEstimate apply_estimator(const CovarianceEstimate& s, const TuningParam& t,
                                          DistanceMode mode) {
    switch (t.kind) {
        case CovKind::sample: return s;
        case CovKind::banding: return band(s, t.k, mode);
        case CovKind::mid_banding: return mid_band(s, t.k1, t.k2);
        case CovKind::tapering: return taper(s, t.k, mode);
        case CovKind::thresholding: return threshold(s, t.s);
    }
    throw EnkfError("apply_estimator: unknown kind");
}

// h(k): mean squared entry on the k-th subdiagonal. Flat near zero for
// bandable targets, U-shaped over k for circular-bandable ones.
inline double subdiagonal_energy(const Matrix& sigma, std::size_t k) {
    const std::size_t p = sigma.rows;
    if (k >= p) throw BandwidthOutOfRange("subdiagonal_energy: need 0 <= k < p");
    double acc = 0.0;
    for (std::size_t l = 0; l + k < p; ++l) {
        const double v = sigma(l, l + k);
        acc += v * v;
    }
    return acc / static_cast<double>(p - k);
}

namespace detail {

// Per-distance sums of S1², S2², S1·S2 over all ordered index pairs. One
// O(p²) pass prices every banding/tapering/mid-banding candidate in O(p).
struct DistanceBuckets {
    std::vector<double> a;  // Σ S1²
    std::vector<double> b;  // Σ S2²
    std::vector<double> c;  // Σ S1·S2
};

inline DistanceBuckets distance_buckets(const Matrix& s1, const Matrix& s2, DistanceMode mode) {
    const std::size_t p = s1.rows;
    const std::size_t dmax = (mode == DistanceMode::circular) ? p / 2 : p - 1;
    DistanceBuckets db;
    db.a.assign(dmax + 1, 0.0);
    db.b.assign(dmax + 1, 0.0);
    db.c.assign(dmax + 1, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            const std::size_t d = index_distance(i, j, p, mode);
            const double x = s1(i, j), y = s2(i, j);
            db.a[d] += x * x;
            db.b[d] += y * y;
            db.c[d] += x * y;
        }
    return db;
}

// Σ_ij (est(S1)_ij − S2_ij)² for every grid candidate, accumulated into
// `risk` (same order as the grid).
inline void accumulate_split_risk(const Matrix& s1, const Matrix& s2, CovKind kind,
                                  DistanceMode mode, const std::vector<TuningParam>& grid,
                                  std::vector<double>& risk) {
    const std::size_t p = s1.rows;
    if (kind == CovKind::thresholding) {
        // Bucket off-diagonal entries by which candidates keep them. Sorting
        // candidate levels once makes each entry a binary search.
        std::vector<double> levels(grid.size());
        std::vector<std::size_t> order(grid.size());
        for (std::size_t g = 0; g < grid.size(); ++g) order[g] = g;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t x, std::size_t y) { return grid[x].s < grid[y].s; });
        for (std::size_t g = 0; g < grid.size(); ++g) levels[g] = grid[order[g]].s;
        // kept_acc[g] collects (S1-S2)² for entries kept by sorted candidate g
        // and dropped by candidate g+1; suffix/prefix sums finish the job.
        std::vector<double> kept_tail(grid.size() + 1, 0.0);  // entries with |S1| >= levels[g]
        std::vector<double> drop_head(grid.size() + 1, 0.0);  // entries with |S1| < levels[g]
        double diag_err = 0.0;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < p; ++j) {
                const double x = s1(i, j), y = s2(i, j);
                if (i == j) {
                    const double dxy = x - y;
                    diag_err += dxy * dxy;
                    continue;
                }
                const double m = std::abs(x);
                // first sorted candidate with level > m: kept by [0, cut), dropped by [cut, end)
                const std::size_t cut =
                    std::upper_bound(levels.begin(), levels.end(), m) - levels.begin();
                const double dxy = (x - y) * (x - y);
                kept_tail[cut] += dxy;  // kept by candidates < cut
                drop_head[cut] += y * y;
            }
        // kept_sum(g) = Σ_{cut > g} kept_tail[cut]; drop_sum(g) = Σ_{cut <= g} drop_head[cut]
        double kept_run = 0.0;
        std::vector<double> kept_sum(grid.size(), 0.0);
        for (std::size_t g = grid.size(); g-- > 0;) {
            kept_run += kept_tail[g + 1];
            kept_sum[g] = kept_run;
        }
        double drop_run = 0.0;
        for (std::size_t g = 0; g < grid.size(); ++g) {
            drop_run += drop_head[g];
            risk[order[g]] += diag_err + kept_sum[g] + drop_run;
        }
        return;
    }

    // Mid-banding is defined on linear index distance whatever the caller's
    // mode; its corner entries only exist in the linear bucketing.
    const DistanceBuckets db = distance_buckets(
        s1, s2, kind == CovKind::mid_banding ? DistanceMode::linear : mode);
    const std::size_t dmax = db.a.size() - 1;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        const TuningParam& t = grid[g];
        double r = 0.0;
        switch (kind) {
            case CovKind::banding:
                for (std::size_t d = 0; d <= dmax; ++d)
                    r += (d <= t.k) ? (db.a[d] - 2.0 * db.c[d] + db.b[d]) : db.b[d];
                break;
            case CovKind::tapering:
                for (std::size_t d = 0; d <= dmax; ++d) {
                    const double w = taper_weight(d, t.k);
                    r += w * w * db.a[d] - 2.0 * w * db.c[d] + db.b[d];
                }
                break;
            case CovKind::mid_banding:
                // linear-distance buckets by construction of the estimator
                for (std::size_t d = 0; d <= dmax; ++d) {
                    const bool kept = (d <= t.k1) || (d + t.k2 >= p);
                    r += kept ? (db.a[d] - 2.0 * db.c[d] + db.b[d]) : db.b[d];
                }
                break;
            default:
                throw EnkfError("accumulate_split_risk: unsupported kind");
        }
        risk[g] += r;
    }
}

} // namespace detail

// Default candidate grids. Thresholding needs the full-ensemble sample
// covariance to place its 20 log-spaced levels between the 50th and 100th
// percentile of |off-diagonal| mass.
inline std::vector<TuningParam> default_grid(CovKind kind, std::size_t p,
                                             const Matrix* full_sample = nullptr) {
    std::vector<TuningParam> grid;
    switch (kind) {
        case CovKind::banding: {
            const std::size_t kmax = std::min<std::size_t>(p - 1, 30);
            for (std::size_t k = 0; k <= kmax; ++k)
                grid.push_back(TuningParam{CovKind::banding, k, 0, 0, 0.0});
            break;
        }
        case CovKind::tapering: {
            const std::size_t kmax = std::min<std::size_t>(p - 1, 30);
            for (std::size_t k = 2; k <= kmax; k += 2)
                grid.push_back(TuningParam{CovKind::tapering, k, 0, 0, 0.0});
            break;
        }
        case CovKind::mid_banding: {
            const std::size_t cap = std::min<std::size_t>(p - 1, 30);
            for (std::size_t k1 = 0; k1 <= cap; ++k1)
                for (std::size_t k2 = 0; k1 + k2 <= cap; ++k2)
                    if (k1 + k2 < p)
                        grid.push_back(TuningParam{CovKind::mid_banding, 0, k1, k2, 0.0});
            break;
        }
        case CovKind::thresholding: {
            if (!full_sample) throw EnkfError("default_grid: thresholding needs the sample covariance");
            std::vector<double> mags;
            mags.reserve(p * (p - 1) / 2);
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = i + 1; j < p; ++j) mags.push_back(std::abs((*full_sample)(i, j)));
            if (mags.empty()) {
                grid.push_back(TuningParam{CovKind::thresholding, 0, 0, 0, 0.0});
                break;
            }
            std::sort(mags.begin(), mags.end());
            double lo = mags[(mags.size() - 1) / 2];
            const double hi = mags.back();
            if (hi <= 0.0) {
                grid.push_back(TuningParam{CovKind::thresholding, 0, 0, 0, 0.0});
                break;
            }
            if (lo <= 0.0) lo = hi * 1e-6;
            const std::size_t count = 20;
            for (std::size_t g = 0; g < count; ++g) {
                const double f = static_cast<double>(g) / static_cast<double>(count - 1);
                grid.push_back(TuningParam{CovKind::thresholding, 0, 0, 0,
                                           std::exp(std::log(lo) + f * (std::log(hi) - std::log(lo)))});
            }
            break;
        }
        case CovKind::sample:
            grid.push_back(TuningParam{CovKind::sample, 0, 0, 0, 0.0});
            break;
    }
    return grid;
}

// Split-risk tuning selection: over `splits` random 50/50 member partitions,
// score each candidate by the squared Frobenius distance between the
// estimator applied to half-1's sample covariance and half-2's sample
// covariance; return the candidate with the lowest total. Candidates are
// scanned from most to least regularized with strict improvement, so exact
// ties resolve toward the stronger regularizer. A non-null `center` recenters
// both half covariances there (iterative analysis recentering).
inline TuningParam select_tuning(const Ensemble& e, CovKind kind, DistanceMode mode,
                                 const std::vector<TuningParam>& grid, std::size_t splits,
                                 const RngStream& rng, const Vector* center = nullptr) {
    if (e.n < 4) throw InsufficientMembers("select_tuning: need n >= 4");
    if (grid.empty()) throw EnkfError("select_tuning: empty candidate grid");
    if (splits < 1) throw EnkfError("select_tuning: need splits >= 1");
    if (grid.size() == 1) return grid[0];

    std::vector<double> risk(grid.size(), 0.0);
    std::vector<std::size_t> perm(e.n);
    for (std::size_t s = 0; s < splits; ++s) {
        RngStream sr = rng.child(s);
        for (std::size_t i = 0; i < e.n; ++i) perm[i] = i;
        for (std::size_t i = e.n; i-- > 1;) {
            const std::size_t j = sr.below(i + 1);
            std::swap(perm[i], perm[j]);
        }
        const std::size_t half = e.n / 2;
        const std::vector<std::size_t> first(perm.begin(), perm.begin() + half);
        const std::vector<std::size_t> second(perm.begin() + half, perm.end());
        const Matrix s1 = covariance_about(e, first, center);
        const Matrix s2 = covariance_about(e, second, center);
        detail::accumulate_split_risk(s1, s2, kind, mode, grid, risk);
    }

    // most-regularized-first scan order
    std::vector<std::size_t> order(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) order[i] = i;
    switch (kind) {
        case CovKind::banding:
        case CovKind::tapering:
            std::sort(order.begin(), order.end(),
                      [&](std::size_t x, std::size_t y) { return grid[x].k < grid[y].k; });
            break;
        case CovKind::mid_banding:
            std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
                const std::size_t sx = grid[x].k1 + grid[x].k2, sy = grid[y].k1 + grid[y].k2;
                if (sx != sy) return sx < sy;
                return grid[x].k1 < grid[y].k1;
            });
            break;
        case CovKind::thresholding:
            std::sort(order.begin(), order.end(),
                      [&](std::size_t x, std::size_t y) { return grid[x].s > grid[y].s; });
            break;
        case CovKind::sample:
            break;
    }
    std::size_t best = order[0];
    for (const std::size_t g : order)
        if (risk[g] < risk[best]) best = g;
    return grid[best];
}

// Clip eigenvalues below `floor` up to it. Returns the input untouched when
// no eigenvalue is below the floor, so PSD inputs pass through bit-exactly.
inline Matrix psd_repair(const Matrix& m, double floor_value) {
    if (!is_symmetric(m)) throw DimensionMismatch("psd_repair: matrix not symmetric");
    const SymEig eig = sym_eig(m);
    if (eig.values.front() >= floor_value) return m;
    const std::size_t n = m.rows;
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double lam = std::max(eig.values[k], floor_value);
        if (lam == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k) * lam;
            if (vik == 0.0) continue;
            double* oi = out.row(i);
            for (std::size_t j = 0; j < n; ++j) oi[j] += vik * eig.vectors(j, k);
        }
    }
    symmetrize(out);
    return out;
}

// Structured test-matrix classes: decay profile of truth covariances used by
// the estimator guarantees and their generators.
enum class CovClass { bandable, circular_bandable, threshold_sparse };

struct ClassSpec {
    CovClass cls = CovClass::bandable;
    std::size_t p = 0;
    double alpha = 1.0;  // decay exponent; AR base rho = 2^-alpha
    double C = 4.0;      // tail-decay constant
    double eps0 = 0.1;   // eigenvalue floor (and 1/eps0 cap where the class bounds above)
    double gamma = 0.5;  // row-sparsity exponent in [0,1)
    double c0 = 10.0;    // row-sparsity budget
    double M = 10.0;     // diagonal bound
};

namespace detail {

inline double row_tail_max(const Matrix& m, std::size_t k) {
    // max_j Σ_{|i-j|>k} |m_ij|
    const std::size_t p = m.rows;
    double worst = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const std::size_t d = (i > j) ? i - j : j - i;
            if (d > k) acc += std::abs(m(i, j));
        }
        worst = std::max(worst, acc);
    }
    return worst;
}

inline double row_midtail_max(const Matrix& m, std::size_t k1, std::size_t k2) {
    // max_j Σ_{k1<|i-j|<p-k2} |m_ij|
    const std::size_t p = m.rows;
    double worst = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const std::size_t d = (i > j) ? i - j : j - i;
            if (d > k1 && d + k2 < p) acc += std::abs(m(i, j));
        }
        worst = std::max(worst, acc);
    }
    return worst;
}

inline Matrix clip_eigenvalues(const Matrix& m, double lo, double hi) {
    const SymEig eig = sym_eig(m);
    if (eig.values.front() >= lo && eig.values.back() <= hi) return m;
    const std::size_t n = m.rows;
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double lam = std::clamp(eig.values[k], lo, hi);
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k) * lam;
            if (vik == 0.0) continue;
            double* oi = out.row(i);
            for (std::size_t j = 0; j < n; ++j) oi[j] += vik * eig.vectors(j, k);
        }
    }
    symmetrize(out);
    return out;
}

} // namespace detail

// Deterministic AR-profile constructions for the two bandable classes;
// randomized diagonally-dominant sparse construction for the threshold
// class. Every return value is re-verified against its class inequalities.
inline Matrix generate_class_member(const ClassSpec& spec, const RngStream& rng) {
    if (spec.p < 2 || spec.alpha <= 0.0 || spec.eps0 <= 0.0 || spec.gamma < 0.0 || spec.gamma >= 1.0)
        throw GenerationFailed("generate_class_member: inconsistent spec");
    const std::size_t p = spec.p;

    if (spec.cls == CovClass::bandable || spec.cls == CovClass::circular_bandable) {
        const double rho = std::pow(2.0, -spec.alpha);
        Matrix m(p, p);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < p; ++j) {
                const std::size_t d =
                    index_distance(i, j, p,
                                   spec.cls == CovClass::circular_bandable ? DistanceMode::circular
                                                                           : DistanceMode::linear);
                m(i, j) = std::pow(rho, static_cast<double>(d));
            }
        m = detail::clip_eigenvalues(m, spec.eps0, 1.0 / spec.eps0);
        // direct verification of the defining tail inequality
        if (spec.cls == CovClass::bandable) {
            for (std::size_t k = 1; k < p; ++k)
                if (detail::row_tail_max(m, k) > spec.C * std::pow(static_cast<double>(k), -spec.alpha) + 1e-9)
                    throw GenerationFailed("generate_class_member: bandable tail bound violated");
        } else {
            for (std::size_t k1 = 1; 2 * k1 <= p; ++k1)
                if (detail::row_midtail_max(m, k1, k1) >
                    spec.C * std::pow(static_cast<double>(2 * k1), -spec.alpha) + 1e-9)
                    throw GenerationFailed("generate_class_member: circular tail bound violated");
        }
        return m;
    }

    // threshold_sparse: random sparse symmetric, diagonally dominant so the
    // eigenvalue floor holds by construction; density follows the row budget.
    for (int attempt = 0; attempt < 10; ++attempt) {
        RngStream ar = rng.child(static_cast<std::uint64_t>(attempt));
        Matrix m(p, p);
        const double mag_lo = 0.05, mag_hi = 0.25;
        // Row budget in L_gamma terms: diagonal contributes ~1, each entry of
        // typical magnitude contributes mag^gamma.
        const double per_entry = std::pow(0.5 * (mag_lo + mag_hi), spec.gamma);
        const double slots = std::max(0.0, (spec.c0 - std::pow(spec.M, spec.gamma)) / per_entry);
        const std::size_t deg = std::min<std::size_t>(p - 1, static_cast<std::size_t>(slots / 2.0));
        for (std::size_t i = 0; i < p; ++i) {
            RngStream rr = ar.child(i);
            for (std::size_t t = 0; t < deg; ++t) {
                const std::size_t j = rr.below(p);
                if (j == i) continue;
                const double v = rr.uniform(mag_lo, mag_hi) * (rr.uniform() < 0.5 ? -1.0 : 1.0);
                m(i, j) = v;
                m(j, i) = v;
            }
        }
        // scale rows whose off-diagonal mass would push the diagonal past M
        const double margin = 0.05;
        for (std::size_t i = 0; i < p; ++i) {
            double rowsum = 0.0;
            for (std::size_t j = 0; j < p; ++j)
                if (j != i) rowsum += std::abs(m(i, j));
            const double cap = spec.M - spec.eps0 - margin;
            if (rowsum > cap && rowsum > 0.0) {
                const double f = cap / rowsum;
                for (std::size_t j = 0; j < p; ++j)
                    if (j != i) {
                        m(i, j) *= f;
                        m(j, i) *= f;
                    }
            }
        }
        for (std::size_t i = 0; i < p; ++i) {
            double rowsum = 0.0;
            for (std::size_t j = 0; j < p; ++j)
                if (j != i) rowsum += std::abs(m(i, j));
            m(i, i) = std::min(spec.M, spec.eps0 + margin + rowsum);
        }
        // verify class inequalities directly
        bool ok = true;
        for (std::size_t i = 0; i < p && ok; ++i) {
            if (m(i, i) > spec.M + 1e-12) ok = false;
            double budget = 0.0;
            for (std::size_t j = 0; j < p; ++j) {
                const double av = std::abs(m(i, j));
                if (av > 0.0) budget += (spec.gamma == 0.0) ? 1.0 : std::pow(av, spec.gamma);
            }
            if (budget > spec.c0 + 1e-9) ok = false;
        }
        if (ok) {
            const SymEig eig = sym_eig(m);
            if (eig.values.front() < spec.eps0 - 1e-12) ok = false;
        }
        if (ok) return m;
    }
    throw GenerationFailed("generate_class_member: threshold_sparse failed after 10 attempts");
}

} // namespace enkf
