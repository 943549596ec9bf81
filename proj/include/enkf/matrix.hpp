#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "enkf/errors.hpp"

namespace enkf {

using Vector = std::vector<double>;

// Dense row-major matrix. State dimensions stay below ~5000 in every
// supported experiment, so dense storage everywhere is deliberate.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    double* row(std::size_t i) { return a.data() + i * cols; }
    const double* row(std::size_t i) const { return a.data() + i * cols; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline bool is_finite(const Vector& v) {
    for (const double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool is_finite(const Matrix& m) {
    for (const double x : m.a)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool is_symmetric(const Matrix& m, double tol = 1e-10) {
    if (m.rows != m.cols) return false;
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j)
            if (std::abs(m(i, j) - m(j, i)) > tol) return false;
    return true;
}

inline void symmetrize(Matrix& m) {
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j) {
            const double v = 0.5 * (m(i, j) + m(j, i));
            m(i, j) = v;
            m(j, i) = v;
        }
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix matmul(const Matrix& x, const Matrix& y) {
    if (x.cols != y.rows) throw DimensionMismatch("matmul: inner dimensions differ");
    Matrix z(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double* zi = z.row(i);
        const double* xi = x.row(i);
        for (std::size_t k = 0; k < x.cols; ++k) {
            const double xv = xi[k];
            if (xv == 0.0) continue;
            const double* yk = y.row(k);
            for (std::size_t j = 0; j < y.cols; ++j) zi[j] += xv * yk[j];
        }
    }
    return z;
}

inline Vector matvec(const Matrix& m, const Vector& v) {
    if (m.cols != v.size()) throw DimensionMismatch("matvec: dimensions differ");
    Vector r(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* mi = m.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += mi[j] * v[j];
        r[i] = acc;
    }
    return r;
}

inline double dot(const Vector& x, const Vector& y) {
    if (x.size() != y.size()) throw DimensionMismatch("dot: lengths differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
    return acc;
}

inline double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

inline double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (const double x : m.a) acc += x * x;
    return std::sqrt(acc);
}

inline void axpy(double alpha, const Vector& x, Vector& y) {
    if (x.size() != y.size()) throw DimensionMismatch("axpy: lengths differ");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector sub(const Vector& x, const Vector& y) {
    if (x.size() != y.size()) throw DimensionMismatch("sub: lengths differ");
    Vector r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] - y[i];
    return r;
}

inline Matrix sub(const Matrix& x, const Matrix& y) {
    if (!x.same_shape(y)) throw DimensionMismatch("sub: shapes differ");
    Matrix r(x.rows, x.cols);
    for (std::size_t i = 0; i < x.a.size(); ++i) r.a[i] = x.a[i] - y.a[i];
    return r;
}

// Cholesky factor of an SPD matrix, A = L·Lᵀ. Failure means a degenerate
// covariance reached the solver, which callers treat as a signal, not a bug.
class SpdFactor {
public:
    SpdFactor() = default;
    explicit SpdFactor(Matrix lower) : l_(std::move(lower)) {
        diag_ = true;
        for (std::size_t i = 0; i < l_.rows && diag_; ++i) {
            const double* li = l_.row(i);
            for (std::size_t j = 0; j < i; ++j)
                if (li[j] != 0.0) {
                    diag_ = false;
                    break;
                }
        }
    }

    std::size_t dimension() const { return l_.rows; }
    const Matrix& lower() const { return l_; }

    // log det(A) = 2·Σ log L_ii
    double log_det() const {
        double acc = 0.0;
        for (std::size_t i = 0; i < l_.rows; ++i) acc += std::log(l_(i, i));
        return 2.0 * acc;
    }

    // x := L⁻¹ b (forward), then Lᵀ⁻¹ (backward): solves A x = b.
    Vector solve(const Vector& b) const {
        const std::size_t n = dimension();
        if (b.size() != n) throw DimensionMismatch("SpdFactor::solve: rhs length");
        Vector x(b);
        if (diag_) {
            for (std::size_t i = 0; i < n; ++i) x[i] /= l_(i, i) * l_(i, i);
            return x;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* li = l_.row(i);
            double acc = x[i];
            for (std::size_t j = 0; j < i; ++j) acc -= li[j] * x[j];
            x[i] = acc / li[i];
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double acc = x[ii];
            for (std::size_t j = ii + 1; j < n; ++j) acc -= l_(j, ii) * x[j];
            x[ii] = acc / l_(ii, ii);
        }
        return x;
    }

    // y = L z; draws with covariance A when z is standard normal.
    Vector apply_lower(const Vector& z) const {
        const std::size_t n = dimension();
        if (z.size() != n) throw DimensionMismatch("SpdFactor::apply_lower: length");
        Vector y(n, 0.0);
        if (diag_) {
            for (std::size_t i = 0; i < n; ++i) y[i] = l_(i, i) * z[i];
            return y;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* li = l_.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j <= i; ++j) acc += li[j] * z[j];
            y[i] = acc;
        }
        return y;
    }

private:
    Matrix l_;
    bool diag_ = false;
};

// Factor of a diagonal covariance straight from its standard deviations.
inline SpdFactor diagonal_spd_factor(const Vector& std_devs) {
    const std::size_t n = std_devs.size();
    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(std_devs[i] > 0.0)) throw NotPositiveDefinite("diagonal_spd_factor: std <= 0");
        l(i, i) = std_devs[i];
    }
    return SpdFactor(std::move(l));
}

// Pivot tolerance 1e-12: below double-precision meaningfulness for O(1)
// covariances. Symmetry is the caller's contract, checked at 1e-10.
inline SpdFactor cholesky(const Matrix& a, double pivot_tol = 1e-12) {
    if (a.rows != a.cols) throw DimensionMismatch("cholesky: matrix not square");
    if (!is_symmetric(a)) throw NotPositiveDefinite("cholesky: matrix not symmetric");
    const std::size_t n = a.rows;
    bool diagonal = true;
    for (std::size_t i = 0; i < n && diagonal; ++i) {
        const double* ai = a.row(i);
        for (std::size_t j = 0; j < i; ++j)
            if (ai[j] != 0.0) {
                diagonal = false;
                break;
            }
    }
    if (diagonal) {
        Matrix l(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = a(i, i);
            if (!(d > pivot_tol)) throw NotPositiveDefinite("cholesky: pivot <= tolerance");
            l(i, i) = std::sqrt(d);
        }
        return SpdFactor(std::move(l));
    }
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        const double* lj = l.row(j);
        for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
        if (!(d > pivot_tol)) throw NotPositiveDefinite("cholesky: pivot <= tolerance");
        const double s = std::sqrt(d);
        l(j, j) = s;
        for (std::size_t i = j + 1; i < n; ++i) {
            double acc = a(i, j);
            const double* li = l.row(i);
            for (std::size_t k = 0; k < j; ++k) acc -= li[k] * lj[k];
            l(i, j) = acc / s;
        }
    }
    return SpdFactor(std::move(l));
}

// Solves A X = B column by column through the factor.
inline Matrix solve_spd(const SpdFactor& factor, const Matrix& b) {
    if (factor.dimension() != b.rows) throw DimensionMismatch("solve_spd: rhs rows");
    Matrix x(b.rows, b.cols);
    Vector col(b.rows);
    for (std::size_t j = 0; j < b.cols; ++j) {
        for (std::size_t i = 0; i < b.rows; ++i) col[i] = b(i, j);
        const Vector sol = factor.solve(col);
        for (std::size_t i = 0; i < b.rows; ++i) x(i, j) = sol[i];
    }
    return x;
}

inline Vector solve_spd(const SpdFactor& factor, const Vector& b) { return factor.solve(b); }

// Symmetric eigendecomposition: Householder tridiagonalization followed by
// implicit-shift QL (the classic tred2/tql2 pair). Eigenvalues ascending,
// eigenvectors in columns. O(n³); used for PSD repair, class generators and
// spectral norms, never on the assimilation hot path.
struct SymEig {
    Vector values;   // ascending
    Matrix vectors;  // column j pairs with values[j]
};

inline SymEig sym_eig(const Matrix& a_in) {
    if (a_in.rows != a_in.cols) throw DimensionMismatch("sym_eig: matrix not square");
    const std::size_t n = a_in.rows;
    Matrix z = a_in;
    symmetrize(z);
    Vector d(n, 0.0), e(n, 0.0);

    // tred2: reduce to tridiagonal, accumulating transformations in z.
    for (std::size_t i = n; i-- > 1;) {
        const std::size_t l = i - 1;
        double h = 0.0, scale = 0.0;
        if (l > 0) {
            for (std::size_t k = 0; k <= l; ++k) scale += std::abs(z(i, k));
            if (scale == 0.0) {
                e[i] = z(i, l);
            } else {
                for (std::size_t k = 0; k <= l; ++k) {
                    z(i, k) /= scale;
                    h += z(i, k) * z(i, k);
                }
                double f = z(i, l);
                double g = (f >= 0.0) ? -std::sqrt(h) : std::sqrt(h);
                e[i] = scale * g;
                h -= f * g;
                z(i, l) = f - g;
                f = 0.0;
                for (std::size_t j = 0; j <= l; ++j) {
                    z(j, i) = z(i, j) / h;
                    g = 0.0;
                    for (std::size_t k = 0; k <= j; ++k) g += z(j, k) * z(i, k);
                    for (std::size_t k = j + 1; k <= l; ++k) g += z(k, j) * z(i, k);
                    e[j] = g / h;
                    f += e[j] * z(i, j);
                }
                const double hh = f / (h + h);
                for (std::size_t j = 0; j <= l; ++j) {
                    f = z(i, j);
                    e[j] = g = e[j] - hh * f;
                    for (std::size_t k = 0; k <= j; ++k) z(j, k) -= f * e[k] + g * z(i, k);
                }
            }
        } else {
            e[i] = z(i, l);
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (d[i] != 0.0) {
            for (std::size_t j = 0; j < i; ++j) {
                double g = 0.0;
                for (std::size_t k = 0; k < i; ++k) g += z(i, k) * z(k, j);
                for (std::size_t k = 0; k < i; ++k) z(k, j) -= g * z(k, i);
            }
        }
        d[i] = z(i, i);
        z(i, i) = 1.0;
        for (std::size_t j = 0; j < i; ++j) {
            z(j, i) = 0.0;
            z(i, j) = 0.0;
        }
    }

    // tql2: implicit-shift QL on the tridiagonal, rotations applied to z.
    for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
    e[n - 1] = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        int iter = 0;
        std::size_t m;
        do {
            for (m = l; m + 1 < n; ++m) {
                const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
                if (std::abs(e[m]) <= 1e-300 + 2.3e-16 * dd) break;
            }
            if (m != l) {
                if (++iter == 60) throw EnkfError("sym_eig: QL failed to converge");
                double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
                double r = std::hypot(g, 1.0);
                g = d[m] - d[l] + e[l] / (g + (g >= 0.0 ? std::abs(r) : -std::abs(r)));
                double s = 1.0, c = 1.0, p = 0.0;
                bool underflow = false;
                for (std::size_t ii = m; ii-- > l;) {
                    double f = s * e[ii];
                    const double b = c * e[ii];
                    r = std::hypot(f, g);
                    e[ii + 1] = r;
                    if (r == 0.0) {
                        d[ii + 1] -= p;
                        e[m] = 0.0;
                        underflow = true;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[ii + 1] - p;
                    r = (d[ii] - g) * s + 2.0 * c * b;
                    p = s * r;
                    d[ii + 1] = g + p;
                    g = c * r - b;
                    for (std::size_t k = 0; k < n; ++k) {
                        f = z(k, ii + 1);
                        z(k, ii + 1) = s * z(k, ii) + c * f;
                        z(k, ii) = c * z(k, ii) - s * f;
                    }
                }
                if (underflow) continue;
                d[l] -= p;
                e[l] = g;
                e[m] = 0.0;
            }
        } while (m != l);
    }

    // Sort ascending, carrying eigenvector columns along.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return d[x] < d[y]; });
    SymEig out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = d[order[j]];
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = z(i, order[j]);
    }
    return out;
}

// Spectral norm of a symmetric matrix: max |eigenvalue|.
inline double spectral_norm_sym(const Matrix& m) {
    const SymEig eig = sym_eig(m);
    return std::max(std::abs(eig.values.front()), std::abs(eig.values.back()));
}

} // namespace enkf
