#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <utility>

#include "enkf/errors.hpp"
#include "enkf/matrix.hpp"
#include "enkf/rng.hpp"

namespace enkf {

// One assimilation window of dynamics. `advance` must be pure given (state,
// time index): any internal noise is derived from child streams indexed by
// the time index, never from mutable generator state.
struct ModelOperator {
    std::size_t state_dim = 0;
    std::function<Vector(const Vector&, std::size_t)> advance;
    std::string descriptor;
};

inline void l96_rhs_into(const Vector& x, double forcing, Vector& out) {
    const std::size_t p = x.size();
    if (p < 4) throw DimensionTooSmall("l96_rhs: need dimension >= 4");
    out.resize(p);
    for (std::size_t j = 0; j < p; ++j) {
        const std::size_t jp1 = (j + 1 == p) ? 0 : j + 1;
        const std::size_t jm1 = (j == 0) ? p - 1 : j - 1;
        const std::size_t jm2 = (j < 2) ? p + j - 2 : j - 2;
        out[j] = (x[jp1] - x[jm2]) * x[jm1] - x[j] + forcing;
    }
}

inline Vector l96_rhs(const Vector& x, double forcing) {
    Vector out;
    l96_rhs_into(x, forcing, out);
    return out;
}

namespace detail {

// In-place RK4 core shared by the public step and the model operators, so
// composing public steps reproduces an operator window bit-exactly.
template <typename RhsInto>
inline void rk4_step_into(RhsInto&& rhs, Vector& x, double t, double h, Vector& k1, Vector& k2,
                          Vector& k3, Vector& k4, Vector& xt) {
    const std::size_t p = x.size();
    rhs(x, t, k1);
    xt.resize(p);
    for (std::size_t i = 0; i < p; ++i) xt[i] = x[i] + 0.5 * h * k1[i];
    rhs(xt, t + 0.5 * h, k2);
    for (std::size_t i = 0; i < p; ++i) xt[i] = x[i] + 0.5 * h * k2[i];
    rhs(xt, t + 0.5 * h, k3);
    for (std::size_t i = 0; i < p; ++i) xt[i] = x[i] + h * k3[i];
    rhs(xt, t + h, k4);
    for (std::size_t i = 0; i < p; ++i)
        x[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

} // namespace detail

template <typename Rhs>
inline Vector rk4_step(Rhs&& rhs, const Vector& x, double t, double h_step) {
    if (h_step <= 0.0) throw EnkfError("rk4_step: need h_step > 0");
    Vector out = x, k1, k2, k3, k4, xt;
    auto into = [&rhs](const Vector& xx, double tt, Vector& o) { o = rhs(xx, tt); };
    detail::rk4_step_into(into, out, t, h_step, k1, k2, k3, k4, xt);
    if (!is_finite(out)) throw NonFiniteState("rk4_step: non-finite result");
    return out;
}

struct L96Params {
    std::size_t p = 40;
    double F = 8.0;
    double dt = 0.05;
    std::size_t steps_per_window = 4;
    double sigma0 = 0.0;  // model-noise scale: each noise draw is N(0, sigma0*I)
};

// Deterministic window operator, or, when (step_noise, rng) are supplied, the
// truth recipe that adds a step_noise draw after every RK4 step. Ensemble
// propagation adds its single per-window draw in the forecast step instead.
inline ModelOperator make_l96_operator(const L96Params& params,
                                       const SpdFactor* step_noise = nullptr,
                                       const RngStream* rng = nullptr) {
    if (params.p < 4) throw DimensionTooSmall("make_l96_operator: need p >= 4");
    if (params.dt <= 0.0 || params.steps_per_window < 1)
        throw EnkfError("make_l96_operator: need dt > 0 and steps_per_window >= 1");
    if ((step_noise == nullptr) != (rng == nullptr))
        throw EnkfError("make_l96_operator: step noise needs both factor and rng");
    if (step_noise && step_noise->dimension() != params.p)
        throw DimensionMismatch("make_l96_operator: noise factor dimension mismatch");

    ModelOperator op;
    op.state_dim = params.p;
    op.descriptor = "l96 p=" + std::to_string(params.p) + " F=" + std::to_string(params.F) +
                    " dt=" + std::to_string(params.dt) +
                    " spw=" + std::to_string(params.steps_per_window) +
                    (step_noise ? " noisy" : "");
    const bool noisy = step_noise != nullptr;
    const SpdFactor noise_factor = noisy ? *step_noise : SpdFactor();
    const RngStream noise_rng = noisy ? *rng : RngStream(0, 0);
    op.advance = [params, noisy, noise_factor, noise_rng](const Vector& x,
                                                          std::size_t time_index) -> Vector {
        if (x.size() != params.p)
            throw DimensionMismatch("l96 advance: state dimension mismatch");
        static thread_local Vector k1, k2, k3, k4, xt, z;
        Vector out = x;
        auto rhs = [&params](const Vector& xx, double, Vector& o) {
            l96_rhs_into(xx, params.F, o);
        };
        for (std::size_t s = 0; s < params.steps_per_window; ++s) {
            detail::rk4_step_into(rhs, out, 0.0, params.dt, k1, k2, k3, k4, xt);
            if (noisy) {
                RngStream nr = noise_rng.child(time_index).child(s);
                z.resize(params.p);
                for (std::size_t i = 0; i < params.p; ++i) z[i] = nr.normal();
                const Vector w = noise_factor.apply_lower(z);
                for (std::size_t i = 0; i < params.p; ++i) out[i] += w[i];
            }
            if (!is_finite(out)) throw NonFiniteState("l96 advance: non-finite state");
        }
        return out;
    };
    return op;
}

inline ModelOperator make_linear_operator(Matrix m) {
    if (m.rows != m.cols) throw DimensionMismatch("make_linear_operator: need square matrix");
    ModelOperator op;
    op.state_dim = m.rows;
    op.descriptor = "linear p=" + std::to_string(m.rows);
    op.advance = [m = std::move(m)](const Vector& x, std::size_t) -> Vector {
        if (x.size() != m.rows) throw DimensionMismatch("linear advance: dimension mismatch");
        Vector out = matvec(m, x);
        if (!is_finite(out)) throw NonFiniteState("linear advance: non-finite state");
        return out;
    };
    return op;
}

struct SweParams {
    std::size_t nx = 50;
    std::size_t ny = 31;
    double dx = 1.0e4;  // m
    double dy = 1.0e4;  // m
    double dt = 30.0;   // s
    double g = 9.8;
    double f_cor = 1.0e-4;
    double k_diff = 5.0e4;  // m^2 s^-1
    double L = 5.0e5;       // zonal period, = nx*dx
    double D = 3.0e5;       // wall-to-wall extent, = (ny-1)*dy
    double H0 = 50.0;
    double H1 = 5.5;
    double H2 = 3.325;
};

inline SweParams make_swe_params(std::size_t nx, std::size_t ny) {
    SweParams p;
    p.nx = nx;
    p.ny = ny;
    p.L = static_cast<double>(nx) * p.dx;
    p.D = static_cast<double>(ny - 1) * p.dy;
    return p;
}

// Fields are ny×nx: row = z2 (wall-to-wall), column = z1 (periodic).
struct SweState {
    std::size_t nx = 0;
    std::size_t ny = 0;
    Matrix u, v, h;
};

// Zonal jet in geostrophic balance: the height profile sets u through
// -(g/f) dh/dz2 and v through (g/f) dh/dz1 (centered differences, one-sided
// at the walls); wall v forced to 0 to meet the boundary condition exactly.
inline SweState swe_init(const SweParams& pr) {
    if (pr.nx < 4 || pr.ny < 4) throw DimensionTooSmall("swe_init: need nx, ny >= 4");
    SweState s;
    s.nx = pr.nx;
    s.ny = pr.ny;
    s.u = Matrix(pr.ny, pr.nx);
    s.v = Matrix(pr.ny, pr.nx);
    s.h = Matrix(pr.ny, pr.nx);
    for (std::size_t iy = 0; iy < pr.ny; ++iy) {
        const double z2 = static_cast<double>(iy) * pr.dy;
        const double a1 = 9.0 * (0.5 * pr.D - z2) / (2.0 * pr.D);
        const double a2 = 9.0 * (0.5 * pr.D - z2) / pr.D;
        const double sech = 1.0 / std::cosh(a2);
        for (std::size_t ix = 0; ix < pr.nx; ++ix) {
            const double z1 = static_cast<double>(ix) * pr.dx;
            s.h(iy, ix) = pr.H0 + pr.H1 * std::tanh(a1) +
                          pr.H2 * sech * sech * std::sin(2.0 * std::numbers::pi * z1 / pr.L);
        }
    }
    const double gf = pr.g / pr.f_cor;
    for (std::size_t iy = 0; iy < pr.ny; ++iy)
        for (std::size_t ix = 0; ix < pr.nx; ++ix) {
            double dhdy;
            if (iy == 0)
                dhdy = (s.h(1, ix) - s.h(0, ix)) / pr.dy;
            else if (iy == pr.ny - 1)
                dhdy = (s.h(pr.ny - 1, ix) - s.h(pr.ny - 2, ix)) / pr.dy;
            else
                dhdy = (s.h(iy + 1, ix) - s.h(iy - 1, ix)) / (2.0 * pr.dy);
            const std::size_t ixp = (ix + 1 == pr.nx) ? 0 : ix + 1;
            const std::size_t ixm = (ix == 0) ? pr.nx - 1 : ix - 1;
            const double dhdx = (s.h(iy, ixp) - s.h(iy, ixm)) / (2.0 * pr.dx);
            s.u(iy, ix) = -gf * dhdy;
            s.v(iy, ix) = gf * dhdx;
        }
    for (std::size_t ix = 0; ix < pr.nx; ++ix) {
        s.v(0, ix) = 0.0;
        s.v(pr.ny - 1, ix) = 0.0;
    }
    return s;
}

// Richtmyer two-step Lax-Wendroff: provisional half-step values at cell
// corners carry advection and pressure gradient only; the full step adds
// Coriolis and diffusion evaluated on the old field. u, v advective form,
// h in flux form. Periodic in z1; free-slip walls in z2 (v = 0, u and h
// copied from the neighboring interior row).
inline SweState swe_step(const SweState& st, const SweParams& pr) {
    const std::size_t nx = pr.nx, ny = pr.ny;
    if (st.nx != nx || st.ny != ny) throw DimensionMismatch("swe_step: state/params mismatch");

    double hmax = 0.0, vmax = 0.0;
    for (std::size_t iy = 0; iy < ny; ++iy)
        for (std::size_t ix = 0; ix < nx; ++ix) {
            const double hh = st.h(iy, ix);
            if (!std::isfinite(hh) || hh <= 0.0 || !std::isfinite(st.u(iy, ix)) ||
                !std::isfinite(st.v(iy, ix)))
                throw NonFiniteState("swe_step: non-finite or non-positive field");
            hmax = std::max(hmax, hh);
            vmax = std::max({vmax, std::abs(st.u(iy, ix)), std::abs(st.v(iy, ix))});
        }
    if (pr.dt * (std::sqrt(pr.g * hmax) + vmax) / std::min(pr.dx, pr.dy) >= 1.0)
        throw CflViolation("swe_step: CFL condition violated");

    const double hdt = 0.5 * pr.dt;
    // corner (cy+1/2, cx+1/2) provisional values, (ny-1)×nx
    Matrix uc(ny - 1, nx), vc(ny - 1, nx), hc(ny - 1, nx);
    for (std::size_t cy = 0; cy + 1 < ny; ++cy)
        for (std::size_t cx = 0; cx < nx; ++cx) {
            const std::size_t xp = (cx + 1 == nx) ? 0 : cx + 1;
            const double ua = st.u(cy, cx), ub = st.u(cy, xp), ucl = st.u(cy + 1, cx),
                         ud = st.u(cy + 1, xp);
            const double va = st.v(cy, cx), vb = st.v(cy, xp), vcl = st.v(cy + 1, cx),
                         vd = st.v(cy + 1, xp);
            const double ha = st.h(cy, cx), hb = st.h(cy, xp), hcl = st.h(cy + 1, cx),
                         hd = st.h(cy + 1, xp);
            const double um = 0.25 * (ua + ub + ucl + ud);
            const double vm = 0.25 * (va + vb + vcl + vd);
            const double dudx = ((ub + ud) - (ua + ucl)) / (2.0 * pr.dx);
            const double dudy = ((ucl + ud) - (ua + ub)) / (2.0 * pr.dy);
            const double dvdx = ((vb + vd) - (va + vcl)) / (2.0 * pr.dx);
            const double dvdy = ((vcl + vd) - (va + vb)) / (2.0 * pr.dy);
            const double dhdx = ((hb + hd) - (ha + hcl)) / (2.0 * pr.dx);
            const double dhdy = ((hcl + hd) - (ha + hb)) / (2.0 * pr.dy);
            const double dhudx = ((hb * ub + hd * ud) - (ha * ua + hcl * ucl)) / (2.0 * pr.dx);
            const double dhvdy = ((hcl * vcl + hd * vd) - (ha * va + hb * vb)) / (2.0 * pr.dy);
            uc(cy, cx) = um - hdt * (um * dudx + vm * dudy + pr.g * dhdx);
            vc(cy, cx) = vm - hdt * (um * dvdx + vm * dvdy + pr.g * dhdy);
            hc(cy, cx) = 0.25 * (ha + hb + hcl + hd) - hdt * (dhudx + dhvdy);
        }

    SweState out;
    out.nx = nx;
    out.ny = ny;
    out.u = st.u;
    out.v = st.v;
    out.h = st.h;
    for (std::size_t iy = 1; iy + 1 < ny; ++iy)
        for (std::size_t ix = 0; ix < nx; ++ix) {
            const std::size_t xm = (ix == 0) ? nx - 1 : ix - 1;
            const std::size_t xp = (ix + 1 == nx) ? 0 : ix + 1;
            // corners around (iy, ix): A=(iy-1,xm) B=(iy-1,ix) C=(iy,xm) D=(iy,ix)
            const double uA = uc(iy - 1, xm), uB = uc(iy - 1, ix), uC = uc(iy, xm), uD = uc(iy, ix);
            const double vA = vc(iy - 1, xm), vB = vc(iy - 1, ix), vC = vc(iy, xm), vD = vc(iy, ix);
            const double hA = hc(iy - 1, xm), hB = hc(iy - 1, ix), hC = hc(iy, xm), hD = hc(iy, ix);
            const double um = 0.25 * (uA + uB + uC + uD);
            const double vm = 0.25 * (vA + vB + vC + vD);
            const double dudx = ((uB + uD) - (uA + uC)) / (2.0 * pr.dx);
            const double dudy = ((uC + uD) - (uA + uB)) / (2.0 * pr.dy);
            const double dvdx = ((vB + vD) - (vA + vC)) / (2.0 * pr.dx);
            const double dvdy = ((vC + vD) - (vA + vB)) / (2.0 * pr.dy);
            const double dhdx = ((hB + hD) - (hA + hC)) / (2.0 * pr.dx);
            const double dhdy = ((hC + hD) - (hA + hB)) / (2.0 * pr.dy);
            const double dhudx = ((hB * uB + hD * uD) - (hA * uA + hC * uC)) / (2.0 * pr.dx);
            const double dhvdy = ((hC * vC + hD * vD) - (hA * vA + hB * vB)) / (2.0 * pr.dy);
            const double lap_u = (st.u(iy, xp) - 2.0 * st.u(iy, ix) + st.u(iy, xm)) / (pr.dx * pr.dx) +
                                 (st.u(iy + 1, ix) - 2.0 * st.u(iy, ix) + st.u(iy - 1, ix)) / (pr.dy * pr.dy);
            const double lap_v = (st.v(iy, xp) - 2.0 * st.v(iy, ix) + st.v(iy, xm)) / (pr.dx * pr.dx) +
                                 (st.v(iy + 1, ix) - 2.0 * st.v(iy, ix) + st.v(iy - 1, ix)) / (pr.dy * pr.dy);
            const double lap_h = (st.h(iy, xp) - 2.0 * st.h(iy, ix) + st.h(iy, xm)) / (pr.dx * pr.dx) +
                                 (st.h(iy + 1, ix) - 2.0 * st.h(iy, ix) + st.h(iy - 1, ix)) / (pr.dy * pr.dy);
            out.u(iy, ix) = st.u(iy, ix) -
                            pr.dt * (um * dudx + vm * dudy + pr.g * dhdx) +
                            pr.dt * (pr.f_cor * st.v(iy, ix) + pr.k_diff * lap_u);
            out.v(iy, ix) = st.v(iy, ix) -
                            pr.dt * (um * dvdx + vm * dvdy + pr.g * dhdy) +
                            pr.dt * (-pr.f_cor * st.u(iy, ix) + pr.k_diff * lap_v);
            out.h(iy, ix) = st.h(iy, ix) - pr.dt * (dhudx + dhvdy) + pr.dt * pr.k_diff * lap_h;
        }
    for (std::size_t ix = 0; ix < nx; ++ix) {
        out.u(0, ix) = out.u(1, ix);
        out.u(ny - 1, ix) = out.u(ny - 2, ix);
        out.h(0, ix) = out.h(1, ix);
        out.h(ny - 1, ix) = out.h(ny - 2, ix);
        out.v(0, ix) = 0.0;
        out.v(ny - 1, ix) = 0.0;
    }
    return out;
}

// Flat layout: u block, v block, h block, each row-major ny×nx.
inline Vector swe_flatten(const SweState& s) {
    const std::size_t cells = s.nx * s.ny;
    Vector x(3 * cells);
    std::copy(s.u.a.begin(), s.u.a.end(), x.begin());
    std::copy(s.v.a.begin(), s.v.a.end(), x.begin() + cells);
    std::copy(s.h.a.begin(), s.h.a.end(), x.begin() + 2 * cells);
    return x;
}

inline SweState swe_unflatten(const Vector& x, const SweParams& pr) {
    const std::size_t cells = pr.nx * pr.ny;
    if (x.size() != 3 * cells) throw DimensionMismatch("swe_unflatten: length mismatch");
    SweState s;
    s.nx = pr.nx;
    s.ny = pr.ny;
    s.u = Matrix(pr.ny, pr.nx);
    s.v = Matrix(pr.ny, pr.nx);
    s.h = Matrix(pr.ny, pr.nx);
    std::copy(x.begin(), x.begin() + cells, s.u.a.begin());
    std::copy(x.begin() + cells, x.begin() + 2 * cells, s.v.a.begin());
    std::copy(x.begin() + 2 * cells, x.end(), s.h.a.begin());
    return s;
}

inline ModelOperator make_swe_operator(const SweParams& params, std::size_t steps_per_window) {
    if (steps_per_window < 1) throw EnkfError("make_swe_operator: need steps_per_window >= 1");
    ModelOperator op;
    op.state_dim = 3 * params.nx * params.ny;
    op.descriptor = "swe " + std::to_string(params.nx) + "x" + std::to_string(params.ny) +
                    " k=" + std::to_string(params.k_diff) +
                    " spw=" + std::to_string(steps_per_window);
    op.advance = [params, steps_per_window](const Vector& x, std::size_t window) -> Vector {
        SweState s = swe_unflatten(x, params);
        for (std::size_t t = 0; t < steps_per_window; ++t) {
            try {
                s = swe_step(s, params);
            } catch (const CflViolation& e) {
                throw CflViolation(std::string(e.what()) + " (window " + std::to_string(window) +
                                   ", step " + std::to_string(t + 1) + ")");
            }
        }
        return swe_flatten(s);
    };
    return op;
}

} // namespace enkf
