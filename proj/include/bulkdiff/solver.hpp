#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "bulkdiff/conductance.hpp"
#include "bulkdiff/grid.hpp"
#include "bulkdiff/rng.hpp"

namespace bulkdiff {

struct SolverError : std::runtime_error {
    double residual = 0;
    int iters = 0;
    SolverError(const std::string& msg, double res, int it)
        : std::runtime_error(msg + " (residual " + format_double(res) + " after " +
                             std::to_string(it) + " iterations)"),
          residual(res),
          iters(it) {}
};

struct SolverOptions {
    double tol = 1e-10;
    size_t max_unknowns = 4'000'000;
    double iter_cap_factor = 50.0;  // iteration cap = factor * sqrt(unknowns)
};

namespace detail {

/// Central differences inside, one-sided at the faces: the natural (no-flux)
/// boundary realization of the H^1(U^n) maximization.
inline double node_gradient(const std::vector<double>& u, size_t flat, int k, int P, size_t s,
                            double h) {
    if (k == 0) return (u[flat + s] - u[flat]) / h;
    if (k == P - 1) return (u[flat] - u[flat - s]) / h;
    return (u[flat + s] - u[flat - s]) / (2.0 * h);
}

inline void scatter_adjoint(std::vector<double>& out, double v, size_t flat, int k, int P, size_t s,
                            double h) {
    if (k == 0) {
        out[flat + s] += v / h;
        out[flat] -= v / h;
    } else if (k == P - 1) {
        out[flat] += v / h;
        out[flat - s] -= v / h;
    } else {
        out[flat + s] += v / (2.0 * h);
        out[flat - s] -= v / (2.0 * h);
    }
}

inline void project_mean(std::vector<double>& v) {
    if (v.empty()) return;
    double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x -= m;
}

inline double dot_v(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

/// Assembled quadratic maximization problem for one (field, grid, exterior):
/// raw J(u) = sum_nodes w sum_i [ -1/2 D_i u . a_i D_i u + q . D_i u ], w = 1/P^{dn}.
class DualOperator {
public:
    DualOperator(const ConductanceField& field, const GridSpec& grid, const Vec& q,
                 const PointConfiguration& exterior)
        : g_(grid), q_(q) {
        d_ = g_.dim();
        np_ = g_.n;
        P_ = g_.points;
        N_ = g_.total();
        h_ = g_.h();
        w_ = 1.0 / static_cast<double>(N_);
        stride_ = g_.strides();
        sdim_ = d_ * (d_ + 1) / 2;
        cond_.resize(N_ * static_cast<size_t>(np_) * static_cast<size_t>(sdim_));
        diag_.assign(N_, 0.0);
        b_.assign(N_, 0.0);
        assemble(field, exterior);
    }

    size_t size() const { return N_; }
    const std::vector<double>& rhs() const { return b_; }
    const std::vector<double>& jacobi_diag() const { return diag_; }

    void apply(const std::vector<double>& u, std::vector<double>& out) const {
        std::fill(out.begin(), out.end(), 0.0);
        GridIter it(g_);
        std::array<double, kMaxDim> grad{}, flux{};
        while (!it.done) {
            const size_t flat = it.flat;
            for (int i = 0; i < np_; ++i) {
                for (int c = 0; c < d_; ++c) {
                    int axis = i * d_ + c;
                    grad[static_cast<size_t>(c)] = detail::node_gradient(
                        u, flat, it.idx[static_cast<size_t>(axis)], P_, stride_[static_cast<size_t>(axis)], h_);
                }
                mat_vec(flat, i, grad, flux);
                for (int c = 0; c < d_; ++c) {
                    int axis = i * d_ + c;
                    detail::scatter_adjoint(out, w_ * flux[static_cast<size_t>(c)], flat,
                                            it.idx[static_cast<size_t>(axis)], P_,
                                            stride_[static_cast<size_t>(axis)], h_);
                }
            }
            it.next();
        }
    }

    /// Raw functional J(u) = -1/2 u.Au + b.u evaluated directly from stencils.
    double functional(const std::vector<double>& u) const {
        double j = 0;
        GridIter it(g_);
        std::array<double, kMaxDim> grad{}, flux{};
        while (!it.done) {
            const size_t flat = it.flat;
            for (int i = 0; i < np_; ++i) {
                for (int c = 0; c < d_; ++c) {
                    int axis = i * d_ + c;
                    grad[static_cast<size_t>(c)] = detail::node_gradient(
                        u, flat, it.idx[static_cast<size_t>(axis)], P_, stride_[static_cast<size_t>(axis)], h_);
                }
                mat_vec(flat, i, grad, flux);
                for (int c = 0; c < d_; ++c)
                    j += w_ * (-0.5 * grad[static_cast<size_t>(c)] * flux[static_cast<size_t>(c)] +
                               q_[c] * grad[static_cast<size_t>(c)]);
            }
            it.next();
        }
        return j;
    }

private:
    GridSpec g_;
    Vec q_;
    int d_ = 1, np_ = 0, P_ = 2, sdim_ = 1;
    size_t N_ = 0;
    double h_ = 1, w_ = 1;
    std::vector<size_t> stride_;
    std::vector<double> cond_;
    std::vector<double> diag_;
    std::vector<double> b_;

    void mat_vec(size_t flat, int i, const std::array<double, kMaxDim>& g,
                 std::array<double, kMaxDim>& f) const {
        const double* a = &cond_[(flat * static_cast<size_t>(np_) + static_cast<size_t>(i)) *
                                 static_cast<size_t>(sdim_)];
        if (d_ == 1) {
            f[0] = a[0] * g[0];
        } else {  // [a00, a11, a01]
            f[0] = a[0] * g[0] + a[2] * g[1];
            f[1] = a[2] * g[0] + a[1] * g[1];
        }
    }

    void assemble(const ConductanceField& field, const PointConfiguration& exterior) {
        PointConfiguration ext = restrict_collar(exterior, g_.box, field.locality_radius);
        PointConfiguration centered(d_);
        GridIter it(g_);
        while (!it.done) {
            const size_t flat = it.flat;
            for (int i = 0; i < np_; ++i) {
                centered.coords.clear();
                Vec yi(d_);
                for (int c = 0; c < d_; ++c)
                    yi[c] = g_.node_coord(i * d_ + c, it.idx[static_cast<size_t>(i * d_ + c)]);
                centered.push(Vec(d_));  // the particle itself, at the origin
                for (int j = 0; j < np_; ++j) {
                    if (j == i) continue;
                    Vec yj(d_);
                    for (int c = 0; c < d_; ++c)
                        yj[c] = g_.node_coord(j * d_ + c, it.idx[static_cast<size_t>(j * d_ + c)]) - yi[c];
                    centered.push(yj);
                }
                for (size_t e = 0; e < ext.count(); ++e) centered.push(ext.point(e) - yi);
                SymMatrix a = field.eval_origin_raw(d_, centered);
                check_conductance_invariants(field, a);
                double* slot = &cond_[(flat * static_cast<size_t>(np_) + static_cast<size_t>(i)) *
                                      static_cast<size_t>(sdim_)];
                slot[0] = a.at(0, 0);
                if (d_ == 2) {
                    slot[1] = a.at(1, 1);
                    slot[2] = a.at(0, 1);
                }
                // Jacobi diagonal and rhs from the same stencil geometry
                for (int c = 0; c < d_; ++c) {
                    int axis = i * d_ + c;
                    int k = it.idx[static_cast<size_t>(axis)];
                    size_t s = stride_[static_cast<size_t>(axis)];
                    double acc = slot[c == 0 ? 0 : 1];
                    if (k == 0) {
                        diag_[flat + s] += w_ * acc / (h_ * h_);
                        diag_[flat] += w_ * acc / (h_ * h_);
                    } else if (k == P_ - 1) {
                        diag_[flat] += w_ * acc / (h_ * h_);
                        diag_[flat - s] += w_ * acc / (h_ * h_);
                    } else {
                        diag_[flat + s] += w_ * acc / (4.0 * h_ * h_);
                        diag_[flat - s] += w_ * acc / (4.0 * h_ * h_);
                    }
                    detail::scatter_adjoint(b_, w_ * q_[c], flat, k, P_, s, h_);
                }
            }
            it.next();
        }
    }
};

/// Maximize the discretized per-n dual functional by Jacobi-preconditioned CG on
/// the mean-zero subspace. n = 0 returns the zero corrector with J = 0.
inline DiscreteCorrector solve_dual(const ConductanceField& field, const GridSpec& grid, const Vec& q,
                                    const PointConfiguration& exterior,
                                    const SolverOptions& opts = {}) {
    grid.check_budget(opts.max_unknowns);
    DiscreteCorrector corr;
    corr.grid = grid;
    corr.direction = q;
    corr.exterior = restrict_collar(exterior, grid.box, field.locality_radius);
    if (grid.n == 0) {
        corr.values.assign(1, 0.0);
        corr.j_raw = 0.0;
        return corr;
    }

    DualOperator op(field, grid, q, corr.exterior);
    const size_t N = op.size();
    std::vector<double> x(N, 0.0), r = op.rhs(), z(N), p(N), Ap(N);
    detail::project_mean(r);
    const double bnorm = std::sqrt(detail::dot_v(r, r));
    const double target = opts.tol * (bnorm > 0 ? bnorm : 1.0);
    const auto& diag = op.jacobi_diag();
    auto precond = [&](const std::vector<double>& in, std::vector<double>& out) {
        for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] / diag[i];
        detail::project_mean(out);
    };

    int cap = static_cast<int>(opts.iter_cap_factor * std::sqrt(static_cast<double>(N))) + 100;
    double rnorm = bnorm;
    int it = 0;
    if (bnorm > 0) {
        precond(r, z);
        p = z;
        double rz = detail::dot_v(r, z);
        for (it = 0; it < cap; ++it) {
            op.apply(p, Ap);
            double pAp = detail::dot_v(p, Ap);
            if (!(pAp > 0)) break;  // numerically flat direction: converged on the quotient
            double alpha = rz / pAp;
            for (size_t i = 0; i < N; ++i) {
                x[i] += alpha * p[i];
                r[i] -= alpha * Ap[i];
            }
            detail::project_mean(r);
            rnorm = std::sqrt(detail::dot_v(r, r));
            if (rnorm <= target) break;
            precond(r, z);
            double rz_new = detail::dot_v(r, z);
            double beta = rz_new / rz;
            rz = rz_new;
            for (size_t i = 0; i < N; ++i) p[i] = z[i] + beta * p[i];
        }
        if (rnorm > target)
            throw SolverError("solve_dual: CG did not reach tolerance " + format_double(opts.tol),
                              rnorm / (bnorm > 0 ? bnorm : 1.0), it);
    }
    detail::project_mean(x);
    corr.values = std::move(x);
    corr.j_raw = op.functional(corr.values);
    corr.cg_iters = it;
    corr.cg_residual = bnorm > 0 ? rnorm / bnorm : 0.0;
    return corr;
}

// ---------------------------------------------------------------------------
// Evaluation helpers on solved correctors.
// ---------------------------------------------------------------------------

/// (1/(rho0 |U|)) avg_{U^n} sum_i |D_i u|^2.
inline double dirichlet_energy(const DiscreteCorrector& c, double rho0) {
    if (c.grid.n == 0) return 0.0;
    const auto stride = c.grid.strides();
    const int P = c.grid.points, d = c.grid.dim();
    const double h = c.grid.h();
    double acc = 0;
    GridIter it(c.grid);
    while (!it.done) {
        for (int a = 0; a < c.grid.axes(); ++a)
            acc += std::pow(detail::node_gradient(c.values, it.flat, it.idx[static_cast<size_t>(a)], P,
                                                  stride[static_cast<size_t>(a)], h),
                            2);
        it.next();
    }
    (void)d;
    acc /= static_cast<double>(c.grid.total());
    return acc / (rho0 * c.grid.box.volume());
}

/// Per-particle slice energy (1/n) sum_i avg |D_i u|^2; bounded by |q|^2 up to O(h).
inline double slice_energy(const DiscreteCorrector& c) {
    if (c.grid.n == 0) return 0.0;
    const auto stride = c.grid.strides();
    const int P = c.grid.points;
    const double h = c.grid.h();
    double acc = 0;
    GridIter it(c.grid);
    while (!it.done) {
        for (int a = 0; a < c.grid.axes(); ++a)
            acc += std::pow(detail::node_gradient(c.values, it.flat, it.idx[static_cast<size_t>(a)], P,
                                                  stride[static_cast<size_t>(a)], h),
                            2);
        it.next();
    }
    return acc / static_cast<double>(c.grid.total()) / c.grid.n;
}

/// Discrete first-variation residual of the solved corrector against a test
/// function, evaluated with an independent cell-staggered scheme (forward
/// differences, midpoint conductances). For an exact continuum maximizer this
/// is zero; here it is O(tol + h) * ||grad test||.
inline double first_variation_residual(const ConductanceField& field, const DiscreteCorrector& psi,
                                       const std::vector<double>& test, const Vec& q) {
    if (test.size() != psi.values.size())
        throw std::invalid_argument("first_variation_residual: grid mismatch");
    const GridSpec& g = psi.grid;
    if (g.n == 0) return 0.0;
    const auto stride = g.strides();
    const int P = g.points, d = g.dim();
    const double h = g.h();
    const double w = 1.0 / (static_cast<double>(g.total()) / P * (P - 1));
    double res = 0;
    PointConfiguration centered(d);
    for (int axis = 0; axis < g.axes(); ++axis) {
        const int i = axis / d, c = axis % d;
        const size_t s = stride[static_cast<size_t>(axis)];
        GridIter it(g);
        while (!it.done) {
            if (it.idx[static_cast<size_t>(axis)] < P - 1) {
                const size_t flat = it.flat;
                double dpsi = (psi.values[flat + s] - psi.values[flat]) / h;
                double dtst = (test[flat + s] - test[flat]) / h;
                // conductance at the cell-midpoint configuration
                centered.coords.clear();
                Vec yi(d);
                for (int cc = 0; cc < d; ++cc)
                    yi[cc] = g.node_coord(i * d + cc, it.idx[static_cast<size_t>(i * d + cc)]);
                yi[c] += h / 2.0;
                centered.push(Vec(d));
                for (int j = 0; j < g.n; ++j) {
                    if (j == i) continue;
                    Vec yj(d);
                    for (int cc = 0; cc < d; ++cc)
                        yj[cc] = g.node_coord(j * d + cc, it.idx[static_cast<size_t>(j * d + cc)]) - yi[cc];
                    centered.push(yj);
                }
                for (size_t e = 0; e < psi.exterior.count(); ++e)
                    centered.push(psi.exterior.point(e) - yi);
                SymMatrix a = field.eval_origin_raw(d, centered);
                if (!a.is_diagonal(1e-14))
                    throw std::invalid_argument(
                        "first_variation_residual: staggered evaluation needs diagonal conductance");
                res += w * (-dpsi * a.at(c, c) * dtst + q[c] * dtst);
            }
            it.next();
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Slicing: pin some particles at arbitrary positions (multilinear weights in
// each pinned axis) and return the contracted tensor over the rest.
// ---------------------------------------------------------------------------

struct PinnedParticle {
    int particle;  // slot in the source grid
    Vec position;  // inside the box
};

inline std::vector<double> contract_particles(const GridSpec& g, const std::vector<double>& values,
                                              const std::vector<PinnedParticle>& pins,
                                              GridSpec* out_grid = nullptr) {
    const int d = g.dim(), P = g.points;
    const double h = g.h();
    std::vector<bool> pinned(static_cast<size_t>(g.n), false);
    for (const auto& pin : pins) pinned[static_cast<size_t>(pin.particle)] = true;

    // interpolation weights per pinned axis
    struct AxisW {
        size_t stride;
        int k0;
        double w1;  // value = (1-w1) at k0 + w1 at k0+1
    };
    const auto stride = g.strides();
    std::vector<AxisW> pw;
    for (const auto& pin : pins) {
        for (int c = 0; c < d; ++c) {
            double t = (pin.position[c] - g.box.lo(c)) / h;
            int k0 = static_cast<int>(std::floor(t));
            if (k0 < 0) k0 = 0;
            if (k0 > P - 2) k0 = P - 2;
            pw.push_back({stride[static_cast<size_t>(pin.particle * d + c)], k0, t - k0});
        }
    }

    GridSpec rg(g.box, g.n - static_cast<int>(pins.size()), P);
    if (out_grid) *out_grid = rg;
    std::vector<double> out(rg.total(), 0.0);

    // map between reduced axes and source axes
    std::vector<size_t> src_axis_stride;
    for (int i = 0; i < g.n; ++i)
        if (!pinned[static_cast<size_t>(i)])
            for (int c = 0; c < d; ++c) src_axis_stride.push_back(stride[static_cast<size_t>(i * d + c)]);

    GridIter it(rg);
    const size_t n_corners = size_t{1} << pw.size();
    while (!it.done) {
        size_t base = 0;
        for (size_t a = 0; a < src_axis_stride.size(); ++a)
            base += src_axis_stride[a] * static_cast<size_t>(it.idx[a]);
        double acc = 0;
        for (size_t corner = 0; corner < n_corners; ++corner) {
            double wgt = 1;
            size_t off = base;
            for (size_t a = 0; a < pw.size(); ++a) {
                bool hi = corner & (size_t{1} << a);
                wgt *= hi ? pw[a].w1 : 1.0 - pw[a].w1;
                off += pw[a].stride * static_cast<size_t>(pw[a].k0 + (hi ? 1 : 0));
            }
            if (wgt != 0.0) acc += wgt * values[off];
        }
        out[it.flat] = acc;
        it.next();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Primal solver: minimize the exterior-free particle-count mixture functional
// over sequences (f_n)_{n <= n_max}, with the cross-count trace condition
// enforced exactly by identifying boundary-face nodes of f_n with f_{n-1}.
// ---------------------------------------------------------------------------

struct PrimalResult {
    std::vector<DiscreteCorrector> f;    // index n-1 holds f_n
    std::vector<double> raw_energy;      // per n: avg_{U^n} sum_i (p+D_i f).a(p+D_i f)
    double value = 0;                    // truncated K(f) = sum_n w_n raw/(2 rho0 |U|)
    int cg_iters = 0;
};

class PrimalProblem {
public:
    PrimalProblem(const ConductanceField& field, const Box& U, const Vec& p, int n_max, int points,
                  double rho0, const SolverOptions& opts)
        : U_(U), p_(p), n_max_(n_max), P_(points), rho0_(rho0), opts_(opts) {
        d_ = U.dim();
        h_ = U.side / (P_ - 1);
        lambda_ = rho0 * U.volume();
        grids_.reserve(static_cast<size_t>(n_max_));
        size_t zoff = 0;
        for (int n = 1; n <= n_max_; ++n) {
            GridSpec g(U, n, P_);
            g.check_budget(opts.max_unknowns);
            grids_.push_back(g);
            z_offsets_.push_back(zoff);
            size_t free_count = 1;
            for (int a = 0; a < g.axes(); ++a) free_count *= static_cast<size_t>(P_ - 2);
            zoff += free_count;
        }
        z_size_ = zoff;
        weights_.resize(static_cast<size_t>(n_max_) + 1);
        for (int n = 0; n <= n_max_; ++n) weights_[static_cast<size_t>(n)] = poisson_pmf(n, lambda_);
        assemble(field);
    }

    size_t size() const { return z_size_; }

    /// Raw per-n energy avg sum_i (p + D_i f).a(p + D_i f) for a full field.
    double raw_energy(int n, const std::vector<double>& full) const {
        const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
        const auto stride = g.strides();
        double acc = 0;
        const double wc = cell_weight(g);
        for (int axis = 0; axis < g.axes(); ++axis) {
            const size_t s = stride[static_cast<size_t>(axis)];
            const int c = axis % d_;
            GridIter it(g);
            while (!it.done) {
                if (it.idx[static_cast<size_t>(axis)] < P_ - 1) {
                    double grad = p_[c] + (full[it.flat + s] - full[it.flat]) / h_;
                    acc += wc * cond_at(n, axis, it.flat) * grad * grad;
                }
                it.next();
            }
        }
        return acc;
    }

    std::vector<double> prolong(int n, const std::vector<double>& z) const {
        const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
        std::vector<double> full(g.total());
        GridIter it(g);
        while (!it.done) {
            full[it.flat] = value_at(n, it.idx, z);
            it.next();
        }
        return full;
    }

    void apply(const std::vector<double>& z, std::vector<double>& out) const {
        std::fill(out.begin(), out.end(), 0.0);
        for (int n = 1; n <= n_max_; ++n) {
            std::vector<double> full = prolong(n, z);
            std::vector<double> gfull(full.size(), 0.0);
            flux_scatter(n, full, gfull, /*with_p=*/false);
            adjoint_prolong(n, gfull, out);
        }
    }

    std::vector<double> rhs() const {
        std::vector<double> out(z_size_, 0.0);
        for (int n = 1; n <= n_max_; ++n) {
            const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
            std::vector<double> zero(g.total(), 0.0), gfull(g.total(), 0.0);
            flux_scatter(n, zero, gfull, /*with_p=*/true);
            std::vector<double> tmp(z_size_, 0.0);
            adjoint_prolong(n, gfull, tmp);
            for (size_t i = 0; i < z_size_; ++i) out[i] -= tmp[i];
        }
        return out;
    }

    const std::vector<double>& jacobi_diag() const { return diag_; }
    const GridSpec& grid(int n) const { return grids_[static_cast<size_t>(n - 1)]; }
    double weight(int n) const { return weights_[static_cast<size_t>(n)]; }
    double lambda() const { return lambda_; }

private:
    Box U_;
    Vec p_;
    int n_max_, P_, d_ = 1;
    double rho0_, h_ = 1, lambda_ = 1;
    SolverOptions opts_;
    std::vector<GridSpec> grids_;
    std::vector<size_t> z_offsets_;
    size_t z_size_ = 0;
    std::vector<double> weights_;
    std::vector<std::vector<double>> cond_;  // per n: axis-major [axis][node]
    std::vector<double> diag_;

    double cell_weight(const GridSpec& g) const {
        return 1.0 / (static_cast<double>(g.total()) / P_ * (P_ - 1));
    }

    double cond_at(int n, int axis, size_t flat) const {
        const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
        return cond_[static_cast<size_t>(n - 1)][static_cast<size_t>(axis) * g.total() + flat];
    }

    /// z index of a full grid node: free nodes map to their own slot; nodes with
    /// particles on a face resolve to the reduced configuration one level down.
    /// Returns true if the node maps to a z entry, false if it is pinned to f_0 = 0.
    bool z_index(int n, const std::vector<int>& idx, size_t& out) const {
        std::vector<int> reduced;
        reduced.reserve(idx.size());
        int kept = 0;
        for (int i = 0; i < n; ++i) {
            bool face = false;
            for (int c = 0; c < d_; ++c) {
                int k = idx[static_cast<size_t>(i * d_ + c)];
                if (k == 0 || k == P_ - 1) face = true;
            }
            if (!face) {
                for (int c = 0; c < d_; ++c) reduced.push_back(idx[static_cast<size_t>(i * d_ + c)]);
                ++kept;
            }
        }
        if (kept == 0) return false;
        size_t fidx = 0;
        for (int a = 0; a < kept * d_; ++a)
            fidx = fidx * static_cast<size_t>(P_ - 2) + static_cast<size_t>(reduced[static_cast<size_t>(a)] - 1);
        out = z_offsets_[static_cast<size_t>(kept - 1)] + fidx;
        return true;
    }

    double value_at(int n, const std::vector<int>& idx, const std::vector<double>& z) const {
        size_t zi;
        return z_index(n, idx, zi) ? z[zi] : 0.0;
    }

    void adjoint_prolong(int n, const std::vector<double>& gfull, std::vector<double>& out) const {
        const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
        GridIter it(g);
        while (!it.done) {
            if (gfull[it.flat] != 0.0) {
                size_t zi;
                if (z_index(n, it.idx, zi)) out[zi] += gfull[it.flat];
            }
            it.next();
        }
    }

    /// Accumulates 2 W_n w_cell D^T a (p?+) D f into gfull. with_p scatters the
    /// p-part only (for the rhs); otherwise the f-part only (for the operator).
    void flux_scatter(int n, const std::vector<double>& full, std::vector<double>& gfull,
                      bool with_p) const {
        const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
        const auto stride = g.strides();
        const double wn = 2.0 * weights_[static_cast<size_t>(n)] * cell_weight(g);
        for (int axis = 0; axis < g.axes(); ++axis) {
            const size_t s = stride[static_cast<size_t>(axis)];
            const int c = axis % d_;
            GridIter it(g);
            while (!it.done) {
                if (it.idx[static_cast<size_t>(axis)] < P_ - 1) {
                    const size_t flat = it.flat;
                    double grad = with_p ? p_[c] : (full[flat + s] - full[flat]) / h_;
                    double v = wn * cond_at(n, axis, flat) * grad / h_;
                    gfull[flat + s] += v;
                    gfull[flat] -= v;
                }
                it.next();
            }
        }
    }

    void assemble(const ConductanceField& field) {
        cond_.resize(static_cast<size_t>(n_max_));
        diag_.assign(z_size_, 0.0);
        PointConfiguration centered(d_);
        for (int n = 1; n <= n_max_; ++n) {
            const GridSpec& g = grids_[static_cast<size_t>(n - 1)];
            auto& cn = cond_[static_cast<size_t>(n - 1)];
            cn.assign(static_cast<size_t>(g.axes()) * g.total(), 0.0);
            const auto stride = g.strides();
            const double wn = 2.0 * weights_[static_cast<size_t>(n)] * cell_weight(g);
            for (int axis = 0; axis < g.axes(); ++axis) {
                const int i = axis / d_, c = axis % d_;
                GridIter it(g);
                while (!it.done) {
                    if (it.idx[static_cast<size_t>(axis)] < P_ - 1) {
                        centered.coords.clear();
                        Vec yi(d_);
                        for (int cc = 0; cc < d_; ++cc)
                            yi[cc] = g.node_coord(i * d_ + cc, it.idx[static_cast<size_t>(i * d_ + cc)]);
                        yi[c] += h_ / 2.0;
                        centered.push(Vec(d_));
                        for (int j = 0; j < n; ++j) {
                            if (j == i) continue;
                            Vec yj(d_);
                            for (int cc = 0; cc < d_; ++cc)
                                yj[cc] = g.node_coord(j * d_ + cc, it.idx[static_cast<size_t>(j * d_ + cc)]) -
                                         yi[cc];
                            centered.push(yj);
                        }
                        SymMatrix a = field.eval_origin_raw(d_, centered);
                        check_conductance_invariants(field, a);
                        if (!a.is_diagonal(1e-14))
                            throw std::invalid_argument(
                                "solve_primal: staggered scheme needs diagonal conductance");
                        cn[static_cast<size_t>(axis) * g.total() + it.flat] = a.at(c, c);
                        double dc = wn * a.at(c, c) / (h_ * h_);
                        size_t zi;
                        std::vector<int> nb = it.idx;
                        if (z_index(n, nb, zi)) diag_[zi] += dc;
                        nb[static_cast<size_t>(axis)] += 1;
                        if (z_index(n, nb, zi)) diag_[zi] += dc;
                    }
                    it.next();
                }
            }
        }
        for (double& v : diag_)
            if (v == 0.0) v = 1.0;
    }
};

/// Jointly minimizes the truncated particle-count mixture over (f_n)_{n<=n_max}.
inline PrimalResult solve_primal(const ConductanceField& field, const Box& U, const Vec& p, int n_max,
                                 int points, double rho0, const SolverOptions& opts = {}) {
    PrimalResult res;
    if (n_max < 1) {
        res.value = 0;
        return res;
    }
    PrimalProblem prob(field, U, p, n_max, points, rho0, opts);
    const size_t N = prob.size();
    std::vector<double> z(N, 0.0), r = prob.rhs(), zz(N), pp(N), Ap(N);
    const double bnorm = std::sqrt(detail::dot_v(r, r));
    const double target = opts.tol * (bnorm > 0 ? bnorm : 1.0);
    const auto& diag = prob.jacobi_diag();
    int it = 0;
    double rnorm = bnorm;
    if (bnorm > 0) {
        for (size_t i = 0; i < N; ++i) zz[i] = r[i] / diag[i];
        pp = zz;
        double rz = detail::dot_v(r, zz);
        int cap = static_cast<int>(opts.iter_cap_factor * std::sqrt(static_cast<double>(N))) + 100;
        for (it = 0; it < cap; ++it) {
            prob.apply(pp, Ap);
            double pAp = detail::dot_v(pp, Ap);
            if (!(pAp > 0)) break;
            double alpha = rz / pAp;
            for (size_t i = 0; i < N; ++i) {
                z[i] += alpha * pp[i];
                r[i] -= alpha * Ap[i];
            }
            rnorm = std::sqrt(detail::dot_v(r, r));
            if (rnorm <= target) break;
            for (size_t i = 0; i < N; ++i) zz[i] = r[i] / diag[i];
            double rz_new = detail::dot_v(r, zz);
            double beta = rz_new / rz;
            rz = rz_new;
            for (size_t i = 0; i < N; ++i) pp[i] = zz[i] + beta * pp[i];
        }
        if (rnorm > target)
            throw SolverError("solve_primal: CG did not reach tolerance", rnorm / bnorm, it);
    }
    res.cg_iters = it;
    res.raw_energy.assign(static_cast<size_t>(n_max) + 1, 0.0);
    double lambda = prob.lambda();
    for (int n = 1; n <= n_max; ++n) {
        std::vector<double> full = prob.prolong(n, z);
        res.raw_energy[static_cast<size_t>(n)] = prob.raw_energy(n, full);
        DiscreteCorrector c;
        c.grid = prob.grid(n);
        c.direction = p;
        c.values = std::move(full);
        res.f.push_back(std::move(c));
        res.value += poisson_pmf(n, lambda) * res.raw_energy[static_cast<size_t>(n)];
    }
    res.value /= 2.0 * rho0 * U.volume();
    return res;
}

}  // namespace bulkdiff
