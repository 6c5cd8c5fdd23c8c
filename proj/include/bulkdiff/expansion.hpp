#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bulkdiff/diff_calculus.hpp"
#include "bulkdiff/estimator.hpp"

namespace bulkdiff {

// ---------------------------------------------------------------------------
// Quadrature nodes for added particles: grid-aligned nodes inside U (so that
// perturbed correctors slice exactly) and midpoint nodes on the collar.
// ---------------------------------------------------------------------------

struct QuadNode {
    Vec pos;
    double wt;
    bool inside;
};

inline std::vector<QuadNode> added_particle_nodes(const Box& U, int points, int inside_count_1d,
                                                  int collar_nodes) {
    const int d = U.dim();
    std::vector<QuadNode> nodes;
    const double h = U.side / (points - 1);
    // inside rule: grid-aligned subsampled trapezoid (both endpoints included);
    // snapped midpoint rules carry a phase-noisy O(h) error at coefficient kinks
    int stride = std::max(1, (points - 1) / std::max(1, inside_count_1d));
    while ((points - 1) % stride != 0) --stride;
    const int K = (points - 1) / stride + 1;
    std::vector<double> axis_off(static_cast<size_t>(K)), axis_wt(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j) {
        axis_off[static_cast<size_t>(j)] = j * stride * h;
        axis_wt[static_cast<size_t>(j)] = stride * h * (j == 0 || j == K - 1 ? 0.5 : 1.0);
    }
    if (d == 1) {
        for (int j = 0; j < K; ++j) {
            Vec p(1);
            p[0] = U.lo(0) + axis_off[static_cast<size_t>(j)];
            nodes.push_back({p, axis_wt[static_cast<size_t>(j)], true});
        }
    } else {
        for (int a = 0; a < K; ++a)
            for (int b = 0; b < K; ++b) {
                Vec p(2);
                p[0] = U.lo(0) + axis_off[static_cast<size_t>(a)];
                p[1] = U.lo(1) + axis_off[static_cast<size_t>(b)];
                nodes.push_back({p, axis_wt[static_cast<size_t>(a)] * axis_wt[static_cast<size_t>(b)], true});
            }
    }
    if (d == 1) {
        const double cw = 0.5 / collar_nodes;
        for (int side = 0; side < 2; ++side)
            for (int k = 0; k < collar_nodes; ++k) {
                Vec p(1);
                double off = (k + 0.5) * cw;
                p[0] = side == 0 ? U.lo(0) - off : U.hi(0) + off;
                nodes.push_back({p, cw, false});
            }
    } else {
        const double g = 0.5 / collar_nodes;
        Box enlarged(U.center, U.side + 1.0);
        int steps = static_cast<int>(std::lround(enlarged.side / g));
        for (int a = 0; a < steps; ++a)
            for (int b = 0; b < steps; ++b) {
                Vec p(2);
                p[0] = enlarged.lo(0) + (a + 0.5) * g;
                p[1] = enlarged.lo(1) + (b + 0.5) * g;
                if (!U.contains(p) && U.distance(p) < 0.5) nodes.push_back({p, g * g, false});
            }
    }
    return nodes;
}

namespace exp_detail {

/// Contract the trailing particles of a corrector at fixed positions.
inline std::vector<double> slice_at(const DiscreteCorrector& corr, const std::vector<Vec>& inside_pos,
                                    GridSpec* out_grid) {
    std::vector<PinnedParticle> pins;
    const int n = corr.grid.n;
    const int si = static_cast<int>(inside_pos.size());
    for (int k = 0; k < si; ++k) pins.push_back({n - si + k, inside_pos[static_cast<size_t>(k)]});
    return contract_particles(corr.grid, corr.values, pins, out_grid);
}

struct PairContext {
    const ConductanceField* field;
    const GridSpec* grid;           // U^n grid shared by both factors
    const PointConfiguration* ext;  // exterior of the base measure
};

/// avg_{U^n} sum_i grad(psiA)[i] . (a - a^{added}) grad(psiB)[i], with a quick
/// reject where no added point is within locality range of y_i.
inline double pair_sweep_diff(const PairContext& ctx, const std::vector<double>& psiA,
                              const std::vector<double>& psiB, const std::vector<Vec>& added) {
    const GridSpec& g = *ctx.grid;
    const int d = g.dim(), n = g.n, P = g.points;
    if (n == 0) return 0.0;
    const double h = g.h();
    const auto stride = g.strides();
    const double r = ctx.field->locality_radius;
    PointConfiguration centered(d);
    double acc = 0;
    GridIter it(g);
    while (!it.done) {
        for (int i = 0; i < n; ++i) {
            Vec yi(d);
            for (int c = 0; c < d; ++c)
                yi[c] = g.node_coord(i * d + c, it.idx[static_cast<size_t>(i * d + c)]);
            bool near = false;
            for (const auto& x : added)
                if ((x - yi).norm2() < r * r) {
                    near = true;
                    break;
                }
            if (!near) continue;  // a and a^{added} coincide at y_i
            centered.coords.clear();
            centered.push(Vec(d));
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                Vec yj(d);
                for (int c = 0; c < d; ++c)
                    yj[c] = g.node_coord(j * d + c, it.idx[static_cast<size_t>(j * d + c)]) - yi[c];
                centered.push(yj);
            }
            for (size_t e = 0; e < ctx.ext->count(); ++e) centered.push(ctx.ext->point(e) - yi);
            SymMatrix a0 = ctx.field->eval_origin_raw(d, centered);
            for (const auto& x : added) centered.push(x - yi);
            SymMatrix a1 = ctx.field->eval_origin_raw(d, centered);
            SymMatrix diff = a0 - a1;
            bool nonzero = false;
            for (int ci = 0; ci < d && !nonzero; ++ci)
                for (int cj = ci; cj < d && !nonzero; ++cj)
                    if (diff.at(ci, cj) != 0.0) nonzero = true;
            if (!nonzero) continue;
            Vec gA(d), gB(d);
            for (int c = 0; c < d; ++c) {
                int axis = i * d + c;
                gA[c] = detail::node_gradient(psiA, it.flat, it.idx[static_cast<size_t>(axis)], P,
                                              stride[static_cast<size_t>(axis)], h);
                gB[c] = detail::node_gradient(psiB, it.flat, it.idx[static_cast<size_t>(axis)], P,
                                              stride[static_cast<size_t>(axis)], h);
            }
            acc += dot(gA, diff.apply(gB));
        }
        it.next();
    }
    return acc / static_cast<double>(g.total());
}

/// avg_{U^n} sum_i [ grad(psiF)[i] . a^{E}(y_i) grad(psiE)[i] - q . grad(psiF)[i] ].
inline double pair_sweep_harmonic(const PairContext& ctx, const std::vector<double>& psiF,
                                  const std::vector<double>& psiE, const std::vector<Vec>& e_points,
                                  const Vec& q) {
    const GridSpec& g = *ctx.grid;
    const int d = g.dim(), n = g.n, P = g.points;
    if (n == 0) return 0.0;
    const double h = g.h();
    const auto stride = g.strides();
    PointConfiguration centered(d);
    double acc = 0;
    GridIter it(g);
    while (!it.done) {
        for (int i = 0; i < n; ++i) {
            Vec yi(d);
            for (int c = 0; c < d; ++c)
                yi[c] = g.node_coord(i * d + c, it.idx[static_cast<size_t>(i * d + c)]);
            centered.coords.clear();
            centered.push(Vec(d));
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                Vec yj(d);
                for (int c = 0; c < d; ++c)
                    yj[c] = g.node_coord(j * d + c, it.idx[static_cast<size_t>(j * d + c)]) - yi[c];
                centered.push(yj);
            }
            for (size_t e = 0; e < ctx.ext->count(); ++e) centered.push(ctx.ext->point(e) - yi);
            for (const auto& x : e_points) centered.push(x - yi);
            SymMatrix aE = ctx.field->eval_origin_raw(d, centered);
            Vec gF(d), gE(d);
            for (int c = 0; c < d; ++c) {
                int axis = i * d + c;
                gF[c] = detail::node_gradient(psiF, it.flat, it.idx[static_cast<size_t>(axis)], P,
                                              stride[static_cast<size_t>(axis)], h);
                gE[c] = detail::node_gradient(psiE, it.flat, it.idx[static_cast<size_t>(axis)], P,
                                              stride[static_cast<size_t>(axis)], h);
            }
            acc += dot(gF, aE.apply(gE)) - dot(q, gF);
        }
        it.next();
    }
    return acc / static_cast<double>(g.total());
}

/// Corrector for mu + (added points) at a common grid resolution: outside
/// points augment the exterior, inside points are sliced off the higher-count
/// corrector. Returns values over the U^n grid.
inline std::vector<double> perturbed_corrector(const Estimator& est, const Box& U, int n, const Vec& q,
                                               const PointConfiguration& ext, int points,
                                               const std::vector<Vec>& inside_pts,
                                               const std::vector<Vec>& outside_pts,
                                               const SolverOptions& opts) {
    PointConfiguration ext_aug = ext;
    for (const auto& x : outside_pts) ext_aug.push(x);
    auto corr = est.dual_corrector(U, n + static_cast<int>(inside_pts.size()), q, ext_aug, points, opts);
    if (inside_pts.empty()) return corr->values;
    GridSpec rg;
    return slice_at(*corr, inside_pts, &rg);
}

}  // namespace exp_detail

// ---------------------------------------------------------------------------
// T-table: the level-j coupling integrals
//   T_j = avg_{(box_{m+1})^j} E[(1/(rho0 |box_m|)) int grad(psi).(a - a^{[1,j]}) grad(psi^{[1,j]}) dmu]
// from which both the density increment and every c_{k,m} follow.
// ---------------------------------------------------------------------------

struct TjTable {
    int m = 0;
    Vec q;
    double rho0 = 1;
    int j_max = 1;
    int points = 0;
    std::vector<int> n_max_per_j;
    double V1 = 0;    // |box_{m+1}|
    double Zvol = 0;  // volume beyond the active region, where the integrand is inert
    long n_outer = 1;
    std::vector<std::vector<double>> G_samples;  // [sample][w]: active-restricted integrals

    /// Unnormalized T-hat_j over (box_{m+1})^j via the inert decomposition
    /// T-hat_j = sum_w C(j,w) Z^{j-w} G_w (points beyond the collar change nothing).
    double That(size_t sample, int j) const {
        double acc = 0;
        for (int w = 0; w <= j; ++w) {
            double binom = 1;
            for (int t = 0; t < w; ++t) binom = binom * (j - t) / (t + 1);
            acc += binom * std::pow(Zvol, j - w) * G_samples[sample][static_cast<size_t>(w)];
        }
        return acc;
    }
    double Tj(size_t sample, int j) const { return That(sample, j) / std::pow(V1, j); }

    /// c_{k,m} = V1^k sum_j C(k,j) (-1)^{k-j} T_j (inclusion-exclusion over the
    /// added-particle superscripts).
    double ck(size_t sample, int k) const {
        double acc = 0;
        for (int j = 0; j <= k && j <= j_max; ++j) {
            double binom = 1;
            for (int t = 0; t < j; ++t) binom = binom * (k - t) / (t + 1);
            double sign = (k - j) % 2 ? -1.0 : 1.0;
            acc += binom * sign * Tj(sample, j);
        }
        return acc * std::pow(V1, k);
    }

    /// Analytic-in-rho increment from the truncated table:
    /// Delta(rho) = e^{-rho V1} sum_{j<=j_max} (rho V1)^j / j! T_j.
    double delta_series(size_t sample, double rho) const {
        double acc = 0, pw = 1, fact = 1;
        for (int j = 0; j <= j_max; ++j) {
            if (j > 0) {
                pw *= rho * V1;
                fact *= j;
            }
            acc += pw / fact * Tj(sample, j);
        }
        return std::exp(-rho * V1) * acc;
    }
};

/// Build the table at one grid level. A common resolution lets perturbed and
/// unperturbed gradients pair on the same U^n grid; per-j particle-count caps
/// keep the highest-dimensional solves inside the memory budget.
inline TjTable build_tj_table(const Estimator& est, int m, const Vec& q, double rho0,
                              const McConfig& mc, int j_max, int points_override = 0,
                              int quad_scale = 1) {
    const int d = est.dim();
    const Box U = box_m(m, d);
    TjTable tab;
    tab.m = m;
    tab.q = q;
    tab.rho0 = rho0;
    tab.j_max = j_max;
    tab.V1 = box_m(m + 1, d).volume();
    // active region = U plus its Euclidean 1/2-collar (rounded corners for d = 2)
    double active_vol = d == 1 ? U.side + 1.0
                               : U.side * U.side + 2.0 * U.side + M_PI * 0.25;
    tab.Zvol = tab.V1 - active_vol;
    const double lambda = rho0 * U.volume();

    int P = points_override > 0
                ? points_override
                : est_detail::points_for(U.side, mc.h, d * (mc.n_max + 1), mc.max_unknowns);
    tab.points = P;
    tab.n_max_per_j.assign(static_cast<size_t>(j_max) + 1, mc.n_max);
    for (int j = 1; j <= j_max; ++j) {
        int nm = mc.n_max;
        while (nm > 1 && GridSpec(U, nm + j, P).total() > mc.max_unknowns) --nm;
        tab.n_max_per_j[static_cast<size_t>(j)] = nm;
    }

    const long n_samples = mc.exterior_mode == ExteriorMode::none ? 1 : mc.n_outer;
    tab.n_outer = n_samples;
    tab.G_samples.assign(static_cast<size_t>(n_samples),
                         std::vector<double>(static_cast<size_t>(j_max) + 1, 0.0));
    SolverOptions opts = mc.solver_options();

    WorkPool pool(mc.threads);
    pool.parallel_for(static_cast<size_t>(n_samples), [&](size_t s) {
        CounterRng rng(mc.seed, s);
        PointConfiguration ext = mc.exterior_mode == ExteriorMode::none
                                     ? PointConfiguration(d)
                                     : est_detail::sample_collar(rho0, U, rng);
        for (int w = 1; w <= j_max; ++w) {
            const int nm = tab.n_max_per_j[static_cast<size_t>(w)];
            int inside_1d = std::max(4, (P - 1) / (w >= 3 ? 4 : (w == 2 ? 2 : 1)) / quad_scale);
            int collar = std::max(2, mc.collar_nodes / ((w >= 3 ? 2 : 1) * quad_scale));
            auto nodes = added_particle_nodes(U, P, inside_1d, collar);
            const size_t K = nodes.size();
            std::vector<size_t> tup(static_cast<size_t>(w), 0);
            double Gw = 0;
            for (;;) {
                double wt = 1;
                std::vector<Vec> inside_pts, outside_pts, all_pts;
                for (int l = 0; l < w; ++l) {
                    const QuadNode& nd = nodes[tup[static_cast<size_t>(l)]];
                    wt *= nd.wt;
                    all_pts.push_back(nd.pos);
                    (nd.inside ? inside_pts : outside_pts).push_back(nd.pos);
                }
                double inner = 0;
                for (int n = 1; n <= nm; ++n) {
                    auto psi = est.dual_corrector(U, n, q, ext, P, opts);
                    auto psi_pert = exp_detail::perturbed_corrector(est, U, n, q, ext, P, inside_pts,
                                                                   outside_pts, opts);
                    exp_detail::PairContext ctx{&est.field(), &psi->grid, &psi->exterior};
                    inner += poisson_pmf(n, lambda) *
                             exp_detail::pair_sweep_diff(ctx, psi->values, psi_pert, all_pts);
                }
                Gw += wt * inner / (rho0 * U.volume());
                int l = w - 1;
                for (; l >= 0; --l) {
                    if (++tup[static_cast<size_t>(l)] < K) break;
                    tup[static_cast<size_t>(l)] = 0;
                }
                if (l < 0) break;
            }
            tab.G_samples[s][static_cast<size_t>(w)] = Gw;
        }
    });
    return tab;
}

// ---------------------------------------------------------------------------
// c_{k,m} with the Leibniz-split I(m, rho0, E, F) terms reported for k <= 2.
// ---------------------------------------------------------------------------

struct LeibnizSplit {
    std::vector<std::string> labels;
    std::vector<double> values;
    double ck_same_nodes = 0;  // direct D-form on the same tuples; equals sum(values)
};

/// I(m,rho0,E,F) for E u F = [1,k]: tuple quadrature of
///   (1/(rho0|box_m|)) E[ int grad(psi) . D_E(a - a^#) (D_F grad psi) dmu ],
/// all pieces evaluated on the same node tuples and cached solves.
inline LeibnizSplit leibniz_split_terms(const Estimator& est, int m, const Vec& q, double rho0,
                                        const McConfig& mc, int k, int points) {
    const int d = est.dim();
    const Box U = box_m(m, d);
    const double lambda = rho0 * U.volume();
    SolverOptions opts = mc.solver_options();
    const int P = points;
    auto nodes = added_particle_nodes(U, P, std::max(4, (P - 1) / 4), std::max(2, mc.collar_nodes / 2));
    const size_t K = nodes.size();
    PointConfiguration ext(d);  // the split is reported at empty exterior

    // enumerate (E,F) covers of [1,k]
    std::vector<std::pair<Subset, Subset>> covers;
    const Subset full = (Subset{1} << k) - 1;
    for (Subset E = 0; E <= full; ++E) {
        Subset rest = full & ~E;
        for_each_subset(E, [&](Subset H) { covers.push_back({E, rest | H}); });
    }

    LeibnizSplit out;
    std::vector<double> acc(covers.size(), 0.0);
    double ck_direct = 0;

    const int nm = std::max(1, std::min(mc.n_max, 4 - k));  // grid budget: d(n+k) axes
    std::vector<size_t> tup(static_cast<size_t>(k), 0);
    for (;;) {
        double wt = 1;
        std::vector<Vec> pos(static_cast<size_t>(k));
        for (int l = 0; l < k; ++l) {
            const QuadNode& nd = nodes[tup[static_cast<size_t>(l)]];
            wt *= nd.wt;
            pos[static_cast<size_t>(l)] = nd.pos;
        }
        for (int n = 1; n <= nm; ++n) {
            auto psi = est.dual_corrector(U, n, q, ext, P, opts);
            const GridSpec& g = psi->grid;
            const auto stride = g.strides();
            const double h = g.h();
            // per-subset corrector values
            std::vector<std::vector<double>> psiS(size_t{1} << k);
            for (Subset S = 0; S <= full; ++S) {
                std::vector<Vec> in_pts, out_pts;
                for (int l = 0; l < k; ++l)
                    if (S & (Subset{1} << l))
                        (U.contains(pos[static_cast<size_t>(l)]) ? in_pts : out_pts)
                            .push_back(pos[static_cast<size_t>(l)]);
                psiS[S] = exp_detail::perturbed_corrector(est, U, n, q, ext, P, in_pts, out_pts, opts);
            }
            const double pm = poisson_pmf(n, lambda) / (rho0 * U.volume());
            PointConfiguration centered(d);
            GridIter it(g);
            while (!it.done) {
                for (int i = 0; i < n; ++i) {
                    Vec yi(d);
                    for (int c = 0; c < d; ++c)
                        yi[c] = g.node_coord(i * d + c, it.idx[static_cast<size_t>(i * d + c)]);
                    // a^S(y_i) for all S
                    std::vector<SymMatrix> aS(size_t{1} << k);
                    centered.coords.clear();
                    centered.push(Vec(d));
                    for (int j = 0; j < n; ++j) {
                        if (j == i) continue;
                        Vec yj(d);
                        for (int c = 0; c < d; ++c)
                            yj[c] = g.node_coord(j * d + c, it.idx[static_cast<size_t>(j * d + c)]) - yi[c];
                        centered.push(yj);
                    }
                    size_t base_count = centered.count();
                    for (Subset S = 0; S <= full; ++S) {
                        centered.coords.resize(base_count * static_cast<size_t>(d));
                        for (int l = 0; l < k; ++l)
                            if (S & (Subset{1} << l)) centered.push(pos[static_cast<size_t>(l)] - yi);
                        aS[S] = est.field().eval_origin_raw(d, centered);
                    }
                    Vec grad0(d);
                    for (int c = 0; c < d; ++c) {
                        int axis = i * d + c;
                        grad0[c] = detail::node_gradient(psi->values, it.flat,
                                                         it.idx[static_cast<size_t>(axis)], g.points,
                                                         stride[static_cast<size_t>(axis)], h);
                    }
                    auto grad_of = [&](Subset S, Vec& gv) {
                        for (int c = 0; c < d; ++c) {
                            int axis = i * d + c;
                            gv[c] = detail::node_gradient(psiS[S], it.flat,
                                                          it.idx[static_cast<size_t>(axis)], g.points,
                                                          stride[static_cast<size_t>(axis)], h);
                        }
                    };
                    // direct D-form: sum_S (-1)^{k-|S|} (a - a^S) grad psi^S
                    Vec dsum(d);
                    for (Subset S = 0; S <= full; ++S) {
                        double sign = (k - subset_size(S)) % 2 ? -1.0 : 1.0;
                        Vec gS(d);
                        grad_of(S, gS);
                        dsum = dsum + (aS[0] - aS[S]).apply(gS) * sign;
                    }
                    ck_direct += wt * pm * dot(grad0, dsum) / static_cast<double>(g.total());
                    // I(E,F) pieces
                    for (size_t ci = 0; ci < covers.size(); ++ci) {
                        auto [E, F] = covers[ci];
                        // D_E(a - a^#) = sum_{S subset E} (-1)^{|E|-|S|} (a - a^S)
                        SymMatrix DEa(d);
                        for_each_subset(E, [&](Subset S) {
                            double sign = (subset_size(E) - subset_size(S)) % 2 ? -1.0 : 1.0;
                            DEa = DEa + (aS[0] - aS[S]) * sign;
                        });
                        Vec DFg(d);
                        for_each_subset(F, [&](Subset T) {
                            double sign = (subset_size(F) - subset_size(T)) % 2 ? -1.0 : 1.0;
                            Vec gT(d);
                            grad_of(T, gT);
                            DFg = DFg + gT * sign;
                        });
                        acc[ci] += wt * pm * dot(grad0, DEa.apply(DFg)) / static_cast<double>(g.total());
                    }
                }
                it.next();
            }
        }
        int l = k - 1;
        for (; l >= 0; --l) {
            if (++tup[static_cast<size_t>(l)] < K) break;
            tup[static_cast<size_t>(l)] = 0;
        }
        if (l < 0) break;
    }
    for (size_t ci = 0; ci < covers.size(); ++ci) {
        auto [E, F] = covers[ci];
        std::string lab = "I(E={";
        for (int l = 0; l < k; ++l)
            if (E & (Subset{1} << l)) lab += std::to_string(l + 1) + ",";
        lab += "},F={";
        for (int l = 0; l < k; ++l)
            if (F & (Subset{1} << l)) lab += std::to_string(l + 1) + ",";
        lab += "})";
        out.labels.push_back(lab);
        out.values.push_back(acc[ci]);
    }
    out.ck_same_nodes = ck_direct;
    return out;
}

struct CkmEstimate {
    MCEstimate est;
    bool quad_converged = true;
    LeibnizSplit split;  // populated for k <= 2
};

inline double sanity_band_ck(int k, double lambda_ell, double q2) {
    return 10.0 * std::pow(2.0, k) * lambda_ell * lambda_ell * q2;
}

inline CkmEstimate c_km(const Estimator& est, int m, const Vec& q, double rho0, int k,
                        const McConfig& mc, bool with_split = false) {
    if (k < 1 || k > 3) throw std::invalid_argument("c_km: k in {1,2,3}");
    CkmEstimate out;
    TjTable fine = build_tj_table(est, m, q, rho0, mc, k);
    std::vector<double> cks(fine.G_samples.size());
    for (size_t s = 0; s < cks.size(); ++s) cks[s] = fine.ck(s, k);
    auto ms = tree_mean_stderr(cks);
    out.est.value = ms.mean;
    out.est.stderr_ = ms.stderr_;
    out.est.n_outer = fine.n_outer;
    out.est.n_max = mc.n_max;
    out.est.points = fine.points;
    out.est.seed = mc.seed;

    if (mc.refine_levels >= 2) {
        McConfig coarse_mc = mc;
        coarse_mc.h = mc.h * 2.0;
        TjTable coarse = build_tj_table(est, m, q, rho0, coarse_mc, k, 0, 1);
        std::vector<double> cks_c(coarse.G_samples.size());
        for (size_t s = 0; s < cks_c.size(); ++s) cks_c[s] = coarse.ck(s, k);
        auto msc = tree_mean_stderr(cks_c);
        out.est.disc_err = std::abs(ms.mean - msc.mean);
        if (cks_c.size() == cks.size()) {
            std::vector<double> ex(cks.size());
            for (size_t s = 0; s < cks.size(); ++s) ex[s] = 2.0 * cks[s] - cks_c[s];
            auto mse = tree_mean_stderr(ex);
            out.est.value = mse.mean;
            out.est.stderr_ = mse.stderr_;
        }
        double sigma = std::max(out.est.stderr_, 1e-15);
        out.quad_converged =
            out.est.disc_err <= 3.0 * sigma || out.est.disc_err <= 5e-2 * std::abs(ms.mean) + 1e-12;
        out.est.unconverged = !out.quad_converged;
    }
    if (std::abs(out.est.value) > sanity_band_ck(k, est.field().lambda, q.norm2()))
        std::fprintf(stderr, "[c_km] warning: |c_%d,%d| = %s outside the sanity band\n", k, m,
                     format_double(out.est.value).c_str());
    if (with_split && k <= 2) out.split = leibniz_split_terms(est, m, q, rho0, mc, k, fine.points);
    return out;
}

// ---------------------------------------------------------------------------
// Expansion report: remainders R_k(rho) from the analytic-in-rho increment and
// the same table that defines the coefficients.
// ---------------------------------------------------------------------------

struct ExpansionReport {
    int m = 0, k = 1;
    double rho0 = 1;
    std::vector<double> rho_grid;
    std::vector<double> c_values;  // c_{j,m}, j = 1..k
    std::vector<double> c_stderr;
    std::vector<double> delta_series;  // per rho
    std::vector<double> delta_def;     // per rho (MC cross-check, optional)
    std::vector<double> delta_def_stderr;
    std::vector<double> remainder;  // R_k per rho
    std::vector<double> remainder_stderr;
    double fitted_slope = 0;
    bool slope_defined = false;
    bool noise_dominated = false;
    long n_outer = 1;
};

inline double fit_loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    std::vector<double> lx, ly;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (std::abs(ys[i]) > 0) {
            lx.push_back(std::log(xs[i]));
            ly.push_back(std::log(std::abs(ys[i])));
        }
    }
    if (lx.size() < 2) return 0;
    double mx = 0, my = 0;
    for (size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= static_cast<double>(lx.size());
    my /= static_cast<double>(lx.size());
    double num = 0, den = 0;
    for (size_t i = 0; i < lx.size(); ++i) {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    return den > 0 ? num / den : 0;
}

inline ExpansionReport expansion_report(const Estimator& est, int m, const Vec& q, double rho0,
                                        const std::vector<double>& rho_grid, int k, const McConfig& mc,
                                        bool with_delta_def_check = false) {
    for (double r : rho_grid)
        if (!(r > 0)) throw std::invalid_argument("expansion_report: rho grid must be positive");
    ExpansionReport rep;
    rep.m = m;
    rep.k = k;
    rep.rho0 = rho0;
    rep.rho_grid = rho_grid;

    TjTable tab = build_tj_table(est, m, q, rho0, mc, k + 1);
    rep.n_outer = tab.n_outer;
    const size_t S = tab.G_samples.size();
    for (int j = 1; j <= k; ++j) {
        std::vector<double> cs(S);
        for (size_t s = 0; s < S; ++s) cs[s] = tab.ck(s, j);
        auto ms = tree_mean_stderr(cs);
        rep.c_values.push_back(ms.mean);
        rep.c_stderr.push_back(ms.stderr_);
    }
    for (double rho : rho_grid) {
        std::vector<double> ds(S), rs(S);
        for (size_t s = 0; s < S; ++s) {
            ds[s] = tab.delta_series(s, rho);
            double partial = 0, fact = 1, pw = 1;
            for (int j = 1; j <= k; ++j) {
                pw *= rho;
                fact *= j;
                partial += tab.ck(s, j) * pw / fact;
            }
            rs[s] = ds[s] - partial;
        }
        auto msd = tree_mean_stderr(ds);
        auto msr = tree_mean_stderr(rs);
        rep.delta_series.push_back(msd.mean);
        rep.remainder.push_back(msr.mean);
        rep.remainder_stderr.push_back(msr.stderr_);
    }
    rep.fitted_slope = fit_loglog_slope(rho_grid, rep.remainder);
    for (double r : rep.remainder)
        if (std::abs(r) > 0) rep.slope_defined = true;
    if (!rep.remainder.empty()) {
        rep.noise_dominated = std::abs(rep.remainder[0]) < 2.0 * rep.remainder_stderr[0] &&
                              rep.remainder_stderr[0] > 0;
    }
    if (with_delta_def_check) {
        for (double rho : rho_grid) {
            MCEstimate d = delta_rho_def(est, m, q, rho0, rho, mc);
            rep.delta_def.push_back(d.value);
            rep.delta_def_stderr.push_back(d.stderr_);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Harmonic identity residual and the key-estimate probe.
// ---------------------------------------------------------------------------

/// Residual of the distinguishable-particle variational identity with added
/// sets E, F (bitmasks over shared positions). The outer quadrature runs over
/// the active region only: beyond the collar the integrand reduces to a
/// lower-order instance of the same identity.
inline MCEstimate harmonic_residual(const Estimator& est, int m, Subset maskE, Subset maskF,
                                    const Vec& q, double rho0, double rho, const McConfig& mc) {
    if (subset_size(maskE) > 2 || subset_size(maskF) > 2)
        throw std::invalid_argument("harmonic_residual: |E|, |F| <= 2");
    const int d = est.dim();
    const Box U = box_m(m, d);
    const double lambda = rho0 * U.volume();
    const Subset all = maskE | maskF;
    const int n_pos = all == 0 ? 0 : (32 - std::countl_zero(all));
    const long n_samples =
        (mc.exterior_mode == ExteriorMode::none && rho == 0) ? 1 : mc.n_outer;
    SolverOptions opts = mc.solver_options();

    std::vector<double> vals(static_cast<size_t>(n_samples), 0.0);
    WorkPool pool(mc.threads);
    pool.parallel_for(static_cast<size_t>(n_samples), [&](size_t s) {
        CounterRng rng(mc.seed, 2 * s);
        CounterRng rng_rho(mc.seed, 2 * s + 1);
        PointConfiguration ext(d);
        if (mc.exterior_mode == ExteriorMode::mc) ext = est_detail::sample_collar(rho0, U, rng);
        PointConfiguration w(d), ext_rho(d);
        if (rho > 0) {
            w = sample_poisson(rho, U, rng_rho);
            ext_rho = est_detail::sample_collar(rho, U, rng_rho);
        }
        PointConfiguration ext_joint = superpose(ext, ext_rho);
        const int nw = static_cast<int>(w.count());
        std::vector<Vec> w_pts;
        for (size_t i = 0; i < w.count(); ++i) w_pts.push_back(w.point(i));

        const int P =
            est_detail::points_for(U.side, mc.h, d * (mc.n_max + n_pos + nw), mc.max_unknowns);
        auto nodes = added_particle_nodes(U, P, std::max(4, (P - 1) / 2), mc.collar_nodes);
        const size_t K = n_pos == 0 ? 1 : nodes.size();

        double total = 0;
        std::vector<size_t> tup(static_cast<size_t>(std::max(n_pos, 1)), 0);
        for (;;) {
            double wt = 1;
            std::vector<Vec> eIn, eOut, fIn, fOut, eAll;
            for (int l = 0; l < n_pos; ++l) {
                const Subset bit = Subset{1} << l;
                if (!(all & bit)) continue;
                const QuadNode& nd = nodes[tup[static_cast<size_t>(l)]];
                wt *= nd.wt;
                if (maskE & bit) {
                    (nd.inside ? eIn : eOut).push_back(nd.pos);
                    eAll.push_back(nd.pos);
                }
                if (maskF & bit) (nd.inside ? fIn : fOut).push_back(nd.pos);
            }
            double inner = 0;
            for (int n = 1; n <= mc.n_max; ++n) {
                auto psi_base = est.dual_corrector(U, n, q, ext, P, opts);
                std::vector<double> psiE =
                    exp_detail::perturbed_corrector(est, U, n, q, ext, P, eIn, eOut, opts);
                std::vector<Vec> f_inside = w_pts;
                f_inside.insert(f_inside.end(), fIn.begin(), fIn.end());
                std::vector<double> psiF = exp_detail::perturbed_corrector(est, U, n, q, ext_joint, P,
                                                                           f_inside, fOut, opts);
                exp_detail::PairContext ctx{&est.field(), &psi_base->grid, &psi_base->exterior};
                inner += poisson_pmf(n, lambda) *
                         exp_detail::pair_sweep_harmonic(ctx, psiF, psiE, eAll, q);
            }
            total += wt * inner / (rho0 * U.volume());
            if (n_pos == 0) break;
            int l = n_pos - 1;
            for (; l >= 0; --l) {
                if (++tup[static_cast<size_t>(l)] < K) break;
                tup[static_cast<size_t>(l)] = 0;
            }
            if (l < 0) break;
        }
        vals[s] = total;
    });
    MCEstimate out;
    auto ms = tree_mean_stderr(vals);
    out.value = ms.mean;
    out.stderr_ = ms.stderr_;
    out.n_outer = n_samples;
    out.n_max = mc.n_max;
    out.seed = mc.seed;
    return out;
}

/// Probe of the key a-priori bound: for G subset F (WLOG the trailing indices),
///   int_{A^{F\G}} E[(1/(rho0|U|)) int_U | int_{A^G} D_F grad(psi) |^2 dmu ].
/// D_F kills particles beyond the collar, so the active restriction is exact.
inline MCEstimate key_estimate_probe(const Estimator& est, int m, int sizeF, int sizeG, const Vec& q,
                                     double rho0, const McConfig& mc) {
    if (sizeG > sizeF || sizeF > 3 || sizeF < 0)
        throw std::invalid_argument("key_estimate_probe: need G subset F, |F| <= 3");
    const int d = est.dim();
    const Box U = box_m(m, d);
    const double lambda = rho0 * U.volume();
    const long n_samples = mc.exterior_mode == ExteriorMode::none ? 1 : mc.n_outer;
    SolverOptions opts = mc.solver_options();
    const int n_free = sizeF - sizeG;

    std::vector<double> vals(static_cast<size_t>(n_samples), 0.0);
    WorkPool pool(mc.threads);
    pool.parallel_for(static_cast<size_t>(n_samples), [&](size_t s) {
        CounterRng rng(mc.seed, s);
        PointConfiguration ext = mc.exterior_mode == ExteriorMode::none
                                     ? PointConfiguration(d)
                                     : est_detail::sample_collar(rho0, U, rng);
        const int P = est_detail::points_for(U.side, mc.h, d * (mc.n_max + sizeF), mc.max_unknowns);
        auto nodes = added_particle_nodes(U, P, std::max(4, (P - 1) / 2), mc.collar_nodes);
        const size_t K = nodes.size();

        double total = 0;
        for (int n = 1; n <= mc.n_max; ++n) {
            auto psi = est.dual_corrector(U, n, q, ext, P, opts);
            const GridSpec& g = psi->grid;
            const auto stride = g.strides();
            const double h = g.h();
            std::vector<double> acc(g.total() * static_cast<size_t>(g.axes()));

            std::vector<size_t> tup_free(static_cast<size_t>(std::max(n_free, 1)), 0);
            double outer_sum = 0;
            for (;;) {  // over x_{F\G}
                double wt_free = 1;
                std::vector<Vec> fixed_pts;
                for (int l = 0; l < n_free; ++l) {
                    const QuadNode& nd = nodes[tup_free[static_cast<size_t>(l)]];
                    wt_free *= nd.wt;
                    fixed_pts.push_back(nd.pos);
                }
                std::fill(acc.begin(), acc.end(), 0.0);
                std::vector<size_t> tup_g(static_cast<size_t>(std::max(sizeG, 1)), 0);
                for (;;) {  // over x_G
                    double wt_g = 1;
                    std::vector<Vec> g_pts;
                    for (int l = 0; l < sizeG; ++l) {
                        const QuadNode& nd = nodes[tup_g[static_cast<size_t>(l)]];
                        wt_g *= nd.wt;
                        g_pts.push_back(nd.pos);
                    }
                    for (Subset S = 0; S < (Subset{1} << sizeF); ++S) {
                        std::vector<Vec> in_pts, out_pts;
                        for (int l = 0; l < sizeF; ++l) {
                            if (!(S & (Subset{1} << l))) continue;
                            const Vec& x = l < n_free ? fixed_pts[static_cast<size_t>(l)]
                                                      : g_pts[static_cast<size_t>(l - n_free)];
                            (U.contains(x) ? in_pts : out_pts).push_back(x);
                        }
                        double sign = (sizeF - subset_size(S)) % 2 ? -1.0 : 1.0;
                        std::vector<double> psiS =
                            exp_detail::perturbed_corrector(est, U, n, q, ext, P, in_pts, out_pts, opts);
                        GridIter it(g);
                        while (!it.done) {
                            for (int a = 0; a < g.axes(); ++a) {
                                double gr = detail::node_gradient(
                                    psiS, it.flat, it.idx[static_cast<size_t>(a)], g.points,
                                    stride[static_cast<size_t>(a)], h);
                                acc[it.flat * static_cast<size_t>(g.axes()) + static_cast<size_t>(a)] +=
                                    sign * wt_g * gr;
                            }
                            it.next();
                        }
                    }
                    if (sizeG == 0) break;
                    int l = sizeG - 1;
                    for (; l >= 0; --l) {
                        if (++tup_g[static_cast<size_t>(l)] < K) break;
                        tup_g[static_cast<size_t>(l)] = 0;
                    }
                    if (l < 0) break;
                }
                double sq = 0;
                for (double v : acc) sq += v * v;
                sq /= static_cast<double>(g.total());
                outer_sum += wt_free * sq;
                if (n_free == 0) break;
                int l = n_free - 1;
                for (; l >= 0; --l) {
                    if (++tup_free[static_cast<size_t>(l)] < K) break;
                    tup_free[static_cast<size_t>(l)] = 0;
                }
                if (l < 0) break;
            }
            total += poisson_pmf(n, lambda) * outer_sum;
        }
        vals[s] = total / (rho0 * U.volume());
    });
    MCEstimate out;
    auto ms = tree_mean_stderr(vals);
    out.value = ms.mean;
    out.stderr_ = ms.stderr_;
    out.n_outer = n_samples;
    out.n_max = mc.n_max;
    out.seed = mc.seed;
    return out;
}

// ---------------------------------------------------------------------------
// Continuity scan over the base density.
// ---------------------------------------------------------------------------

struct ContinuityRow {
    double rho0 = 0;
    AbarPair pair;
};

struct ContinuityScan {
    std::vector<ContinuityRow> rows;
    std::vector<double> modulus_abar;       // |abar(rho_{i+1}) - abar(rho_i)| / drho (max entry)
    std::vector<double> modulus_abar_star;
    bool ordering_ok = true;  // abar_* <= abar within 2 sigma at every grid point
};

inline ContinuityScan continuity_scan(const Estimator& est, int m, const std::vector<double>& rho0_grid,
                                      const McConfig& mc) {
    ContinuityScan out;
    for (double r : rho0_grid) {
        ContinuityRow row;
        row.rho0 = r;
        row.pair = abar_matrices(est, m, r, mc);  // shared seed across the grid
        out.rows.push_back(std::move(row));
    }
    const int d = est.dim();
    for (size_t i = 0; i < out.rows.size(); ++i) {
        const auto& p = out.rows[i].pair;
        SymMatrix gap = p.abar - p.abar_star;
        auto [lo, hi] = gap.eig_range();
        (void)hi;
        double sigma = 0;
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b)
                sigma = std::max(sigma, p.abar_stderr.at(a, b) + p.abar_star_stderr.at(a, b));
        if (lo < -2.0 * sigma - p.tail_nu - p.tail_nu_star) out.ordering_ok = false;
        if (i + 1 < out.rows.size()) {
            double drho = out.rows[i + 1].rho0 - out.rows[i].rho0;
            double ma = 0, ms = 0;
            for (int a = 0; a < d; ++a)
                for (int b = 0; b < d; ++b) {
                    ma = std::max(ma, std::abs(out.rows[i + 1].pair.abar.at(a, b) - p.abar.at(a, b)));
                    ms = std::max(ms,
                                  std::abs(out.rows[i + 1].pair.abar_star.at(a, b) - p.abar_star.at(a, b)));
                }
            out.modulus_abar.push_back(ma / drho);
            out.modulus_abar_star.push_back(ms / drho);
        }
    }
    return out;
}

}  // namespace bulkdiff
