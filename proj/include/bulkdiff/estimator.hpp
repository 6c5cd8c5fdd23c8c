#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bulkdiff/conductance.hpp"
#include "bulkdiff/corrector_cache.hpp"
#include "bulkdiff/geometry.hpp"
#include "bulkdiff/grid.hpp"
#include "bulkdiff/point_process.hpp"
#include "bulkdiff/rng.hpp"
#include "bulkdiff/solver.hpp"
#include "bulkdiff/workpool.hpp"

namespace bulkdiff {

struct TruncationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ExteriorMode { mc, none };

/// Knobs shared by every estimator run.
struct McConfig {
    long n_outer = 64;       // exterior replicas (ignored when exterior_mode = none)
    long n_outer_min = 8;    // floor of the per-count schedule in stratified runs
    int n_max = 3;           // interior particle-count truncation
    double h = 1.0 / 64;     // target grid spacing
    double tol = 1e-10;      // CG relative residual
    uint64_t seed = 1;
    ExteriorMode exterior_mode = ExteriorMode::mc;
    int refine_levels = 1;   // 2 = per-sample Richardson over (h, h/2)
    int collar_nodes = 8;    // collar quadrature nodes per unit length and side
    size_t max_unknowns = 2'000'000;
    double tail_rel_threshold = 0;  // >0: reject runs whose tail bound exceeds threshold*|value|
    int threads = 0;

    SolverOptions solver_options() const {
        SolverOptions o;
        o.tol = tol;
        o.max_unknowns = max_unknowns;
        return o;
    }
};

/// Scalar estimate with explicit error decomposition: MC replication error,
/// two-level discretization gap, and the particle-count truncation bracket.
struct MCEstimate {
    double value = 0;            // truncated mixture plus the extrapolated tail
    double value_truncated = 0;  // the bare sum over n <= n_max (the oracle's convention)
    double stderr_ = 0;
    double disc_err = 0;
    double tail_bound = 0;
    long n_outer = 0;
    int n_max = 0;
    int points = 0;
    uint64_t seed = 0;
    bool unconverged = false;

    double sigma() const { return std::sqrt(stderr_ * stderr_ + disc_err * disc_err); }
};

namespace est_detail {

inline int points_from_h(double side, double h) {
    int p = static_cast<int>(std::lround(side / h)) + 1;
    return std::max(p, 3);
}

inline int cap_points(int axes, size_t max_unknowns) {
    if (axes == 0) return 1 << 20;
    double p = std::floor(std::pow(static_cast<double>(max_unknowns), 1.0 / axes));
    return std::max(3, static_cast<int>(p));
}

inline int points_for(double side, double h, int axes, size_t max_unknowns) {
    return std::min(points_from_h(side, h), cap_points(axes, max_unknowns));
}

/// Mirrored refinement: one halving step below the base grid.
inline int coarsen(int points) { return std::max(3, (points - 1) / 2 + 1); }

/// Exterior collar sample at a given intensity: exact by thinning an enlarged box.
inline PointConfiguration sample_collar(double rho, const Box& U, CounterRng& rng) {
    if (rho <= 0) return PointConfiguration(U.dim());
    Box enlarged(U.center, U.side + 1.0);
    return restrict_collar(sample_poisson(rho, enlarged, rng), U, 0.5);
}

}  // namespace est_detail

/// Shared machinery: cached per-(n, exterior) dual solves and the truncated
/// Poisson mixture with its per-particle tail extrapolation.
class Estimator {
public:
    Estimator(ConductanceField field, int dim, std::shared_ptr<CorrectorCache> cache = nullptr)
        : field_(std::move(field)), dim_(dim), cache_(std::move(cache)) {}

    const ConductanceField& field() const { return field_; }
    int dim() const { return dim_; }

    std::shared_ptr<const DiscreteCorrector> dual_corrector(const Box& U, int n, const Vec& q,
                                                            const PointConfiguration& exterior,
                                                            int points, const SolverOptions& opts) const {
        GridSpec grid(U, n, points);
        auto solve = [&]() { return solve_dual(field_, grid, q, exterior, opts); };
        if (!cache_) return std::make_shared<const DiscreteCorrector>(solve());
        return cache_->get_or_solve(make_cache_key(field_, grid, q, exterior), solve);
    }

    struct MixtureValue {
        double value = 0;            // with the per-particle extrapolated tail
        double value_truncated = 0;  // bare sum over n <= n_max
        double tail_bound = 0;       // ellipticity bracket around the tail term
        std::vector<double> j_raw;   // per n
    };

    /// nu_*-sample for one frozen exterior: exact Poisson weights over particle
    /// counts, per-n grid solves, and the per-particle extrapolated tail
    ///   sum_{n>n_max} pmf(n) j_n/(rho0 V) ≈ P[N >= n_max] (j_{n_max}/n_max),
    /// bracketed by the ellipticity bounds on j_n/n.
    MixtureValue nu_star_mixture(const Box& U, const Vec& q, double rho0, int n_max,
                                 const PointConfiguration& exterior, double h,
                                 const McConfig& mc) const {
        MixtureValue out;
        const double lambda = rho0 * U.volume();
        out.j_raw.assign(static_cast<size_t>(n_max) + 1, 0.0);
        double partial = 0;
        SolverOptions opts = mc.solver_options();
        for (int n = 1; n <= n_max; ++n) {
            int pts = est_detail::points_for(U.side, h, dim_ * n, mc.max_unknowns);
            auto corr = dual_corrector(U, n, q, exterior, pts, opts);
            out.j_raw[static_cast<size_t>(n)] = corr->j_raw;
            partial += poisson_pmf(n, lambda) * corr->j_raw;
        }
        partial /= rho0 * U.volume();
        const double tail_mass = poisson_tail(n_max, lambda);
        const double jhat = n_max >= 1 ? out.j_raw[static_cast<size_t>(n_max)] / n_max : 0.0;
        // tail: sum_{n>n_max} pmf(n) n jhat/(rho0 V) = jhat P[N >= n_max], using lambda = rho0 V
        out.value_truncated = partial;
        out.value = partial + tail_mass * jhat;
        const double lo = q.norm2() / (2.0 * field_.lambda);
        const double hi = q.norm2() / 2.0;
        out.tail_bound = tail_mass * std::max(hi - jhat, jhat - lo);
        return out;
    }

    ConductanceField field_;
    int dim_;
    std::shared_ptr<CorrectorCache> cache_;
};

// ---------------------------------------------------------------------------
// nu_* by outer replication over the exterior collar.
// ---------------------------------------------------------------------------

inline MCEstimate estimate_nu_star(const Estimator& est, int m, const Vec& q, double rho0,
                                   const McConfig& mc) {
    if (!(rho0 > 0)) throw std::invalid_argument("estimate_nu_star: rho0 must be positive");
    if (mc.n_max < 1) throw std::invalid_argument("estimate_nu_star: n_max >= 1 required");
    const Box U = box_m(m, est.dim());
    const long n_samples = mc.exterior_mode == ExteriorMode::none ? 1 : mc.n_outer;

    std::vector<double> vals(static_cast<size_t>(n_samples));
    std::vector<double> vals_trunc(static_cast<size_t>(n_samples));
    std::vector<double> tails(static_cast<size_t>(n_samples));
    std::vector<double> coarse(static_cast<size_t>(n_samples), 0.0);
    std::vector<double> coarse_trunc(static_cast<size_t>(n_samples), 0.0);
    WorkPool pool(mc.threads);
    pool.parallel_for(static_cast<size_t>(n_samples), [&](size_t s) {
        CounterRng rng(mc.seed, s);
        PointConfiguration ext = mc.exterior_mode == ExteriorMode::none
                                     ? PointConfiguration(est.dim())
                                     : est_detail::sample_collar(rho0, U, rng);
        auto fine = est.nu_star_mixture(U, q, rho0, mc.n_max, ext, mc.h, mc);
        vals[s] = fine.value;
        vals_trunc[s] = fine.value_truncated;
        tails[s] = fine.tail_bound;
        if (mc.refine_levels >= 2) {
            auto c = est.nu_star_mixture(U, q, rho0, mc.n_max, ext, mc.h * 2.0, mc);
            coarse[s] = c.value;
            coarse_trunc[s] = c.value_truncated;
        }
    });

    MCEstimate out;
    out.n_outer = n_samples;
    out.n_max = mc.n_max;
    out.seed = mc.seed;
    out.points = est_detail::points_for(U.side, mc.h, est.dim(), mc.max_unknowns);
    if (mc.refine_levels >= 2) {
        std::vector<double> extrap(vals.size()), extrap_t(vals.size());
        for (size_t i = 0; i < vals.size(); ++i) {
            extrap[i] = 2.0 * vals[i] - coarse[i];
            extrap_t[i] = 2.0 * vals_trunc[i] - coarse_trunc[i];
        }
        auto ms = tree_mean_stderr(extrap);
        auto msf = tree_mean_stderr(vals);
        auto msc = tree_mean_stderr(coarse);
        out.value = ms.mean;
        out.value_truncated = tree_mean_stderr(extrap_t).mean;
        out.stderr_ = ms.stderr_;
        out.disc_err = std::abs(msf.mean - msc.mean);
    } else {
        auto ms = tree_mean_stderr(vals);
        out.value = ms.mean;
        out.value_truncated = tree_mean_stderr(vals_trunc).mean;
        out.stderr_ = ms.stderr_;
    }
    out.tail_bound = tree_sum(tails) / static_cast<double>(n_samples);
    if (mc.tail_rel_threshold > 0 && out.tail_bound > mc.tail_rel_threshold * std::abs(out.value))
        throw TruncationError("estimate_nu_star: truncation tail " + format_double(out.tail_bound) +
                              " above threshold; increase n_max");
    return out;
}

// ---------------------------------------------------------------------------
// nu by the exterior-free particle-count mixture (deterministic).
// ---------------------------------------------------------------------------

inline MCEstimate estimate_nu(const Estimator& est, int m, const Vec& p, double rho0,
                              const McConfig& mc) {
    if (!(rho0 > 0)) throw std::invalid_argument("estimate_nu: rho0 must be positive");
    if (mc.n_max < 1) throw std::invalid_argument("estimate_nu: n_max >= 1 required");
    const Box U = box_m(m, est.dim());
    const double lambda = rho0 * U.volume();
    const int axes_max = est.dim() * mc.n_max;
    const int pts = est_detail::points_for(U.side, mc.h, axes_max, mc.max_unknowns);

    auto level_value = [&](int points, double* tail_out, double* trunc_out) {
        PrimalResult res =
            solve_primal(est.field(), U, p, mc.n_max, points, rho0, mc.solver_options());
        double ehat = res.raw_energy[static_cast<size_t>(mc.n_max)] / mc.n_max;
        double tail_mass = poisson_tail(mc.n_max, lambda);
        // tail: sum_{n>n_max} pmf(n) n ehat/(2 rho0 V) = ehat P[N >= n_max]/2, lambda = rho0 V
        double value = res.value + tail_mass * ehat / 2.0;
        const double lo = p.norm2();
        const double hi = p.norm2() * est.field().lambda;
        if (tail_out) *tail_out = tail_mass / 2.0 * std::max(hi - ehat, ehat - lo);
        if (trunc_out) *trunc_out = res.value;
        return value;
    };

    MCEstimate out;
    out.n_outer = 0;
    out.n_max = mc.n_max;
    out.seed = mc.seed;
    out.points = pts;
    double tail = 0, trunc = 0;
    double fine = level_value(pts, &tail, &trunc);
    if (mc.refine_levels >= 2) {
        double trunc_c = 0;
        double coarse = level_value(est_detail::coarsen(pts), nullptr, &trunc_c);
        out.value = 2.0 * fine - coarse;
        out.value_truncated = 2.0 * trunc - trunc_c;
        out.disc_err = std::abs(fine - coarse);
    } else {
        out.value = fine;
        out.value_truncated = trunc;
    }
    out.tail_bound = tail;
    if (mc.tail_rel_threshold > 0 && out.tail_bound > mc.tail_rel_threshold * std::abs(out.value))
        throw TruncationError("estimate_nu: truncation tail above threshold; increase n_max");
    return out;
}

// ---------------------------------------------------------------------------
// Effective matrices by polarization.
// ---------------------------------------------------------------------------

struct AbarPair {
    SymMatrix abar;          // from nu
    SymMatrix abar_star;     // from nu_* (inverted polarization)
    SymMatrix abar_stderr;   // entrywise sigma (stderr + disc combined)
    SymMatrix abar_star_stderr;
    double tail_nu = 0, tail_nu_star = 0;
    long n_outer = 0;
};

/// Directions used for polarization: basis vectors, then e_i + e_j pairs.
inline std::vector<Vec> polarization_directions(int d) {
    std::vector<Vec> dirs;
    for (int i = 0; i < d; ++i) dirs.push_back(Vec::unit(d, i));
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) dirs.push_back(Vec::unit(d, i) + Vec::unit(d, j));
    return dirs;
}

inline SymMatrix matrix_from_quadratic(int d, const std::vector<double>& two_nu) {
    // two_nu holds q.Mq for each polarization direction
    SymMatrix M(d);
    for (int i = 0; i < d; ++i) M.at(i, i) = two_nu[static_cast<size_t>(i)];
    size_t k = static_cast<size_t>(d);
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            M.set(i, j, (two_nu[k] - two_nu[static_cast<size_t>(i)] - two_nu[static_cast<size_t>(j)]) / 2.0);
            ++k;
        }
    return M;
}

inline AbarPair abar_matrices(const Estimator& est, int m, double rho0, const McConfig& mc) {
    const int d = est.dim();
    const Box U = box_m(m, d);
    auto dirs = polarization_directions(d);
    AbarPair out;
    out.n_outer = mc.exterior_mode == ExteriorMode::none ? 1 : mc.n_outer;

    // abar: deterministic primal runs per direction
    std::vector<double> two_nu;
    double tail_nu = 0, disc_nu = 0;
    for (const auto& p : dirs) {
        MCEstimate e = estimate_nu(est, m, p, rho0, mc);
        two_nu.push_back(2.0 * e.value);
        tail_nu = std::max(tail_nu, 2.0 * e.tail_bound);
        disc_nu = std::max(disc_nu, 2.0 * e.disc_err);
    }
    out.abar = matrix_from_quadratic(d, two_nu);
    out.abar_stderr = SymMatrix::isotropic(d, disc_nu + tail_nu);
    out.tail_nu = tail_nu;

    // abar_*: per-sample inverted polarization, shared exterior across directions
    const long n_samples = out.n_outer;
    std::vector<SymMatrix> mats(static_cast<size_t>(n_samples), SymMatrix(d));
    std::vector<double> tails(static_cast<size_t>(n_samples), 0.0);
    WorkPool pool(mc.threads);
    pool.parallel_for(static_cast<size_t>(n_samples), [&](size_t s) {
        CounterRng rng(mc.seed, s);
        PointConfiguration ext = mc.exterior_mode == ExteriorMode::none
                                     ? PointConfiguration(d)
                                     : est_detail::sample_collar(rho0, U, rng);
        std::vector<double> two_nu_star;
        double tl = 0;
        for (const auto& q : dirs) {
            auto v = est.nu_star_mixture(U, q, rho0, mc.n_max, ext, mc.h, mc);
            two_nu_star.push_back(2.0 * v.value);
            tl = std::max(tl, 2.0 * v.tail_bound);
        }
        mats[s] = matrix_from_quadratic(d, two_nu_star).inverse();
        tails[s] = tl;
    });
    SymMatrix mean(d), var(d);
    for (const auto& M : mats)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) mean.at(i, j) += M.at(i, j) / static_cast<double>(n_samples);
    for (const auto& M : mats)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                var.at(i, j) += std::pow(M.at(i, j) - mean.at(i, j), 2) / static_cast<double>(n_samples);
    SymMatrix se(d);
    if (n_samples > 1)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                se.at(i, j) = std::sqrt(var.at(i, j) / static_cast<double>(n_samples - 1));
    out.abar_star = mean;
    out.abar_star_stderr = se;
    // fold the tail bracket through the inverse: relative bound is preserved up
    // to the ellipticity constants, reported as an additive term.
    out.tail_nu_star = tree_sum(tails) / static_cast<double>(n_samples);
    return out;
}

// ---------------------------------------------------------------------------
// Density increments Delta^rho_m: definition route and representation route.
// ---------------------------------------------------------------------------

/// Per-count sample schedule: terms with tiny Poisson weight get fewer replicas.
inline long stratified_samples(const McConfig& mc, int n) {
    long s = mc.n_outer >> (n - 1);
    return std::max(mc.n_outer_min, s);
}

/// q.abar_*^{-1}(rho0+rho) q - q.abar_*^{-1}(rho0) q with common random numbers:
/// per particle count n, the rho0-collar sample is shared between the two
/// densities and the higher density adds an independent rho-collar sample.
/// Counts are estimated separately (stratified) and recombined with exact
/// Poisson weights; the per-particle tails are extrapolated as in nu_*.
inline MCEstimate delta_rho_def(const Estimator& est, int m, const Vec& q, double rho0, double rho,
                                const McConfig& mc, bool common_random_numbers = true) {
    if (!(rho0 > 0) || !(rho0 + rho > 0))
        throw std::invalid_argument("delta_rho_def: need rho0 > 0 and rho0 + rho > 0");
    const int d = est.dim();
    const Box U = box_m(m, d);
    const double base_rho = std::min(rho0, rho0 + rho);
    const double extra = std::abs(rho);
    const double lam_lo = base_rho * U.volume();
    const double lam_hi = std::max(rho0, rho0 + rho) * U.volume();
    const double norm_lo = base_rho * U.volume();
    const double norm_hi = std::max(rho0, rho0 + rho) * U.volume();
    SolverOptions opts = mc.solver_options();

    MCEstimate out;
    out.n_max = mc.n_max;
    out.seed = mc.seed;
    double mean = 0, var = 0, tail = 0;
    const bool frozen = mc.exterior_mode == ExteriorMode::none;
    for (int n = 1; n <= mc.n_max; ++n) {
        const long S = frozen ? 1 : stratified_samples(mc, n);
        std::vector<double> vals(static_cast<size_t>(S));
        WorkPool pool(mc.threads);
        pool.parallel_for(static_cast<size_t>(S), [&](size_t s2) {
            uint64_t stream = (static_cast<uint64_t>(n) << 32) | s2;
            CounterRng rng_base(mc.seed, 2 * stream);
            CounterRng rng_extra(mc.seed, 2 * stream + 1);
            PointConfiguration ext_lo(d), ext_hi(d);
            if (!frozen) {
                ext_lo = est_detail::sample_collar(base_rho, U, rng_base);
                PointConfiguration ext_extra = est_detail::sample_collar(extra, U, rng_extra);
                if (!common_random_numbers) {
                    CounterRng rng_ind(mc.seed, 3 * stream + 0x51ed2701);
                    PointConfiguration ind = est_detail::sample_collar(base_rho, U, rng_ind);
                    ext_hi = superpose(ind, ext_extra);
                } else {
                    ext_hi = superpose(ext_lo, ext_extra);
                }
            }
            auto one_level = [&](double h) {
                int pts = est_detail::points_for(U.side, h, d * n, mc.max_unknowns);
                double j_hi = est.dual_corrector(U, n, q, ext_hi, pts, opts)->j_raw;
                double j_lo = est.dual_corrector(U, n, q, ext_lo, pts, opts)->j_raw;
                double term = poisson_pmf(n, lam_hi) * j_hi / norm_hi -
                              poisson_pmf(n, lam_lo) * j_lo / norm_lo;
                if (n == mc.n_max) {
                    // extrapolated per-particle tails, as in the nu_* mixture
                    term += poisson_tail(n, lam_hi) * j_hi / n - poisson_tail(n, lam_lo) * j_lo / n;
                }
                return term;
            };
            double v = one_level(mc.h);
            if (mc.refine_levels >= 2) v = 2.0 * v - one_level(mc.h * 2.0);
            vals[s2] = 2.0 * v;
        });
        auto ms = tree_mean_stderr(vals);
        mean += ms.mean;
        var += ms.stderr_ * ms.stderr_;
        if (n == mc.n_max) {
            const double lo_b = q.norm2() / (2.0 * est.field().lambda);
            const double hi_b = q.norm2() / 2.0;
            tail = 2.0 * (poisson_tail(n, lam_hi) + poisson_tail(n, lam_lo)) * (hi_b - lo_b) / 2.0;
        }
        out.n_outer += S;
    }
    out.value = rho >= 0 ? mean : -mean;
    out.stderr_ = std::sqrt(var);
    out.tail_bound = tail;
    return out;
}

/// Representation route: E[(1/(rho0 |U|)) int grad(psi).(a - a^rho) grad(psi^rho) dmu],
/// sampling mu_rho conditioned on being nonempty (the empty event contributes
/// zero exactly) and pinning its interior particles by multilinear contraction.
/// Particle counts are stratified like the definition route.
inline MCEstimate delta_rho_repr(const Estimator& est, int m, const Vec& q, double rho0, double rho,
                                 const McConfig& mc) {
    if (!(rho0 > 0) || rho < 0)
        throw std::invalid_argument("delta_rho_repr: need rho0 > 0 and rho >= 0");
    const int d = est.dim();
    const Box U = box_m(m, d);
    const double lambda0 = rho0 * U.volume();
    SolverOptions opts = mc.solver_options();
    Box wide(U.center, U.side + 1.0);
    const double p_nonempty = rho > 0 ? -std::expm1(-rho * wide.volume()) : 0.0;

    MCEstimate out;
    out.n_max = mc.n_max;
    out.seed = mc.seed;
    if (p_nonempty == 0.0) return out;

    double mean = 0, var = 0;
    for (int n = 1; n <= mc.n_max; ++n) {
        const long S = stratified_samples(mc, n);
        std::vector<double> vals(static_cast<size_t>(S), 0.0);
        WorkPool pool(mc.threads);
        pool.parallel_for(static_cast<size_t>(S), [&](size_t s2) {
            uint64_t stream = (static_cast<uint64_t>(n) << 32) | s2;
            CounterRng rng_mu(mc.seed, 2 * stream);
            CounterRng rng_rho(mc.seed, 2 * stream + 1);
            PointConfiguration ext_mu(d);
            if (mc.exterior_mode == ExteriorMode::mc)
                ext_mu = est_detail::sample_collar(rho0, U, rng_mu);
            PointConfiguration mu_rho(d);
            do {
                mu_rho = sample_poisson(rho, wide, rng_rho);
            } while (mu_rho.empty());
            PointConfiguration w = restrict_to(mu_rho, U);
            w.region.reset();
            PointConfiguration ext_rho = restrict_collar(mu_rho, U, 0.5);
            if (w.empty() && ext_rho.empty()) return;  // beyond-collar points are inert
            PointConfiguration ext_joint = superpose(ext_mu, ext_rho);
            const int nw = static_cast<int>(w.count());

            auto one_level = [&](double h) {
                int pts = est_detail::points_for(U.side, h, d * (n + nw), mc.max_unknowns);
                auto psi = est.dual_corrector(U, n, q, ext_mu, pts, opts);
                auto psi_big = est.dual_corrector(U, n + nw, q, ext_joint, pts, opts);
                std::vector<PinnedParticle> pins;
                for (int k = 0; k < nw; ++k) pins.push_back({n + k, w.point(static_cast<size_t>(k))});
                GridSpec rg;
                std::vector<double> sliced =
                    contract_particles(psi_big->grid, psi_big->values, pins, &rg);

                const GridSpec& g = psi->grid;
                const auto stride = g.strides();
                const double hh = g.h();
                const int P = g.points;
                double pair = 0;
                PointConfiguration centered(d);
                GridIter it(g);
                while (!it.done) {
                    for (int i = 0; i < n; ++i) {
                        Vec yi(d);
                        for (int c = 0; c < d; ++c)
                            yi[c] = g.node_coord(i * d + c, it.idx[static_cast<size_t>(i * d + c)]);
                        bool near = false;
                        for (size_t e = 0; e < w.count() && !near; ++e)
                            near = (w.point(e) - yi).norm2() < 0.25;
                        for (size_t e = 0; e < ext_rho.count() && !near; ++e)
                            near = (ext_rho.point(e) - yi).norm2() < 0.25;
                        if (!near) continue;
                        centered.coords.clear();
                        centered.push(Vec(d));
                        for (int j = 0; j < n; ++j) {
                            if (j == i) continue;
                            Vec yj(d);
                            for (int c = 0; c < d; ++c)
                                yj[c] =
                                    g.node_coord(j * d + c, it.idx[static_cast<size_t>(j * d + c)]) -
                                    yi[c];
                            centered.push(yj);
                        }
                        for (size_t e = 0; e < psi->exterior.count(); ++e)
                            centered.push(psi->exterior.point(e) - yi);
                        SymMatrix a0 = est.field().eval_origin_raw(d, centered);
                        for (size_t e = 0; e < w.count(); ++e) centered.push(w.point(e) - yi);
                        for (size_t e = 0; e < ext_rho.count(); ++e)
                            centered.push(ext_rho.point(e) - yi);
                        SymMatrix a1 = est.field().eval_origin_raw(d, centered);
                        SymMatrix diff = a0 - a1;
                        bool nonzero = false;
                        for (int ci = 0; ci < d && !nonzero; ++ci)
                            for (int cj = ci; cj < d && !nonzero; ++cj)
                                if (diff.at(ci, cj) != 0.0) nonzero = true;
                        if (!nonzero) continue;
                        Vec g0(d), g1(d);
                        for (int c = 0; c < d; ++c) {
                            int axis = i * d + c;
                            g0[c] = detail::node_gradient(psi->values, it.flat,
                                                          it.idx[static_cast<size_t>(axis)], P,
                                                          stride[static_cast<size_t>(axis)], hh);
                            g1[c] = detail::node_gradient(sliced, it.flat,
                                                          it.idx[static_cast<size_t>(axis)], P,
                                                          stride[static_cast<size_t>(axis)], hh);
                        }
                        pair += dot(g0, diff.apply(g1));
                    }
                    it.next();
                }
                return pair / static_cast<double>(g.total());
            };
            double v = one_level(mc.h);
            if (mc.refine_levels >= 2) v = 2.0 * v - one_level(mc.h * 2.0);
            vals[s2] = p_nonempty * poisson_pmf(n, lambda0) * v / (rho0 * U.volume());
        });
        auto ms = tree_mean_stderr(vals);
        mean += ms.mean;
        var += ms.stderr_ * ms.stderr_;
        out.n_outer += S;
    }
    out.value = mean;
    out.stderr_ = std::sqrt(var);
    return out;
}

}  // namespace bulkdiff
