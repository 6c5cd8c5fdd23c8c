#pragma once

#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bulkdiff/oracle.hpp"
#include "bulkdiff/runner.hpp"

namespace bulkdiff {

struct CriterionResult {
    int id = 0;
    std::string name;
    bool pass = false;
    bool conditional = false;  // passed via an explicit documented escape hatch
    std::string details;
};

struct AcceptanceConfig {
    uint64_t seed = 20240817;
    int threads = 0;
    std::string cache_dir;
};

// ---------------------------------------------------------------------------
// Oracle fixtures: reference values consumed read-only by the criteria.
// ---------------------------------------------------------------------------

inline nlohmann::json oracle_result_to_json(const oracle::OracleResult& r) {
    return {{"value", r.value},
            {"error", r.error_estimate},
            {"order", r.observed_order},
            {"converged", r.converged},
            {"method", r.method},
            {"ladder_points", r.ladder_points},
            {"ladder_values", r.ladder_values}};
}

/// Small-scale reference values for the CrowdingField acceptance runs:
/// per-n dual energies (with and without a frozen exterior point), truncated
/// nu_* series at two densities, and the first density-derivative c_1.
inline nlohmann::json build_acceptance_fixtures(const AcceptanceConfig& cfg = {}) {
    (void)cfg;
    nlohmann::json fx;
    auto field = crowding_field(2.0, 0.25);
    const Box U = box_m(0, 1);
    const Vec q = Vec::scalar(1.0);
    fx["meta"] = {{"field", field.spec}, {"field_id", field.field_id}, {"dim", 1},
                  {"box_side", U.side},  {"q", {q[0]}}};

    PointConfiguration empty(1), one_pt(1);
    one_pt.push(Vec(1, {0.55}));

    nlohmann::json duals = nlohmann::json::array();
    auto add_dual = [&](int n, const PointConfiguration& ext, const std::vector<int>& ladder,
                        const std::string& tag) {
        auto r = oracle::oracle_dual_energy(field, U, n, q, ext, ladder);
        nlohmann::json j = oracle_result_to_json(r);
        j["n"] = n;
        j["exterior"] = ext.coords;
        j["tag"] = tag;
        duals.push_back(j);
    };
    add_dual(1, empty, {65, 129, 257}, "n1_empty");
    add_dual(2, empty, {129, 257, 513}, "n2_empty");
    add_dual(2, one_pt, {33, 65, 129}, "n2_onept");
    fx["dual_energies"] = duals;

    nlohmann::json series = nlohmann::json::array();
    for (double rho0 : {0.5, 1.0}) {
        auto r = oracle::oracle_nu_star_series(field, U, q, rho0, 2,
                                               {{}, {65, 129, 257}, {33, 65, 129}});
        nlohmann::json j = {{"rho0", rho0},
                            {"n_max", 2},
                            {"value", r.total.value},
                            {"error", r.total.error_estimate},
                            {"tail_bound", r.tail_bound},
                            {"converged", r.total.converged}};
        for (int n = 1; n <= 2; ++n)
            j["per_n"].push_back(oracle_result_to_json(r.per_n[static_cast<size_t>(n)]));
        series.push_back(j);
    }
    fx["nu_star_series"] = series;

    oracle::C1Options c1o;
    c1o.n_max = 2;
    c1o.ladder_points = {9, 17, 33};
    c1o.collar_nodes_per_side = 16;
    auto c1 = oracle::oracle_c1(field, U, q, 1.0, c1o);
    nlohmann::json jc1 = oracle_result_to_json(c1.total);
    jc1["rho0"] = 1.0;
    jc1["n_max"] = c1o.n_max;
    jc1["collar_nodes"] = c1o.collar_nodes_per_side;
    jc1["collar_error"] = c1.collar_quadrature_error;
    fx["c1"] = jc1;
    return fx;
}

// ---------------------------------------------------------------------------
// The acceptance criteria.
// ---------------------------------------------------------------------------

namespace acc_detail {

inline std::string fmt(double x) { return format_double(x); }

inline McConfig base_mc(const AcceptanceConfig& cfg) {
    McConfig mc;
    mc.seed = cfg.seed;
    mc.threads = cfg.threads;
    return mc;
}

struct Check {
    bool ok = true;
    std::string log;
    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            log += " FAIL[" + what + "]";
        }
    }
    void note(const std::string& what) { log += " " + what; }
};

}  // namespace acc_detail

/// 1. Constant-field exactness of nu, nu_* and vanishing c_{k,m}.
inline CriterionResult criterion_constant_exactness(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    for (double c : {1.0, 1.5, 2.0}) {
        Estimator est(constant_field(c), 1, std::make_shared<CorrectorCache>(cfg.cache_dir));
        McConfig mc = base_mc(cfg);
        mc.exterior_mode = ExteriorMode::none;
        mc.n_max = 2;
        mc.h = 1.0 / 64;
        Vec q = Vec::scalar(1.0);
        MCEstimate ns = estimate_nu_star(est, 0, q, 1.0, mc);
        double want_star = 0.5 / c;
        ck.expect(std::abs(ns.value - want_star) <= ns.tail_bound + 1e-6,
                  "nu*(c=" + fmt(c) + ")=" + fmt(ns.value));
        McConfig mcp = mc;
        mcp.h = 1.0 / 32;
        MCEstimate nv = estimate_nu(est, 0, q, 1.0, mcp);
        double want = 0.5 * c;
        ck.expect(std::abs(nv.value - want) <= nv.tail_bound + 1e-6,
                  "nu(c=" + fmt(c) + ")=" + fmt(nv.value));
        McConfig mck = base_mc(cfg);
        mck.exterior_mode = ExteriorMode::none;
        mck.n_max = 1;
        mck.h = 1.0 / 16;
        mck.collar_nodes = 4;
        for (int k = 1; k <= 2; ++k) {
            CkmEstimate ce = c_km(est, 0, q, 1.0, k, mck);
            ck.expect(std::abs(ce.est.value) <= 3.0 * ce.est.stderr_ + 1e-12,
                      "c_" + std::to_string(k) + "(c=" + fmt(c) + ")=" + fmt(ce.est.value));
            ck.expect(ce.est.stderr_ <= 1e-4, "c_k stderr");
        }
    }
    return {1, "constant-field exactness", ck.ok, false, ck.log.empty() ? "all exact" : ck.log};
}

struct SandwichRun {
    std::string label;
    int m = 0;
    double rho0 = 1;
    AbarPair pair;
    double lambda_ell = 2;
};

/// Shared runs for criteria 2 and 3.
inline std::vector<SandwichRun> sandwich_runs(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    std::vector<SandwichRun> out;
    auto cache = std::make_shared<CorrectorCache>(cfg.cache_dir);
    auto run = [&](const ConductanceField& f, int dim, int m, double rho0, McConfig mc,
                   const std::string& label) {
        Estimator est(f, dim, cache);
        SandwichRun r;
        r.label = label;
        r.m = m;
        r.rho0 = rho0;
        r.lambda_ell = f.lambda;
        r.pair = abar_matrices(est, m, rho0, mc);
        out.push_back(std::move(r));
    };
    auto crowd = crowding_field(2.0, 0.25);
    for (double rho0 : {0.5, 1.0, 2.0}) {
        McConfig mc = base_mc(cfg);
        mc.n_max = 3;
        mc.h = 1.0 / 32;
        mc.n_outer = 48;
        run(crowd, 1, 0, rho0, mc, "crowding d=1 m=0 rho0=" + fmt(rho0));
        McConfig mc1 = mc;
        mc1.n_outer = 24;  // same physical spacing h; the side-3 box caps n=3 at P=97
        run(crowd, 1, 1, rho0, mc1, "crowding d=1 m=1 rho0=" + fmt(rho0));
    }
    {
        McConfig mc = base_mc(cfg);
        mc.n_max = 3;
        mc.h = 1.0 / 32;
        mc.n_outer = 32;
        run(smooth_pair_field(2.0), 1, 0, 1.0, mc, "smooth_pair d=1 m=0 rho0=1");
        run(constant_field(1.5), 1, 0, 1.0, mc, "constant(1.5) d=1 m=0 rho0=1");
    }
    {
        McConfig mc = base_mc(cfg);
        mc.n_max = 2;
        mc.h = 1.0 / 16;
        mc.n_outer = 16;
        run(crowd, 2, 0, 0.5, mc, "crowding d=2 m=0 rho0=0.5");
    }
    return out;
}

/// 2. Ellipticity sandwich Id <= abar_* <= abar <= Lambda Id.
inline CriterionResult criterion_sandwich(const std::vector<SandwichRun>& runs) {
    using namespace acc_detail;
    Check ck;
    for (const auto& r : runs) {
        const auto& p = r.pair;
        int d = p.abar.dim;
        double sigma = 0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                sigma = std::max(sigma, p.abar_stderr.at(i, j) + p.abar_star_stderr.at(i, j));
        double slack = 2.0 * sigma + p.tail_nu + p.tail_nu_star + 1e-9;
        auto lo_star = (p.abar_star - SymMatrix::identity(d)).eig_range().first;
        auto gap = (p.abar - p.abar_star).eig_range().first;
        auto hi = (SymMatrix::isotropic(d, r.lambda_ell) - p.abar).eig_range().first;
        ck.expect(lo_star >= -slack, r.label + ": Id<=abar* (" + fmt(lo_star) + ")");
        ck.expect(gap >= -slack, r.label + ": abar*<=abar (" + fmt(gap) + ")");
        ck.expect(hi >= -slack, r.label + ": abar<=Lambda (" + fmt(hi) + ")");
    }
    // duality ordering across box sizes: abar_*(box_m) <= abar(box_n) + 5 sigma
    for (const auto& ra : runs) {
        if (ra.label.find("crowding d=1") == std::string::npos) continue;
        for (const auto& rb : runs) {
            if (rb.label.find("crowding d=1") == std::string::npos || ra.rho0 != rb.rho0) continue;
            double star = ra.pair.abar_star.at(0, 0);
            double a = rb.pair.abar.at(0, 0);
            double sigma = ra.pair.abar_star_stderr.at(0, 0) + rb.pair.abar_stderr.at(0, 0) +
                           ra.pair.tail_nu_star + rb.pair.tail_nu;
            ck.expect(star <= a + 5.0 * sigma, "cross ordering " + ra.label + " vs " + rb.label);
        }
    }
    return {2, "ellipticity sandwich", ck.ok, false,
            ck.ok ? std::to_string(runs.size()) + " configurations inside the band (incl. cross-m ordering)"
                  : ck.log};
}

/// 3. Monotonicity in the box size for CrowdingField with paired seeds.
inline CriterionResult criterion_monotonicity(const std::vector<SandwichRun>& runs) {
    using namespace acc_detail;
    Check ck;
    for (double rho0 : {0.5, 1.0, 2.0}) {
        const SandwichRun *r0 = nullptr, *r1 = nullptr;
        for (const auto& r : runs) {
            if (r.label.find("crowding d=1") == std::string::npos || r.rho0 != rho0) continue;
            (r.m == 0 ? r0 : r1) = &r;
        }
        if (!r0 || !r1) continue;
        double star0 = r0->pair.abar_star.at(0, 0), star1 = r1->pair.abar_star.at(0, 0);
        double a0 = r0->pair.abar.at(0, 0), a1 = r1->pair.abar.at(0, 0);
        double sig_star = std::sqrt(std::pow(r0->pair.abar_star_stderr.at(0, 0), 2) +
                                    std::pow(r1->pair.abar_star_stderr.at(0, 0), 2)) +
                          r0->pair.tail_nu_star + r1->pair.tail_nu_star;
        double sig_a = r0->pair.abar_stderr.at(0, 0) + r1->pair.abar_stderr.at(0, 0) +
                       r0->pair.tail_nu + r1->pair.tail_nu;
        ck.expect(star0 <= star1 + 2.0 * sig_star,
                  "abar*(m0)<=abar*(m1) rho0=" + fmt(rho0) + " (" + fmt(star0) + " vs " + fmt(star1) + ")");
        ck.expect(a1 <= a0 + 2.0 * sig_a,
                  "abar(m1)<=abar(m0) rho0=" + fmt(rho0) + " (" + fmt(a1) + " vs " + fmt(a0) + ")");
        ck.note("rho0=" + fmt(rho0) + ": abar*=" + fmt(star0) + "->" + fmt(star1) +
                " abar=" + fmt(a0) + "->" + fmt(a1) + ";");
    }
    return {3, "monotonicity in m", ck.ok, false, ck.log};
}

/// 4. Oracle agreement: per-n energies and the truncated nu_* series.
inline CriterionResult criterion_oracle_agreement(const nlohmann::json& fx,
                                                  const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    auto field = crowding_field(2.0, 0.25);
    auto cache = std::make_shared<CorrectorCache>(cfg.cache_dir);
    Estimator est(field, 1, cache);
    const Box U = box_m(0, 1);
    const Vec q = Vec::scalar(1.0);
    SolverOptions opts;

    for (const auto& dj : fx.at("dual_energies")) {
        int n = dj.at("n");
        PointConfiguration ext(1);
        for (double x : dj.at("exterior").get<std::vector<double>>()) ext.push(Vec(1, {x}));
        int pf = dj.at("ladder_points").back();
        GridSpec fine(U, n, pf), finer(U, n, 2 * (pf - 1) + 1);
        double jf = solve_dual(field, fine, q, ext, opts).j_raw;
        double jff = solve_dual(field, finer, q, ext, opts).j_raw;
        double est_j = 2.0 * jff - jf;
        double oracle_v = dj.at("value"), oracle_e = dj.at("error");
        double diff = std::abs(est_j - oracle_v);
        ck.expect(diff <= 5.0 * oracle_e, std::string(dj.at("tag")) + ": |dJ|=" + fmt(diff) +
                                              " vs 5*err=" + fmt(5.0 * oracle_e));
        ck.note(std::string(dj.at("tag")) + " diff=" + fmt(diff) + ";");
    }
    for (const auto& sj : fx.at("nu_star_series")) {
        double rho0 = sj.at("rho0");
        McConfig mc = base_mc(cfg);
        mc.exterior_mode = ExteriorMode::none;
        mc.n_max = sj.at("n_max");
        mc.h = 1.0 / 128;
        mc.refine_levels = 2;
        MCEstimate e = estimate_nu_star(est, 0, q, rho0, mc);
        double oracle_v = sj.at("value"), oracle_e = sj.at("error");
        double tol = std::max(3.0 * e.sigma(), 2.0 * oracle_e);
        double diff = std::abs(e.value_truncated - oracle_v);
        ck.expect(diff <= tol, "series rho0=" + fmt(rho0) + ": |d|=" + fmt(diff) + " tol=" + fmt(tol));
        ck.note("series rho0=" + fmt(rho0) + " diff=" + fmt(diff) + ";");
    }
    return {4, "oracle agreement", ck.ok, false, ck.log};
}

/// 5. Representation-formula equivalence of the two density-increment routes.
inline CriterionResult criterion_delta_equivalence(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    auto field = crowding_field(2.0, 0.25);
    Estimator est(field, 1, std::make_shared<CorrectorCache>(cfg.cache_dir));
    const Vec q = Vec::scalar(1.0);
    McConfig mc = base_mc(cfg);
    mc.h = 1.0 / 16;
    mc.max_unknowns = 200'000;
    mc.n_max = 4;
    mc.n_outer = 64;
    mc.refine_levels = 2;
    for (double rho0 : {0.5, 1.0, 2.0}) {
        for (double rho : {0.05, 0.1, 0.2}) {
            MCEstimate dd = delta_rho_def(est, 0, q, rho0, rho, mc);
            MCEstimate dr = delta_rho_repr(est, 0, q, rho0, rho, mc);
            double sig = std::sqrt(dd.stderr_ * dd.stderr_ + dr.stderr_ * dr.stderr_);
            double diff = std::abs(dd.value - dr.value);
            ck.expect(diff <= 3.0 * sig, "(" + fmt(rho0) + "," + fmt(rho) + "): |d|=" + fmt(diff) +
                                             " 3sig=" + fmt(3.0 * sig));
        }
    }
    // coupling variance-reduction report (demoted to a note if violated)
    McConfig mcv = mc;
    mcv.n_outer = 48;
    MCEstimate with_crn = delta_rho_def(est, 0, q, 1.0, 0.05, mcv, true);
    MCEstimate without = delta_rho_def(est, 0, q, 1.0, 0.05, mcv, false);
    double ratio = without.stderr_ / std::max(with_crn.stderr_, 1e-300);
    ck.note("CRN stderr ratio=" + fmt(ratio) + (ratio >= 2.0 ? " (>=2)" : " (<2, report only)"));
    return {5, "delta def/repr equivalence", ck.ok, false, ck.log};
}

/// 6. First-order expansion: remainder slope and c_1 against the oracle.
inline CriterionResult criterion_first_order(const nlohmann::json& fx, const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    auto field = crowding_field(2.0, 0.25);
    Estimator est(field, 1, std::make_shared<CorrectorCache>(cfg.cache_dir));
    const Vec q = Vec::scalar(1.0);

    McConfig mce = base_mc(cfg);
    mce.exterior_mode = ExteriorMode::none;
    mce.n_max = 2;
    mce.h = 1.0 / 16;
    mce.collar_nodes = 8;
    std::vector<double> rho_grid{0.02, 0.0316, 0.05, 0.0794, 0.126, 0.2};
    ExpansionReport rep = expansion_report(est, 0, q, 1.0, rho_grid, 1, mce);
    ck.expect(rep.slope_defined && rep.fitted_slope >= 1.7,
              "R1 slope=" + fmt(rep.fitted_slope) + " (need >= 1.7)");
    ck.note("R1 slope=" + fmt(rep.fitted_slope) + ";");

    McConfig mck = base_mc(cfg);
    mck.exterior_mode = ExteriorMode::none;
    mck.n_max = fx.at("c1").at("n_max");
    mck.h = 1.0 / 32;
    mck.refine_levels = 2;
    mck.collar_nodes = 16;
    CkmEstimate c1 = c_km(est, 0, q, 1.0, 1, mck);
    double oracle_v = fx.at("c1").at("value"), oracle_e = fx.at("c1").at("error");
    double tol = std::max(3.0 * c1.est.sigma(), 2.0 * oracle_e);
    double diff = std::abs(c1.est.value - oracle_v);
    ck.expect(diff <= tol, "c1 est=" + fmt(c1.est.value) + " oracle=" + fmt(oracle_v) +
                               " |d|=" + fmt(diff) + " tol=" + fmt(tol));
    ck.note("c1=" + fmt(c1.est.value) + " vs oracle " + fmt(oracle_v) + ";");
    return {6, "first-order expansion", ck.ok, false, ck.log};
}

/// 7. Second-order expansion: remainder slope >= 2.5 or an explicit
/// noise-dominated verdict.
inline CriterionResult criterion_second_order(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    auto field = crowding_field(2.0, 0.25);
    Estimator est(field, 1, std::make_shared<CorrectorCache>(cfg.cache_dir));
    McConfig mc = base_mc(cfg);
    mc.exterior_mode = ExteriorMode::none;
    mc.n_max = 2;
    mc.h = 1.0 / 16;
    mc.collar_nodes = 4;
    std::vector<double> rho_grid{0.02, 0.0316, 0.05, 0.0794, 0.126, 0.2};
    ExpansionReport rep = expansion_report(est, 0, Vec::scalar(1.0), 1.0, rho_grid, 2, mc);
    bool conditional = false;
    if (rep.noise_dominated) {
        conditional = true;
        ck.note("MC-noise-dominated verdict: |R2(min rho)|=" + fmt(std::abs(rep.remainder[0])) +
                " < 2*stderr=" + fmt(2.0 * rep.remainder_stderr[0]));
    } else {
        ck.expect(rep.slope_defined && rep.fitted_slope >= 2.5,
                  "R2 slope=" + fmt(rep.fitted_slope) + " (need >= 2.5)");
        ck.note("R2 slope=" + fmt(rep.fitted_slope) + ";");
    }
    return {7, "second-order expansion", ck.ok, conditional, ck.log};
}

/// 8. Exact algebraic identity suite on randomized families.
inline CriterionResult criterion_algebra(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    long failures = 0;
    const long instances = 10'000;
    for (long inst = 0; inst < instances && failures < 5; ++inst) {
        CounterRng rng(cfg.seed, 0xa15eb7a + static_cast<uint64_t>(inst));
        int k = 1 + static_cast<int>(rng.next_u64() % 3);
        std::vector<Vec> pos(static_cast<size_t>(k));
        for (auto& p : pos) p = Vec(1, {rng.uniform(-1, 1)});
        double a0 = rng.uniform(0.5, 2.0), b0 = rng.uniform(-1, 1);
        double a1 = rng.uniform(0.5, 2.0), b1 = rng.uniform(-1, 1);
        PointConfiguration base(1);
        auto smooth = [&pos](double a, double b, Subset e) {
            double s = b;
            for (size_t i = 0; i < pos.size(); ++i)
                if (e & (Subset{1} << i)) s += std::sin(a * (pos[i][0] + b));
            return std::exp(0.3 * s);
        };
        IndexedFamily<double> f(base, pos, [&](Subset e) { return smooth(a0, b0, e); });
        IndexedFamily<double> g(base, pos, [&](Subset e) { return smooth(a1, b1, e); });
        const Subset full = (Subset{1} << k) - 1;
        const double tol = 1e-12;

        // telescope(difference) round trip
        double re = telescope<double>([&](Subset s) { return difference(f, s); }, full);
        if (std::abs(re - f.eval(full)) > tol * std::max(1.0, std::abs(f.eval(full)))) ++failures;
        // both Leibniz forms against the direct product
        auto [lhs, r1, r2] = leibniz_check<double, double, double>(
            f, g, full, [](const double& x, const double& y) { return x * y; });
        if (std::abs(lhs - r1) > tol * std::max(1.0, std::abs(lhs))) ++failures;
        if (std::abs(lhs - r2) > tol * std::max(1.0, std::abs(lhs))) ++failures;
        // commutativity D_i D_j = D_j D_i via nested differences
        if (k >= 2) {
            auto nested = [&](int i, int j) {
                IndexedFamily<double> dj(base, pos,
                                         [&](Subset e) { return f.eval(e | (Subset{1} << j)) - f.eval(e); });
                return difference(dj, Subset{1} << i);
            };
            if (std::abs(nested(0, 1) - nested(1, 0)) > tol) ++failures;
            if (std::abs(nested(0, 1) - difference(f, Subset{3})) > tol) ++failures;
        }
        // Upsilon product rule
        Vec z(1, {rng.uniform(-1, 1)});
        Subset e1 = static_cast<Subset>(rng.next_u64()) & full;
        Subset e2 = static_cast<Subset>(rng.next_u64()) & full;
        if (upsilon(pos, e1, z) * upsilon(pos, e2, z) != upsilon(pos, e1 | e2, z)) ++failures;
    }
    ck.expect(failures == 0, std::to_string(failures) + " algebra failures");
    return {8, "algebraic identity suite", ck.ok, false,
            ck.ok ? "10000 randomized instances exact" : ck.log};
}

/// 9. Variational residual refinement and the energy bounds.
inline CriterionResult criterion_residuals(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    auto field = crowding_field(2.0, 0.25);
    auto cache = std::make_shared<CorrectorCache>(cfg.cache_dir);
    Estimator est(field, 1, cache);
    const Box U = box_m(0, 1);
    const Vec q = Vec::scalar(1.0);
    SolverOptions opts;

    // first-variation residual halves (at least 1.8x) per grid refinement;
    // a collar particle keeps the single-particle coefficient non-constant
    PointConfiguration fv_ext(1);
    fv_ext.push(Vec(1, {0.55}));
    for (int n : {1, 2}) {
        std::vector<double> res;
        for (int P : {33, 65, 129}) {
            GridSpec g(U, n, P);
            DiscreteCorrector psi = solve_dual(field, g, q, fv_ext, opts);
            std::vector<double> test(g.total());
            GridIter it(g);
            while (!it.done) {
                double v = 1;
                for (int a = 0; a < g.axes(); ++a)
                    v *= std::sin(2.0 * M_PI * (g.node_coord(a, it.idx[static_cast<size_t>(a)]) + 0.3));
                test[it.flat] = v;
                it.next();
            }
            res.push_back(std::abs(first_variation_residual(field, psi, test, q)));
        }
        for (size_t i = 0; i + 1 < res.size(); ++i)
            ck.expect(res[i] >= 1.8 * res[i + 1], "fv decay n=" + std::to_string(n) + " level " +
                                                      std::to_string(i) + ": " + fmt(res[i]) + "->" +
                                                      fmt(res[i + 1]));
        ck.note("fv(n=" + std::to_string(n) + "): " + fmt(res[0]) + "/" + fmt(res[1]) + "/" +
                fmt(res[2]) + ";");
    }
    // harmonic residual decrease under joint grid+quadrature refinement
    for (auto [E, F] : {std::pair<Subset, Subset>{1, 0}, {1, 1}}) {
        McConfig mc = base_mc(cfg);
        mc.exterior_mode = ExteriorMode::none;
        mc.n_max = 2;
        std::vector<double> res;
        for (int lvl = 0; lvl < 2; ++lvl) {
            mc.h = lvl == 0 ? 1.0 / 32 : 1.0 / 64;
            mc.collar_nodes = lvl == 0 ? 8 : 16;
            res.push_back(std::abs(harmonic_residual(est, 0, E, F, q, 1.0, 0.0, mc).value));
        }
        ck.expect(res[0] >= 1.8 * res[1], "harmonic(E=" + std::to_string(E) + ",F=" + std::to_string(F) +
                                              ") " + fmt(res[0]) + "->" + fmt(res[1]));
        ck.note("harmonic " + std::to_string(E) + "/" + std::to_string(F) + ": " + fmt(res[0]) + "->" +
                fmt(res[1]) + ";");
    }
    // E = F = empty: the solver's own variational identity, residual at CG tolerance
    {
        McConfig mc = base_mc(cfg);
        mc.exterior_mode = ExteriorMode::none;
        mc.n_max = 2;
        mc.h = 1.0 / 32;
        double r0 = std::abs(harmonic_residual(est, 0, 0, 0, q, 1.0, 0.0, mc).value);
        ck.expect(r0 <= 1e-7, "harmonic(0,0)=" + fmt(r0));
    }
    // Dirichlet and slice energy bounds with epsilon_h <= 0.02 at h = 1/128
    {
        PointConfiguration with_pt(1);
        with_pt.push(Vec(1, {0.6}));
        std::vector<PointConfiguration> exteriors{PointConfiguration(1), with_pt};
        for (int n : {1, 2}) {
            for (const auto& exterior : exteriors) {
                GridSpec g(U, n, 129);
                DiscreteCorrector psi = solve_dual(field, g, q, exterior, opts);
                double se = slice_energy(psi);
                ck.expect(se <= q.norm2() * 1.02,
                          "slice n=" + std::to_string(n) + " = " + fmt(se));
                double de = dirichlet_energy(psi, 1.0);
                ck.expect(de <= q.norm2() * n * 1.02 / (1.0 * U.volume()),
                          "dirichlet n=" + std::to_string(n) + " = " + fmt(de));
            }
        }
    }
    return {9, "variational residuals and energy bounds", ck.ok, false, ck.log};
}

/// 10. Mecke and auxiliary indicator identities, 1e5 samples.
inline CriterionResult criterion_mecke(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    const Box U = box_m(0, 1);
    const long N = 100'000;
    const double rho = 1.0;
    auto check_res = [&](const char* name, const MeckeCheck& mk) {
        ck.expect(mk.residual <= 3.0 * mk.stderr_ + 1e-12,
                  std::string(name) + ": res=" + fmt(mk.residual) + " 3sig=" + fmt(3.0 * mk.stderr_));
    };
    check_res("H=1", mecke_residual([](const PointConfiguration&, const Vec&) { return 1.0; }, rho, U,
                                    N, cfg.seed));
    check_res("H=count", mecke_residual(
                             [&U](const PointConfiguration& mu, const Vec&) {
                                 return static_cast<double>(restrict_to(mu, U).count());
                             },
                             rho, U, N, cfg.seed + 1));
    check_res("H=ind1", mecke_residual(
                            [&U](const PointConfiguration& mu, const Vec&) {
                                return restrict_to(mu, U).count() == 1 ? 1.0 : 0.0;
                            },
                            rho, U, N, cfg.seed + 2));

    // one-particle conditioning identity: E[F 1{N(box+z)=1}] = rho int E[F^{x} 1{N=0}]
    {
        Box shifted(Vec(1, {0.25}), 1.0);
        Box sample_box(Vec(1), 4.0);
        auto F = [&](const PointConfiguration& mu) {
            return 1.0 / (1.0 + static_cast<double>(restrict_to(mu, box_m(0, 1)).count()));
        };
        double sl = 0, sl2 = 0, sr = 0, sr2 = 0;
        for (long s = 0; s < N; ++s) {
            CounterRng rng(cfg.seed + 3, static_cast<uint64_t>(s));
            PointConfiguration mu = sample_poisson(rho, sample_box, rng);
            size_t in_box = restrict_to(mu, shifted).count();
            double lhs = in_box == 1 ? F(mu) : 0.0;
            Vec x(1, {rng.uniform(shifted.lo(0), shifted.hi(0))});
            double rhs = in_box == 0 ? rho * shifted.volume() * F(add_point(mu, x)) : 0.0;
            sl += lhs;
            sl2 += lhs * lhs;
            sr += rhs;
            sr2 += rhs * rhs;
        }
        double ml = sl / N, mr = sr / N;
        double se = std::sqrt((sl2 / N - ml * ml) / N + (sr2 / N - mr * mr) / N);
        ck.expect(std::abs(ml - mr) <= 3.0 * se,
                  "laux1: |" + fmt(ml) + "-" + fmt(mr) + "| vs 3sig=" + fmt(3.0 * se));
    }
    // second bound: |E[F 1{N>=2}]| <= rho^2 int int E[|F^{x,y}|]
    {
        Box shifted(Vec(1, {0.25}), 1.0);
        Box sample_box(Vec(1), 4.0);
        auto F = [&](const PointConfiguration& mu) {
            return 1.0 / (1.0 + static_cast<double>(restrict_to(mu, box_m(0, 1)).count()));
        };
        double sl = 0, sr = 0, sr2 = 0, sl2 = 0;
        for (long s = 0; s < N; ++s) {
            CounterRng rng(cfg.seed + 4, static_cast<uint64_t>(s));
            PointConfiguration mu = sample_poisson(rho, sample_box, rng);
            double lhs = restrict_to(mu, shifted).count() >= 2 ? F(mu) : 0.0;
            Vec x(1, {rng.uniform(shifted.lo(0), shifted.hi(0))});
            Vec y(1, {rng.uniform(shifted.lo(0), shifted.hi(0))});
            double rhs = rho * rho * shifted.volume() * shifted.volume() *
                         std::abs(F(add_point(add_point(mu, x), y)));
            sl += lhs;
            sl2 += lhs * lhs;
            sr += rhs;
            sr2 += rhs * rhs;
        }
        double ml = std::abs(sl / N), mr = sr / N;
        double se = std::sqrt((sl2 / N) / N + (sr2 / N) / N);
        ck.expect(ml <= mr + 3.0 * se, "laux2: " + fmt(ml) + " <= " + fmt(mr));
    }
    return {10, "Mecke and indicator identities", ck.ok, false, ck.log};
}

/// 11. Key-estimate probes: finite, and no blow-up from m=0 to m=1.
inline CriterionResult criterion_key_probes(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    auto field = crowding_field(2.0, 0.25);
    auto cache = std::make_shared<CorrectorCache>(cfg.cache_dir);
    Estimator est(field, 1, cache);
    const Vec q = Vec::scalar(1.0);
    for (auto [f, g] : {std::pair<int, int>{0, 0}, {1, 0}, {1, 1}, {2, 0}, {2, 1}, {2, 2}}) {
        std::vector<double> vals;
        std::vector<double> sigs;
        for (int m : {0, 1}) {
            McConfig mc = base_mc(cfg);
            mc.exterior_mode = ExteriorMode::none;
            mc.n_max = f >= 2 ? 1 : 2;
            mc.h = m == 0 ? 1.0 / 16 : 3.0 / 24;
            mc.collar_nodes = f >= 2 ? 4 : 8;
            MCEstimate e = key_estimate_probe(est, m, f, g, q, 1.0, mc);
            ck.expect(std::isfinite(e.value), "finite |F|=" + std::to_string(f));
            vals.push_back(e.value);
            sigs.push_back(e.stderr_);
        }
        double sig = 3.0 * std::sqrt(sigs[0] * sigs[0] + sigs[1] * sigs[1]);
        ck.expect(vals[1] <= 2.0 * vals[0] + sig + 1e-9,
                  "trend |F|=" + std::to_string(f) + ",|G|=" + std::to_string(g) + ": " + fmt(vals[1]) +
                      " vs 2x" + fmt(vals[0]));
        ck.note("F" + std::to_string(f) + "G" + std::to_string(g) + ": m0=" + fmt(vals[0]) +
                " m1=" + fmt(vals[1]) + ";");
        if (f == 0) ck.expect(vals[0] <= q.norm2() * 1.02, "dirichlet bound at probe (0,0)");
    }
    return {11, "key-estimate probes", ck.ok, false, ck.log};
}

/// 12. Determinism: byte-identical CSV across repeated runs and thread counts.
inline CriterionResult criterion_determinism(const AcceptanceConfig& cfg) {
    using namespace acc_detail;
    Check ck;
    const std::string config_text = R"(
field = crowding
field.lambda = 2
field.r = 0.25
dim = 1
m = 0
rho0 = 1
rho = 0.05
q = 1
p = 1
quantities = nu_star nu abar delta
[mc]
n_outer = 6
n_max = 2
h = 0.0625
seed = )" + std::to_string(cfg.seed) + "\n";
    auto run_with_threads = [&](int threads) {
        RunConfig rc = RunConfig::from_text(config_text);
        rc.mc.threads = threads;
        return run_estimate(rc).csv.str();
    };
    std::string a1 = run_with_threads(1);
    std::string a2 = run_with_threads(2);
    std::string a3 = run_with_threads(1);
    ck.expect(a1 == a3, "repeat run differs");
    ck.expect(a1 == a2, "thread count changes output");
    return {12, "determinism across runs and thread counts", ck.ok, false,
            ck.ok ? "byte-identical CSV (1 vs 2 threads, repeated)" : ck.log};
}

// ---------------------------------------------------------------------------
// Suite runner.
// ---------------------------------------------------------------------------

inline std::vector<CriterionResult> run_acceptance_criteria(const nlohmann::json& fixtures,
                                                            const AcceptanceConfig& cfg = {}) {
    std::vector<CriterionResult> out;
    out.push_back(criterion_constant_exactness(cfg));
    auto runs = sandwich_runs(cfg);
    out.push_back(criterion_sandwich(runs));
    out.push_back(criterion_monotonicity(runs));
    out.push_back(criterion_oracle_agreement(fixtures, cfg));
    out.push_back(criterion_delta_equivalence(cfg));
    out.push_back(criterion_first_order(fixtures, cfg));
    out.push_back(criterion_second_order(cfg));
    out.push_back(criterion_algebra(cfg));
    out.push_back(criterion_residuals(cfg));
    out.push_back(criterion_mecke(cfg));
    out.push_back(criterion_key_probes(cfg));
    out.push_back(criterion_determinism(cfg));
    return out;
}

inline bool print_acceptance(std::ostream& os, const std::vector<CriterionResult>& results) {
    bool all = true;
    for (const auto& r : results) {
        os << (r.pass ? (r.conditional ? "[PASS*]" : "[PASS] ") : "[FAIL] ") << r.id << ". " << r.name
           << " -- " << r.details << "\n";
        all = all && r.pass;
    }
    os << (all ? "acceptance: all criteria passed\n" : "acceptance: FAILURES present\n");
    return all;
}

}  // namespace bulkdiff
