#include <catch2/catch_amalgamated.hpp>

#include "bulkdiff/expansion.hpp"

using namespace bulkdiff;

namespace {
Estimator make_est(const ConductanceField& f, int dim = 1) {
    return Estimator(f, dim, std::make_shared<CorrectorCache>(""));
}
McConfig quick_mc() {
    McConfig mc;
    mc.n_outer = 8;
    mc.n_max = 2;
    mc.h = 1.0 / 16;
    mc.seed = 31;
    return mc;
}
}  // namespace

TEST_CASE("nu_star: constant field is exact, invalid inputs rejected") {
    auto est = make_est(constant_field(1.5));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    MCEstimate e = estimate_nu_star(est, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(e.value == Catch::Approx(1.0 / 3.0).margin(1e-9));
    REQUIRE(e.value_truncated == Catch::Approx((1.0 / 3.0) * (1.0 - poisson_tail(2, 1.0))).margin(1e-9));
    REQUIRE_THROWS_AS(estimate_nu_star(est, 0, Vec::scalar(1.0), 0.0, mc), std::invalid_argument);
    McConfig bad = mc;
    bad.n_max = 0;
    REQUIRE_THROWS_AS(estimate_nu_star(est, 0, Vec::scalar(1.0), 1.0, bad), std::invalid_argument);
}

TEST_CASE("nu_star sandwich for the crowding field") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.h = 1.0 / 32;
    MCEstimate e = estimate_nu_star(est, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(e.value >= 0.25 - e.tail_bound - 3 * e.stderr_);
    REQUIRE(e.value <= 0.50 + e.tail_bound + 3 * e.stderr_);
}

TEST_CASE("truncation threshold trips the unconverged error") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    mc.tail_rel_threshold = 1e-6;
    REQUIRE_THROWS_AS(estimate_nu_star(est, 0, Vec::scalar(1.0), 1.0, mc), TruncationError);
}

TEST_CASE("nu: constant field exact, crowding above the lower bound") {
    auto est = make_est(constant_field(2.0));
    McConfig mc = quick_mc();
    MCEstimate e = estimate_nu(est, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(e.value == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(e.stderr_ == 0.0);

    auto crowd = make_est(crowding_field(2.0, 0.25));
    MCEstimate c = estimate_nu(crowd, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(c.value >= 0.5 - 1e-9);
    REQUIRE(c.value <= 1.0 + c.tail_bound);
}

TEST_CASE("abar matrices: constant field gives c Id on both sides") {
    auto est = make_est(constant_field(1.5));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    AbarPair p = abar_matrices(est, 0, 1.0, mc);
    REQUIRE(p.abar.at(0, 0) == Catch::Approx(1.5).margin(1e-8));
    REQUIRE(p.abar_star.at(0, 0) == Catch::Approx(1.5).margin(1e-8));
}

TEST_CASE("abar_star is the reciprocal of twice nu_star in one dimension") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    AbarPair p = abar_matrices(est, 0, 1.0, mc);
    MCEstimate ns = estimate_nu_star(est, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(p.abar_star.at(0, 0) == Catch::Approx(1.0 / (2.0 * ns.value)).margin(1e-10));
}

TEST_CASE("abar matrices in two dimensions satisfy the sandwich") {
    auto est = make_est(crowding_field(2.0, 0.25), 2);
    McConfig mc;
    mc.n_outer = 4;
    mc.n_max = 2;
    mc.h = 1.0 / 8;
    mc.seed = 5;
    AbarPair p = abar_matrices(est, 0, 0.5, mc);
    auto [lo_star, hi_star] = p.abar_star.eig_range();
    auto [lo_a, hi_a] = p.abar.eig_range();
    double slack = 0.1 + p.tail_nu + p.tail_nu_star;
    REQUIRE(lo_star >= 1.0 - slack);
    REQUIRE(hi_a <= 2.0 + slack);
    REQUIRE(lo_a >= lo_star - slack);
}

TEST_CASE("density increments vanish identically when nothing changes") {
    auto crowd = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    MCEstimate d0 = delta_rho_def(crowd, 0, Vec::scalar(1.0), 1.0, 0.0, mc);
    REQUIRE(d0.value == 0.0);
    MCEstimate r0 = delta_rho_repr(crowd, 0, Vec::scalar(1.0), 1.0, 0.0, mc);
    REQUIRE(r0.value == 0.0);

    auto constf = make_est(constant_field(1.5));
    MCEstimate dc = delta_rho_def(constf, 0, Vec::scalar(1.0), 1.0, 0.2, mc);
    REQUIRE(std::abs(dc.value) < 1e-10);
    MCEstimate rc = delta_rho_repr(constf, 0, Vec::scalar(1.0), 1.0, 0.2, mc);
    REQUIRE(rc.value == 0.0);
}

TEST_CASE("negative density increments swap the coupling roles") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.n_outer = 16;
    MCEstimate plus = delta_rho_def(est, 0, Vec::scalar(1.0), 1.0, 0.1, mc);
    MCEstimate minus = delta_rho_def(est, 0, Vec::scalar(1.0), 1.1, -0.1, mc);
    // Delta^{-rho}(1.1) = -Delta^{rho}(1.0) exactly, sample by sample
    REQUIRE(minus.value == Catch::Approx(-plus.value).margin(1e-12));
}

TEST_CASE("c_km of a constant field is exactly zero") {
    auto est = make_est(constant_field(2.0));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    mc.n_max = 1;
    for (int k : {1, 2}) {
        CkmEstimate ck = c_km(est, 0, Vec::scalar(1.0), 1.0, k, mc);
        REQUIRE(ck.est.value == 0.0);
        REQUIRE(ck.est.stderr_ == 0.0);
    }
    REQUIRE_THROWS_AS(c_km(est, 0, Vec::scalar(1.0), 1.0, 4, mc), std::invalid_argument);
}

TEST_CASE("pair sweeps reject far particles exactly") {
    auto field = crowding_field(2.0, 0.25);
    auto est = make_est(field);
    SolverOptions opts;
    auto psi = est.dual_corrector(box_m(0, 1), 1, Vec::scalar(1.0), PointConfiguration(1), 17, opts);
    exp_detail::PairContext ctx{&field, &psi->grid, &psi->exterior};
    // an added particle farther than 1/2 from every node contributes nothing
    std::vector<Vec> far{Vec(1, {1.3})};
    REQUIRE(exp_detail::pair_sweep_diff(ctx, psi->values, psi->values, far) == 0.0);
}

TEST_CASE("expansion report of a constant field has zero coefficients and remainders") {
    auto est = make_est(constant_field(1.5));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    mc.n_max = 1;
    ExpansionReport rep = expansion_report(est, 0, Vec::scalar(1.0), 1.0, {0.05, 0.1, 0.2}, 1, mc);
    for (double c : rep.c_values) REQUIRE(c == 0.0);
    for (double r : rep.remainder) REQUIRE(r == 0.0);
    REQUIRE_FALSE(rep.slope_defined);
    REQUIRE_THROWS_AS(expansion_report(est, 0, Vec::scalar(1.0), 1.0, {-0.1}, 1, mc),
                      std::invalid_argument);
}

TEST_CASE("order-zero remainder is the increment itself, with unit slope") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    ExpansionReport rep =
        expansion_report(est, 0, Vec::scalar(1.0), 1.0, {0.02, 0.05, 0.126, 0.2}, 0, mc);
    for (size_t i = 0; i < rep.rho_grid.size(); ++i)
        REQUIRE(rep.remainder[i] == rep.delta_series[i]);
    REQUIRE(rep.fitted_slope == Catch::Approx(1.0).margin(0.3));
}

TEST_CASE("remainder convention: R_k = Delta - sum_{j<=k} c_j rho^j / j!") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    std::vector<double> grid{0.1};
    ExpansionReport rep = expansion_report(est, 0, Vec::scalar(1.0), 1.0, grid, 1, mc);
    REQUIRE(rep.remainder[0] ==
            Catch::Approx(rep.delta_series[0] - rep.c_values[0] * 0.1).margin(1e-12));
}

TEST_CASE("harmonic residual is exactly zero for constant fields") {
    auto est = make_est(constant_field(2.0));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    mc.collar_nodes = 4;
    for (auto [E, F] : {std::pair<Subset, Subset>{0, 0}, {1, 0}, {1, 1}}) {
        MCEstimate e = harmonic_residual(est, 0, E, F, Vec::scalar(1.0), 1.0, 0.0, mc);
        REQUIRE(std::abs(e.value) < 1e-9);
    }
}

TEST_CASE("key estimate probe: constant field D1 grad psi vanishes; base case is the energy") {
    auto est = make_est(constant_field(2.0));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    mc.collar_nodes = 4;
    MCEstimate base = key_estimate_probe(est, 0, 0, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(base.value <= 1.0 + 1e-9);
    REQUIRE(base.value > 0.0);
    MCEstimate d1 = key_estimate_probe(est, 0, 1, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(std::abs(d1.value) < 1e-12);
    REQUIRE_THROWS_AS(key_estimate_probe(est, 0, 1, 2, Vec::scalar(1.0), 1.0, mc),
                      std::invalid_argument);
}

TEST_CASE("leibniz split sums to the same-node c_k and I(empty, F) vanishes") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.exterior_mode = ExteriorMode::none;
    mc.collar_nodes = 4;
    LeibnizSplit split = leibniz_split_terms(est, 0, Vec::scalar(1.0), 1.0, mc, 1, 17);
    double sum = 0;
    for (size_t i = 0; i < split.labels.size(); ++i) {
        sum += split.values[i];
        if (split.labels[i].find("E={}") != std::string::npos)
            REQUIRE(std::abs(split.values[i]) < 1e-14);
    }
    REQUIRE(sum == Catch::Approx(split.ck_same_nodes).margin(1e-12));
}

TEST_CASE("continuity scan keeps the duality ordering on a density grid") {
    auto est = make_est(crowding_field(2.0, 0.25));
    McConfig mc = quick_mc();
    mc.n_outer = 6;
    ContinuityScan scan = continuity_scan(est, 0, {0.5, 1.0, 2.0}, mc);
    REQUIRE(scan.rows.size() == 3);
    REQUIRE(scan.modulus_abar.size() == 2);
    REQUIRE(scan.ordering_ok);
}

TEST_CASE("two-dimensional quadrature nodes measure the rounded collar") {
    Box U = box_m(0, 2);
    auto nodes = added_particle_nodes(U, 9, 8, 16);
    double inside_w = 0, collar_w = 0;
    for (const auto& nd : nodes) (nd.inside ? inside_w : collar_w) += nd.wt;
    REQUIRE(inside_w == Catch::Approx(1.0).margin(1e-12));
    // |collar| = 4 * side * 1/2 + pi (1/2)^2 for the unit box
    REQUIRE(collar_w == Catch::Approx(2.0 + M_PI / 4.0).epsilon(0.02));
}

TEST_CASE("c_1 in two dimensions: zero for constant fields, finite for crowding") {
    McConfig mc;
    mc.exterior_mode = ExteriorMode::none;
    mc.n_max = 1;
    mc.h = 1.0 / 8;
    mc.collar_nodes = 4;
    mc.seed = 2;
    auto constant = make_est(constant_field(1.5), 2);
    CkmEstimate c0 = c_km(constant, 0, Vec(2, {1.0, 0.0}), 1.0, 1, mc);
    REQUIRE(c0.est.value == 0.0);
    auto crowd = make_est(crowding_field(2.0, 0.25), 2);
    CkmEstimate c1 = c_km(crowd, 0, Vec(2, {1.0, 0.0}), 1.0, 1, mc);
    REQUIRE(std::isfinite(c1.est.value));
    REQUIRE(c1.est.value < 0.0);  // adding a particle can only raise the crowding conductance
}
