#include <catch2/catch_amalgamated.hpp>

#include "bulkdiff/solver.hpp"

using namespace bulkdiff;

TEST_CASE("grid budget guard") {
    GridSpec g(box_m(0, 1), 3, 257);
    SolverOptions opts;
    opts.max_unknowns = 100'000;
    REQUIRE_THROWS_AS(solve_dual(constant_field(1.0), g, Vec::scalar(1.0), PointConfiguration(1), opts),
                      GridTooLarge);
}

TEST_CASE("n = 0 yields the zero corrector") {
    auto corr = solve_dual(constant_field(1.0), GridSpec(box_m(0, 1), 0, 9), Vec::scalar(1.0),
                           PointConfiguration(1));
    REQUIRE(corr.j_raw == 0.0);
}

TEST_CASE("constant-field corrector has uniform gradient q/c") {
    auto f = constant_field(2.0);
    Vec q = Vec::scalar(1.0);
    GridSpec g(box_m(0, 1), 2, 17);
    auto corr = solve_dual(f, g, q, PointConfiguration(1));
    REQUIRE(corr.j_raw == Catch::Approx(2.0 * 1.0 / (2.0 * 2.0)).margin(1e-9));
    const auto stride = g.strides();
    GridIter it(g);
    while (!it.done) {
        for (int a = 0; a < g.axes(); ++a) {
            double grad = detail::node_gradient(corr.values, it.flat, it.idx[static_cast<size_t>(a)],
                                                g.points, stride[static_cast<size_t>(a)], g.h());
            REQUIRE(grad == Catch::Approx(0.5).margin(1e-7));
        }
        it.next();
    }
    // two dimensions as well
    GridSpec g2(box_m(0, 2), 1, 9);
    auto corr2 = solve_dual(f, g2, Vec(2, {1.0, 0.0}), PointConfiguration(2));
    REQUIRE(corr2.j_raw == Catch::Approx(0.25).margin(1e-9));
}

TEST_CASE("corrector mean is pinned to zero") {
    auto corr = solve_dual(crowding_field(2.0, 0.25), GridSpec(box_m(0, 1), 2, 33), Vec::scalar(1.0),
                           PointConfiguration(1));
    double m = 0;
    for (double v : corr.values) m += v;
    m /= static_cast<double>(corr.values.size());
    REQUIRE(std::abs(m) < 1e-12);
}

TEST_CASE("corrector is symmetric under particle exchange") {
    GridSpec g(box_m(0, 1), 2, 17);
    auto corr = solve_dual(crowding_field(2.0, 0.25), g, Vec::scalar(1.0), PointConfiguration(1));
    double worst = 0;
    for (int i = 0; i < g.points; ++i)
        for (int j = 0; j < g.points; ++j)
            worst = std::max(worst, std::abs(corr.values[static_cast<size_t>(i * g.points + j)] -
                                             corr.values[static_cast<size_t>(j * g.points + i)]));
    REQUIRE(worst <= 10 * 1e-10 * 10);
}

TEST_CASE("returned maximizer beats random perturbations") {
    auto f = crowding_field(2.0, 0.25);
    GridSpec g(box_m(0, 1), 2, 17);
    PointConfiguration empty(1);
    auto corr = solve_dual(f, g, Vec::scalar(1.0), empty);
    DualOperator op(f, g, Vec::scalar(1.0), empty);
    CounterRng rng(555, 0);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> pert = corr.values;
        for (auto& v : pert) v += rng.uniform(-1e-3, 1e-3);
        REQUIRE(op.functional(pert) <= corr.j_raw + 1e-12);
    }
}

TEST_CASE("slice energy bound holds with discretization slack") {
    auto f = crowding_field(2.0, 0.25);
    PointConfiguration ext(1);
    ext.push(Vec(1, {0.55}));
    for (int n : {1, 2}) {
        auto corr = solve_dual(f, GridSpec(box_m(0, 1), n, 65), Vec::scalar(1.0), ext);
        REQUIRE(slice_energy(corr) <= 1.0 * 1.02);
    }
}

TEST_CASE("exterior particles beyond the collar never change the solve") {
    auto f = crowding_field(2.0, 0.25);
    GridSpec g(box_m(0, 1), 2, 17);
    PointConfiguration near(1);
    near.push(Vec(1, {0.7}));
    PointConfiguration far = near;
    far.push(Vec(1, {1.7}));  // distance 1.2 from the box
    auto a = solve_dual(f, g, Vec::scalar(1.0), near);
    auto b = solve_dual(f, g, Vec::scalar(1.0), far);
    REQUIRE(a.values == b.values);
}

TEST_CASE("single-particle corrector matches the closed-form cell solution") {
    // with one collar particle the conductance profile is a(x) = 1 + 1{|x-e| < r},
    // and the free maximizer satisfies psi'(x) = q / a(x); J = q^2 <1/a> / 2
    auto f = crowding_field(2.0, 0.25);
    PointConfiguration ext(1);
    ext.push(Vec(1, {0.55}));
    Vec q = Vec::scalar(1.0);
    const Box U = box_m(0, 1);
    auto a_of = [&](double x) { return std::abs(x - 0.55) < 0.25 ? 2.0 : 1.0; };
    // quadrature oracle for J at high resolution
    const int K = 200'000;
    double mean_inv = 0;
    for (int i = 0; i < K; ++i) mean_inv += 1.0 / a_of(U.lo(0) + (i + 0.5) / K);
    mean_inv /= K;
    double j_exact = 0.5 * mean_inv;

    // the node-rule error at a coefficient jump oscillates with the grid phase,
    // so check the O(h) band per level rather than monotone decay
    std::vector<double> errs, bounds;
    for (int P : {65, 129, 257}) {
        auto corr = solve_dual(f, GridSpec(U, 1, P), q, ext);
        errs.push_back(std::abs(corr.j_raw - j_exact));
        bounds.push_back(0.5 / (P - 1) + 1e-6);
        // gradient profile check at interior nodes away from the jump
        const double h = corr.grid.h();
        for (int k = 2; k < P - 2; ++k) {
            double x = U.lo(0) + k * h;
            if (std::abs(std::abs(x - 0.55) - 0.25) < 2 * h) continue;
            double grad = (corr.values[static_cast<size_t>(k + 1)] -
                           corr.values[static_cast<size_t>(k - 1)]) /
                          (2 * h);
            REQUIRE(grad == Catch::Approx(1.0 / a_of(x)).margin(20.0 * h));
        }
    }
    for (size_t i = 0; i < errs.size(); ++i) REQUIRE(errs[i] <= bounds[i]);
}

TEST_CASE("first variation residual: constants vanish, corrector stays in band, grids must match") {
    auto f = crowding_field(2.0, 0.25);
    GridSpec g(box_m(0, 1), 2, 33);
    auto psi = solve_dual(f, g, Vec::scalar(1.0), PointConfiguration(1));
    std::vector<double> constant(g.total(), 3.7);
    REQUIRE(first_variation_residual(f, psi, constant, Vec::scalar(1.0)) == 0.0);
    double r = first_variation_residual(f, psi, psi.values, Vec::scalar(1.0));
    double grad_norm = std::sqrt(slice_energy(psi) * g.n);
    REQUIRE(std::abs(r) <= 5.0 * (1e-10 + g.h()) * grad_norm);
    std::vector<double> wrong(10, 0.0);
    REQUIRE_THROWS_AS(first_variation_residual(f, psi, wrong, Vec::scalar(1.0)),
                      std::invalid_argument);
}

TEST_CASE("dirichlet energy closed form for constant fields") {
    auto f = constant_field(2.0);
    for (int n : {1, 2}) {
        auto corr = solve_dual(f, GridSpec(box_m(0, 1), n, 17), Vec::scalar(1.0), PointConfiguration(1));
        REQUIRE(dirichlet_energy(corr, 1.0) == Catch::Approx(n * 1.0 / 4.0).margin(1e-7));
    }
}

TEST_CASE("contraction slices exactly at nodes and linearly in between") {
    GridSpec g(box_m(0, 1), 2, 9);
    std::vector<double> vals(g.total());
    auto coord = [&](int k) { return g.box.lo(0) + k * g.h(); };
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j)
            vals[static_cast<size_t>(i * 9 + j)] = 2.0 * coord(i) + 3.0 * coord(j);
    GridSpec rg;
    auto sliced = contract_particles(g, vals, {{1, Vec(1, {coord(3)})}}, &rg);
    REQUIRE(rg.n == 1);
    for (int i = 0; i < 9; ++i)
        REQUIRE(sliced[static_cast<size_t>(i)] ==
                Catch::Approx(2.0 * coord(i) + 3.0 * coord(3)).margin(1e-13));
    auto mid = contract_particles(g, vals, {{0, Vec(1, {0.131})}}, &rg);
    for (int j = 0; j < 9; ++j)
        REQUIRE(mid[static_cast<size_t>(j)] ==
                Catch::Approx(2.0 * 0.131 + 3.0 * coord(j)).margin(1e-12));
}

TEST_CASE("primal solver: constant fields are exact and the trace chain holds") {
    auto f = constant_field(1.5);
    PrimalResult res = solve_primal(f, box_m(0, 1), Vec::scalar(1.0), 3, 17, 1.0);
    for (int n = 1; n <= 3; ++n)
        REQUIRE(res.raw_energy[static_cast<size_t>(n)] == Catch::Approx(n * 1.5).margin(1e-9));
    // trace condition: boundary-face values of f_2 equal f_1 at the reduced node
    const auto& f2 = res.f[1];
    const auto& f1 = res.f[0];
    const int P = f2.grid.points;
    for (int j = 0; j < P; ++j) {
        REQUIRE(f2.values[static_cast<size_t>(0 * P + j)] == f1.values[static_cast<size_t>(j)]);
        REQUIRE(f2.values[static_cast<size_t>((P - 1) * P + j)] == f1.values[static_cast<size_t>(j)]);
    }
}

TEST_CASE("primal crowding values refine monotonically within the band") {
    auto f = crowding_field(2.0, 0.25);
    std::vector<double> vals;
    for (int P : {17, 33, 65})
        vals.push_back(solve_primal(f, box_m(0, 1), Vec::scalar(1.0), 2, P, 1.0).value);
    REQUIRE(vals[0] <= vals[2] + 1e-6);
    for (double v : vals) {
        REQUIRE(v > 0);
        REQUIRE(v < 1.0);  // below Lambda |p|^2 / 2 even before the tail
    }
}

TEST_CASE("corrector blob round-trips bit-exactly and detects corruption") {
    auto corr = solve_dual(crowding_field(2.0, 0.25), GridSpec(box_m(0, 1), 2, 17), Vec::scalar(1.0),
                           PointConfiguration(1));
    std::string blob = corrector_to_blob(corr, 12345, 678);
    uint64_t fid = 0, ext = 0;
    auto back = corrector_from_blob(blob, &fid, &ext);
    REQUIRE(fid == 12345);
    REQUIRE(ext == 678);
    REQUIRE(back.values == corr.values);
    REQUIRE(back.grid.points == corr.grid.points);
    REQUIRE(back.j_raw == corr.j_raw);
    std::string bad = blob;
    bad[bad.size() / 2] ^= 0x40;
    REQUIRE_THROWS(corrector_from_blob(bad));
}

TEST_CASE("primal solver is exact for constant fields in two dimensions") {
    auto f = constant_field(1.5);
    PrimalResult res = solve_primal(f, box_m(0, 2), Vec(2, {1.0, 0.0}), 2, 9, 1.0);
    double ehat = res.raw_energy[2] / 2;
    double nu = res.value + poisson_tail(2, 1.0) * ehat / 2.0;
    REQUIRE(nu == Catch::Approx(0.75).margin(1e-9));
}
