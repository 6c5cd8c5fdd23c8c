#include <catch2/catch_amalgamated.hpp>

#include "bulkdiff/oracle.hpp"
#include "bulkdiff/solver.hpp"

using namespace bulkdiff;

TEST_CASE("banded Cholesky matches a dense reference on a small SPD system") {
    const size_t n = 30, bw = 4;
    CounterRng rng(2024, 0);
    std::vector<std::vector<double>> dense(n, std::vector<double>(n, 0.0));
    oracle::BandedSpd banded(n, bw);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i > bw ? i - bw : 0; j < i; ++j) {
            double v = rng.uniform(-0.3, 0.3);
            dense[i][j] = dense[j][i] = v;
            banded.add_sym(i, j, v);
        }
        double d = 4.0 + rng.uniform(0, 1);
        dense[i][i] = d;
        banded.add_sym(i, i, d);
    }
    std::vector<double> b(n);
    for (auto& v : b) v = rng.uniform(-1, 1);
    banded.factor();
    std::vector<double> x = banded.solve(b);
    // residual check against the dense matrix
    for (size_t i = 0; i < n; ++i) {
        double r = b[i];
        for (size_t j = 0; j < n; ++j) r -= dense[i][j] * x[j];
        REQUIRE(std::abs(r) < 1e-10);
    }
}

TEST_CASE("banded factor rejects indefinite systems") {
    oracle::BandedSpd bad(3, 1);
    bad.add_sym(0, 0, 1.0);
    bad.add_sym(1, 1, -1.0);
    bad.add_sym(2, 2, 1.0);
    REQUIRE_THROWS(bad.factor());
}

TEST_CASE("oracle reproduces the constant-field closed form") {
    auto f = constant_field(1.5);
    for (int n : {1, 2}) {
        auto r = oracle::oracle_dual_energy(f, box_m(0, 1), n, Vec::scalar(1.0), PointConfiguration(1),
                                            {17, 33, 65});
        REQUIRE(std::abs(r.value - n / 3.0) < 1e-8);
    }
}

TEST_CASE("a single crowding particle behaves as the unit constant field") {
    auto crowd = crowding_field(2.0, 0.25);
    auto r = oracle::oracle_dual_energy(crowd, box_m(0, 1), 1, Vec::scalar(1.0), PointConfiguration(1),
                                        {33, 65});
    REQUIRE(std::abs(r.value - 0.5) < 1e-8);
}

TEST_CASE("Richardson verifies the observed order") {
    // fabricated first-order ladder
    auto r1 = oracle::richardson({9, 17, 33}, {1.10, 1.05, 1.025}, "test");
    REQUIRE(r1.converged);
    REQUIRE(r1.observed_order == Catch::Approx(1.0).margin(0.05));
    REQUIRE(r1.value == Catch::Approx(1.0).margin(1e-12));
    // wrong order flags unconverged
    auto r2 = oracle::richardson({9, 17, 33}, {1.16, 1.04, 1.01}, "test");
    REQUIRE_FALSE(r2.converged);
}

TEST_CASE("series: constant field value, tail bound, and small-density structure") {
    auto f = constant_field(2.0);
    auto s = oracle::oracle_nu_star_series(f, box_m(0, 1), Vec::scalar(1.0), 1.0, 3,
                                           {{}, {33, 65}, {17, 33}, {9, 17}});
    // truncated sum = q^2/(2c) (1 - P[N >= n_max])
    double expect = 0.25 * (1.0 - poisson_tail(3, 1.0));
    REQUIRE(s.total.value == Catch::Approx(expect).margin(1e-8));
    REQUIRE(s.tail_bound == Catch::Approx(poisson_tail(3, 1.0) * 0.5).margin(1e-12));

    // rho0 -> 0: the n = 1 term dominates
    auto tiny = oracle::oracle_nu_star_series(f, box_m(0, 1), Vec::scalar(1.0), 1e-3, 2,
                                              {{}, {33, 65}, {17, 33}});
    auto tiny1 = oracle::oracle_nu_star_series(f, box_m(0, 1), Vec::scalar(1.0), 1e-3, 1,
                                               {{}, {33, 65}});
    REQUIRE(std::abs(tiny.total.value - tiny1.total.value) <= tiny1.tail_bound + 1e-10);
}

TEST_CASE("series partial sums are nondecreasing in the truncation") {
    auto f = crowding_field(2.0, 0.25);
    std::vector<std::vector<int>> ladders{{}, {33, 65}, {17, 33}, {9, 17}};
    double prev = 0;
    for (int nmax = 1; nmax <= 3; ++nmax) {
        auto s = oracle::oracle_nu_star_series(f, box_m(0, 1), Vec::scalar(1.0), 1.0, nmax, ladders);
        REQUIRE(s.total.value >= prev - 1e-12);
        prev = s.total.value;
    }
}

TEST_CASE("oracle and CG solver agree after extrapolation") {
    auto f = crowding_field(2.0, 0.25);
    Vec q = Vec::scalar(1.0);
    PointConfiguration ext(1);
    ext.push(Vec(1, {0.55}));
    auto oracle_r = oracle::oracle_dual_energy(f, box_m(0, 1), 2, q, ext, {17, 33, 65});
    double jf = solve_dual(f, GridSpec(box_m(0, 1), 2, 65), q, ext).j_raw;
    double jff = solve_dual(f, GridSpec(box_m(0, 1), 2, 129), q, ext).j_raw;
    double est = 2.0 * jff - jf;
    REQUIRE(std::abs(est - oracle_r.value) <= 5.0 * oracle_r.error_estimate);
}

TEST_CASE("oracle self-consistency: extrapolation gap shrinks when refining") {
    auto f = crowding_field(2.0, 0.25);
    auto coarse = oracle::oracle_dual_energy(f, box_m(0, 1), 2, Vec::scalar(1.0),
                                             PointConfiguration(1), {9, 17, 33});
    auto fine = oracle::oracle_dual_energy(f, box_m(0, 1), 2, Vec::scalar(1.0), PointConfiguration(1),
                                           {17, 33, 65});
    REQUIRE(std::abs(fine.value - coarse.value) <= coarse.error_estimate + fine.error_estimate);
    REQUIRE(fine.error_estimate <= coarse.error_estimate);
}
