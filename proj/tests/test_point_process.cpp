#include <catch2/catch_amalgamated.hpp>

#include "bulkdiff/point_process.hpp"

using namespace bulkdiff;

TEST_CASE("zero intensity gives the empty configuration") {
    CounterRng rng(7, 0);
    auto cfg = sample_poisson(0.0, box_m(0, 2), rng);
    REQUIRE(cfg.empty());
}

TEST_CASE("negative intensity is rejected") {
    CounterRng rng(7, 0);
    REQUIRE_THROWS_AS(sample_poisson(-1.0, box_m(0, 1), rng), std::invalid_argument);
}

TEST_CASE("Poisson counts have the right mean and variance") {
    const double rho = 2.0;
    const long N = 100'000;
    double sum = 0, sum2 = 0;
    for (long s = 0; s < N; ++s) {
        CounterRng rng(123, static_cast<uint64_t>(s));
        double n = static_cast<double>(sample_poisson(rho, box_m(0, 1), rng).count());
        sum += n;
        sum2 += n * n;
    }
    double mean = sum / N;
    double var = sum2 / N - mean * mean;
    double se = std::sqrt(rho / N);
    REQUIRE(std::abs(mean - rho) < 3 * se);
    REQUIRE(std::abs(var - rho) / rho < 0.05);
}

TEST_CASE("identical seeds give bit-identical configurations") {
    CounterRng a(99, 5), b(99, 5);
    auto ca = sample_poisson(3.0, box_m(1, 2), a);
    auto cb = sample_poisson(3.0, box_m(1, 2), b);
    REQUIRE(ca.coords == cb.coords);
}

TEST_CASE("PTRS sampling matches the Poisson law at large mean") {
    const double mean = 80.0;
    const long N = 40'000;
    double sum = 0, sum2 = 0;
    for (long s = 0; s < N; ++s) {
        CounterRng rng(5150, static_cast<uint64_t>(s));
        double n = static_cast<double>(rng.poisson(mean));
        sum += n;
        sum2 += n * n;
    }
    double m = sum / N, v = sum2 / N - m * m;
    REQUIRE(std::abs(m - mean) < 4 * std::sqrt(mean / N));
    REQUIRE(std::abs(v - mean) / mean < 0.05);
}

TEST_CASE("restriction behaves as intersection") {
    Box U = box_m(0, 1);
    PointConfiguration mu(1);
    mu.push(Vec(1, {-0.7}));
    mu.push(Vec(1, {0.1}));
    mu.push(Vec(1, {0.4}));
    auto r = restrict_to(mu, U);
    REQUIRE(r.count() == 2);
    REQUIRE(r.point(0)[0] == 0.1);
    REQUIRE(r.point(1)[0] == 0.4);

    // all inside: unchanged contents
    PointConfiguration inside(1);
    inside.push(Vec(1, {0.2}));
    REQUIRE(config_equal(restrict_to(inside, U), inside));
    REQUIRE(restrict_to(PointConfiguration(1), U).empty());
}

TEST_CASE("nested restriction collapses") {
    CounterRng rng(42, 0);
    auto mu = sample_poisson(5.0, box_m(1, 2), rng);
    Box V = box_m(1, 2), U = box_m(0, 2);
    REQUIRE(config_equal(restrict_to(restrict_to(mu, V), U), restrict_to(mu, U)));
}

TEST_CASE("translation: identity, shift, group law, counts") {
    PointConfiguration mu(2);
    mu.push(Vec(2, {1.0, 0.0}));
    REQUIRE(config_equal(translate(mu, Vec(2)), mu));
    auto t = translate(mu, Vec(2, {1.0, 0.0}));
    REQUIRE(t.point(0)[0] == 0.0);
    REQUIRE(t.point(0)[1] == 0.0);
    CounterRng rng(3, 1);
    auto big = sample_poisson(4.0, box_m(1, 2), rng);
    Vec x(2, {0.3, -0.8});
    auto round_trip = translate(translate(big, x), -x);
    REQUIRE(round_trip.count() == big.count());
    for (size_t i = 0; i < big.coords.size(); ++i)
        REQUIRE(round_trip.coords[i] == Catch::Approx(big.coords[i]).margin(1e-15));
    REQUIRE(translate(big, x).count() == big.count());
}

TEST_CASE("superposition adds counts and rejects dimension mismatch") {
    PointConfiguration a(1), b(1), c(2);
    a.push(Vec(1, {0.1}));
    b.push(Vec(1, {0.2}));
    b.push(Vec(1, {0.3}));
    REQUIRE(superpose(a, b).count() == 3);
    REQUIRE(config_equal(superpose(a, PointConfiguration(1)), a));
    REQUIRE_THROWS_AS(superpose(a, c), std::invalid_argument);
}

TEST_CASE("superposed Poisson counts follow the summed intensity") {
    // chi-square goodness of fit on counts of sample(1.0) + sample(0.5)
    const double r0 = 1.0, r1 = 0.5;
    const long N = 50'000;
    std::vector<long> hist(12, 0);
    for (long s = 0; s < N; ++s) {
        CounterRng rng0(777, static_cast<uint64_t>(2 * s));
        CounterRng rng1(777, static_cast<uint64_t>(2 * s + 1));
        auto m = superpose(sample_poisson(r0, box_m(0, 1), rng0), sample_poisson(r1, box_m(0, 1), rng1));
        size_t k = std::min<size_t>(m.count(), hist.size() - 1);
        hist[k]++;
    }
    double chi2 = 0;
    int dof = 0;
    for (size_t k = 0; k < hist.size(); ++k) {
        double pk = k + 1 < hist.size() ? poisson_pmf(static_cast<long>(k), r0 + r1)
                                        : poisson_tail(static_cast<long>(k), r0 + r1);
        double expect = pk * N;
        if (expect < 5) continue;
        chi2 += std::pow(hist[k] - expect, 2) / expect;
        ++dof;
    }
    // dof ~ 7; the 0.999 quantile of chi2(9) is ~27.9
    REQUIRE(chi2 < 30.0);
}

TEST_CASE("serialization round-trips exactly") {
    CounterRng rng(31337, 2);
    auto mu = sample_poisson(3.0, box_m(1, 2), rng);
    auto back = deserialize(serialize(mu));
    REQUIRE(back.dim == mu.dim);
    REQUIRE(back.coords == mu.coords);
    REQUIRE(back.region.has_value());
    REQUIRE(back.region->side == mu.region->side);
    REQUIRE(back.region->center == mu.region->center);

    PointConfiguration odd(1);
    odd.push(Vec(1, {0.1}));
    odd.push(Vec(1, {1.0 / 3.0}));
    odd.push(Vec(1, {-1e-15}));
    auto odd2 = deserialize(serialize(odd));
    REQUIRE(odd2.coords == odd.coords);
    REQUIRE_FALSE(odd2.region.has_value());
}

TEST_CASE("deserialize rejects malformed input") {
    REQUIRE_THROWS(deserialize(""));
    REQUIRE_THROWS(deserialize("dim x; region none\n"));
    REQUIRE_THROWS(deserialize("bogus 1; region none\n"));
}

TEST_CASE("Mecke residuals vanish within Monte Carlo error") {
    Box U = box_m(0, 1);
    const long N = 20'000;
    auto mk = mecke_residual([](const PointConfiguration&, const Vec&) { return 1.0; }, 1.0, U, N, 11);
    REQUIRE(mk.residual <= 3 * mk.stderr_ + 1e-12);
    auto mk2 = mecke_residual(
        [&U](const PointConfiguration& mu, const Vec&) {
            return static_cast<double>(restrict_to(mu, U).count());
        },
        1.0, U, N, 12);
    REQUIRE(mk2.residual <= 3 * mk2.stderr_);
    // closed-form check of the second functional: both sides equal 1 + rho|U|
    REQUIRE(std::abs(mk2.rhs - 2.0) < 0.05);
    auto mk3 = mecke_residual(
        [&U](const PointConfiguration& mu, const Vec&) {
            return restrict_to(mu, U).count() == 1 ? 1.0 : 0.0;
        },
        1.0, U, N, 13);
    REQUIRE(mk3.residual <= 3 * mk3.stderr_);
    REQUIRE(std::abs(mk3.rhs - std::exp(-1.0)) < 0.02);
    REQUIRE_THROWS_AS(
        mecke_residual([](const PointConfiguration&, const Vec&) { return 1.0; }, 0.0, U, 10, 1),
        std::invalid_argument);
}
