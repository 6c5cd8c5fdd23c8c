#include <catch2/catch_amalgamated.hpp>

#include "bulkdiff/conductance.hpp"

using namespace bulkdiff;

namespace {
PointConfiguration pts1(std::initializer_list<double> xs) {
    PointConfiguration c(1);
    for (double x : xs) c.push(Vec(1, {x}));
    return c;
}
}  // namespace

TEST_CASE("constant field returns c Id for any configuration") {
    auto f = constant_field(1.5);
    CounterRng rng(1, 0);
    auto mu = sample_poisson(4.0, box_m(0, 2), rng);
    SymMatrix a = evaluate(f, mu, Vec(2, {0.1, 0.2}));
    REQUIRE(a.at(0, 0) == 1.5);
    REQUIRE(a.at(1, 1) == 1.5);
    REQUIRE(a.at(0, 1) == 0.0);
}

TEST_CASE("crowding field counts neighbors within r, excluding the origin") {
    auto f = crowding_field(2.0, 0.25);
    REQUIRE(evaluate_origin(f, 1, pts1({0.0})).at(0, 0) == 1.0);
    REQUIRE(evaluate_origin(f, 1, pts1({0.0, 0.2})).at(0, 0) == 2.0);
    // neighbor outside the radius
    PointConfiguration mu = pts1({0.0, 0.9});
    REQUIRE(evaluate(f, mu, Vec(1, {0.0})).at(0, 0) == 1.0);
}

TEST_CASE("smooth pair field stays within the ellipticity band and is smooth at the cutoff") {
    auto f = smooth_pair_field(2.0);
    REQUIRE(evaluate_origin(f, 1, pts1({0.0})).at(0, 0) == 1.0);
    double near = evaluate_origin(f, 1, pts1({0.0, 0.499})).at(0, 0);
    REQUIRE(near >= 1.0);
    REQUIRE(near < 1.0001);  // phi -> 0 at the cutoff
    double close = evaluate_origin(f, 1, pts1({0.0, 0.05})).at(0, 0);
    REQUIRE(close > 1.5);
    REQUIRE(close <= 2.0);
}

TEST_CASE("stationarity of the extension") {
    auto f = crowding_field(2.0, 0.25);
    CounterRng rng(5, 0);
    auto mu = sample_poisson(3.0, box_m(0, 1), rng);
    Vec x(1, {0.15}), y(1, {0.4});
    SymMatrix lhs = evaluate(f, translate(mu, -y), x + y);
    SymMatrix rhs = evaluate(f, mu, x);
    REQUIRE(lhs.at(0, 0) == rhs.at(0, 0));
}

TEST_CASE("ellipticity holds along random directions") {
    for (auto f : {crowding_field(2.0, 0.25), smooth_pair_field(2.0)}) {
        CounterRng rng(17, 3);
        auto mu = sample_poisson(5.0, box_m(0, 2), rng);
        SymMatrix a = evaluate(f, mu, mu.empty() ? Vec(2) : mu.point(0));
        for (int t = 0; t < 100; ++t) {
            Vec xi(2, {rng.uniform(-1, 1), rng.uniform(-1, 1)});
            double n2 = xi.norm2();
            if (n2 < 1e-12) continue;
            double r = quad_form(xi, a) / n2;
            REQUIRE(r >= 1.0 - 1e-12);
            REQUIRE(r <= f.lambda + 1e-12);
        }
    }
}

TEST_CASE("built-in fields are permutation invariant") {
    auto f = smooth_pair_field(2.0);
    PointConfiguration mu = pts1({0.0, 0.1, -0.2, 0.3});
    PointConfiguration shuffled = pts1({0.3, 0.0, 0.1, -0.2});
    REQUIRE(evaluate_origin(f, 1, mu).at(0, 0) == evaluate_origin(f, 1, shuffled).at(0, 0));
}

TEST_CASE("locality probe accepts the built-ins and catches a long-range field") {
    PointConfiguration mu = pts1({0.0, 0.2, 0.8});
    REQUIRE(locality_probe(constant_field(1.0), 1, mu, 50, 1));
    REQUIRE(locality_probe(crowding_field(2.0, 0.25), 1, mu, 50, 2));
    REQUIRE(locality_probe(smooth_pair_field(2.0), 1, mu, 50, 3));

    // no particle inside the legitimate radius, so the long-range read is exposed
    mu = pts1({0.0, 0.55});

    ConductanceField bad;
    bad.spec = "adversarial(r=0.6)";
    bad.lambda = 2.0;
    bad.eval_origin_raw = [](int dim, const PointConfiguration& m) {
        bool seen = false;
        for (size_t i = 0; i < m.count(); ++i) {
            double n2 = m.point(i).norm2();
            if (n2 > 0 && n2 < 0.36) seen = true;  // reads radius 0.6
        }
        return SymMatrix::isotropic(dim, seen ? 2.0 : 1.0);
    };
    bad.finalize();
    REQUIRE_FALSE(locality_probe(bad, 1, mu, 200, 4));
}

TEST_CASE("adding a particle beyond the locality radius never changes the value") {
    auto f = crowding_field(2.0, 0.25);
    CounterRng rng(23, 9);
    for (int t = 0; t < 50; ++t) {
        auto mu = sample_poisson(2.0, box_m(0, 1), rng);
        Vec x(1, {rng.uniform(-0.5, 0.5)});
        double dist = rng.uniform(0.5, 3.0);
        Vec y = x + Vec(1, {rng.uniform(0, 1) < 0.5 ? dist : -dist});
        SymMatrix before = evaluate(f, mu, x);
        SymMatrix after = evaluate(f, add_point(mu, y), x);
        REQUIRE(before.at(0, 0) == after.at(0, 0));
    }
}

TEST_CASE("invariant violations fail fast") {
    ConductanceField skew;
    skew.spec = "skew";
    skew.lambda = 2.0;
    skew.eval_origin_raw = [](int dim, const PointConfiguration&) {
        SymMatrix m(dim);
        m.at(0, 0) = 1.5;
        m.at(1, 1) = 1.5;
        m.at(0, 1) = 0.3;
        m.at(1, 0) = -0.3;
        return m;
    };
    skew.finalize();
    REQUIRE_THROWS_AS(evaluate_origin(skew, 2, PointConfiguration(2)), InvariantViolation);

    ConductanceField weak;
    weak.spec = "weak";
    weak.lambda = 2.0;
    weak.eval_origin_raw = [](int dim, const PointConfiguration&) {
        return SymMatrix::isotropic(dim, 0.5);
    };
    weak.finalize();
    REQUIRE_THROWS_AS(evaluate_origin(weak, 1, PointConfiguration(1)), InvariantViolation);
}

TEST_CASE("field registry builds canonical ids") {
    auto a = make_field("crowding", {{"lambda", 2.0}, {"r", 0.25}});
    auto b = crowding_field(2.0, 0.25);
    REQUIRE(a.field_id == b.field_id);
    auto c = make_field("crowding", {{"lambda", 1.5}, {"r", 0.25}});
    REQUIRE(a.field_id != c.field_id);
    REQUIRE_THROWS_AS(make_field("unknown", {}), std::invalid_argument);
}
