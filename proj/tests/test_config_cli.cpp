#include <catch2/catch_amalgamated.hpp>

#include "bulkdiff/acceptance.hpp"
#include "bulkdiff/config.hpp"
#include "bulkdiff/runner.hpp"

using namespace bulkdiff;

namespace {
const char* kMinimalConfig = R"(
# minimal run
field = constant
field.c = 2
dim = 1
m = 0
rho0 = 1
q = 1
quantities = nu_star
[mc]
n_outer = 4
n_max = 2
h = 0.0625
seed = 9
exterior = none
)";
}

TEST_CASE("config parsing: sections, defaults, validation") {
    RunConfig rc = RunConfig::from_text(kMinimalConfig);
    REQUIRE(rc.field.spec == "constant(c=2)");
    REQUIRE(rc.dim == 1);
    REQUIRE(rc.mc.n_outer == 4);
    REQUIRE(rc.mc.exterior_mode == ExteriorMode::none);
    REQUIRE(rc.mc.seed == 9);
    REQUIRE(rc.quantities == std::vector<std::string>{"nu_star"});
}

TEST_CASE("unknown keys are rejected with their line number") {
    std::string text = std::string(kMinimalConfig) + "typo_key = 3\n";
    try {
        RunConfig::from_text(text);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("typo_key") != std::string::npos);
        REQUIRE(std::string(e.what()).find("line") != std::string::npos);
    }
}

TEST_CASE("malformed lines and invalid ranges are rejected") {
    REQUIRE_THROWS_AS(RunConfig::from_text("field constant\n"), ConfigError);
    REQUIRE_THROWS_AS(RunConfig::from_text("rho0 = -1\n"), ConfigError);
    REQUIRE_THROWS_AS(RunConfig::from_text("quantities = bogus\n"), ConfigError);
    REQUIRE_THROWS_AS(RunConfig::from_text("[mc]\nh = 0.9\n"), ConfigError);
    REQUIRE_THROWS_AS(RunConfig::from_text("m = 7\n"), ConfigError);
}

TEST_CASE("flag overrides replace any leaf") {
    RunConfig rc = RunConfig::from_text(kMinimalConfig, {{"mc.n_outer", "12"}, {"field.c", "1.5"}});
    REQUIRE(rc.mc.n_outer == 12);
    REQUIRE(rc.field.spec == "constant(c=1.5)");
}

TEST_CASE("a minimal estimate run emits the expected CSV row") {
    RunConfig rc = RunConfig::from_text(kMinimalConfig);
    RunArtifacts art = run_estimate(rc);
    std::string csv = art.csv.str();
    REQUIRE(csv.rfind("field_id,m,rho0,quantity,value,stderr,n_outer,n_max,grid_h\n", 0) == 0);
    REQUIRE(csv.find("nu_star") != std::string::npos);
    // nu_star for constant(2) is 1/4 up to the reported truncation tail
    double val = art.json["results"][0]["estimate"]["value"];
    REQUIRE(val == Catch::Approx(0.25).margin(1e-9));
}

TEST_CASE("repeated runs are byte-identical") {
    RunConfig rc = RunConfig::from_text(kMinimalConfig);
    std::string a = run_estimate(rc).csv.str();
    std::string b = run_estimate(rc).csv.str();
    REQUIRE(a == b);
}

namespace {
/// Coarse-ladder fixtures for fast negative-control testing.
nlohmann::json quick_fixtures() {
    nlohmann::json fx;
    auto field = crowding_field(2.0, 0.25);
    const Box U = box_m(0, 1);
    const Vec q = Vec::scalar(1.0);
    fx["meta"] = {{"field", field.spec}};
    nlohmann::json duals = nlohmann::json::array();
    {
        auto r = oracle::oracle_dual_energy(field, U, 1, q, PointConfiguration(1), {17, 33, 65});
        nlohmann::json j = oracle_result_to_json(r);
        j["n"] = 1;
        j["exterior"] = std::vector<double>{};
        j["tag"] = "n1";
        duals.push_back(j);
    }
    {
        auto r = oracle::oracle_dual_energy(field, U, 2, q, PointConfiguration(1), {9, 17, 33});
        nlohmann::json j = oracle_result_to_json(r);
        j["n"] = 2;
        j["exterior"] = std::vector<double>{};
        j["tag"] = "n2";
        duals.push_back(j);
    }
    fx["dual_energies"] = duals;
    nlohmann::json series = nlohmann::json::array();
    auto s = oracle::oracle_nu_star_series(field, U, q, 1.0, 2, {{}, {17, 33, 65}, {9, 17, 33}});
    series.push_back({{"rho0", 1.0},
                      {"n_max", 2},
                      {"value", s.total.value},
                      {"error", s.total.error_estimate},
                      {"tail_bound", s.tail_bound},
                      {"converged", s.total.converged}});
    fx["nu_star_series"] = series;
    return fx;
}
}  // namespace

TEST_CASE("oracle-agreement criterion passes on honest fixtures and fails on tampered ones") {
    nlohmann::json fx = quick_fixtures();
    AcceptanceConfig cfg;
    cfg.seed = 77;
    CriterionResult honest = criterion_oracle_agreement(fx, cfg);
    REQUIRE(honest.pass);

    nlohmann::json tampered = fx;
    double v = tampered["nu_star_series"][0]["value"];
    tampered["nu_star_series"][0]["value"] = v * 1.1;
    CriterionResult bad = criterion_oracle_agreement(tampered, cfg);
    REQUIRE_FALSE(bad.pass);
}

TEST_CASE("gnuplot remainder emission is two-column data") {
    ExpansionReport rep;
    rep.k = 1;
    rep.m = 0;
    rep.rho0 = 1.0;
    rep.rho_grid = {0.1, 0.2};
    rep.remainder = {1e-3, 4e-3};
    rep.remainder_stderr = {1e-5, 1e-5};
    rep.fitted_slope = 2.0;
    std::string path = (std::filesystem::temp_directory_path() / "bd_rem.dat").string();
    write_remainder_plot(rep, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    REQUIRE(line.rfind("# rho", 0) == 0);
    std::getline(in, line);
    REQUIRE(line == "0.1 0.001 1e-05");
    std::filesystem::remove(path);
}

TEST_CASE("run dispatch covers the diagnostic quantities") {
    const char* text = R"(
field = crowding
field.lambda = 2
field.r = 0.25
dim = 1
m = 0
rho0 = 1
rho = 0.1
q = 1
p = 1
k = 1
quantities = c_km expansion harmonic key_probe mecke continuity
[mc]
n_outer = 4
n_max = 1
h = 0.125
seed = 3
exterior = none
collar_nodes = 2
)";
    RunConfig rc = RunConfig::from_text(text);
    RunArtifacts art = run_estimate(rc);
    std::string csv = art.csv.str();
    for (const char* tag : {"c_1m", "R_1_slope", "harmonic(E={1},F={1})", "key_probe(|F|=2,|G|=2)",
                            "mecke(H=indicator1)", "continuity_abar_star[0]"})
        REQUIRE(csv.find(tag) != std::string::npos);
    bool saw_split = false;
    for (const auto& r : art.json["results"])
        if (r.contains("leibniz_split")) saw_split = true;
    REQUIRE(saw_split);
}

TEST_CASE("a field failing the locality audit is rejected before any solve") {
    RunConfig rc = RunConfig::from_text(kMinimalConfig);
    rc.field.eval_origin_raw = [](int dim, const PointConfiguration& m) {
        double s = 1.0;
        for (size_t i = 0; i < m.count(); ++i)
            if (m.point(i).norm2() > 0 && m.point(i).norm() < 0.8) s = 1.5;
        return SymMatrix::isotropic(dim, s);
    };
    REQUIRE_THROWS_AS(run_estimate(rc), InvariantViolation);
}
