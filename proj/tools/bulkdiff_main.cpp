// Command-line front end: batch estimation runs, oracle fixture generation,
// acceptance verification, and cache inspection. Results go to standard
// output (machine readable); progress and warnings to standard error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bulkdiff/acceptance.hpp"
#include "bulkdiff/runner.hpp"

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& sets) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& s : sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw bulkdiff::ConfigError("--set expects key=value, got '" + s + "'");
        std::string val = s.substr(eq + 1);
        for (auto& c : val)
            if (c == ',') c = ' ';
        out.push_back({s.substr(0, eq), val});
    }
    return out;
}

int cmd_estimate(const std::string& config_path, const std::vector<std::string>& sets,
                 long seed_override, int threads, const std::string& cache_dir,
                 const std::string& out_csv) {
    using namespace bulkdiff;
    auto overrides = parse_overrides(sets);
    if (seed_override >= 0) overrides.push_back({"mc.seed", std::to_string(seed_override)});
    if (threads > 0) overrides.push_back({"mc.threads", std::to_string(threads)});
    if (!cache_dir.empty()) overrides.push_back({"out.cache_dir", cache_dir});
    if (!out_csv.empty()) overrides.push_back({"out.csv", out_csv});
    RunConfig rc = RunConfig::from_text(read_file(config_path), overrides);
    std::fprintf(stderr, "[estimate] field=%s dim=%d seed=%llu\n", rc.field.spec.c_str(), rc.dim,
                 static_cast<unsigned long long>(rc.mc.seed));
    if (!rc.gnuplot_dir.empty()) std::filesystem::create_directories(rc.gnuplot_dir);
    RunArtifacts art;
    try {
        art = run_estimate(rc);
    } catch (const TruncationError& e) {
        std::fprintf(stderr, "[estimate] unconverged: %s\n", e.what());
        return 3;
    } catch (const SolverError& e) {
        std::fprintf(stderr, "[estimate] solver failure: %s\n", e.what());
        return 3;
    } catch (const InvariantViolation& e) {
        std::fprintf(stderr, "[estimate] invariant violation: %s\n", e.what());
        return 2;
    }
    if (!rc.csv_path.empty()) {
        art.csv.write(rc.csv_path);
        std::fprintf(stderr, "[estimate] wrote %s\n", rc.csv_path.c_str());
    } else {
        std::fputs(art.csv.str().c_str(), stdout);
    }
    if (!rc.json_path.empty()) {
        std::ofstream jf(rc.json_path, std::ios::trunc);
        jf << art.json.dump(2) << "\n";
        std::fprintf(stderr, "[estimate] wrote %s\n", rc.json_path.c_str());
    }
    return 0;
}

int cmd_oracle(const std::string& out_path, long seed, int threads) {
    using namespace bulkdiff;
    AcceptanceConfig cfg;
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    cfg.threads = threads;
    std::fprintf(stderr, "[oracle] building fixtures (direct solves, single-threaded)...\n");
    nlohmann::json fx = build_acceptance_fixtures(cfg);
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) {
        std::fprintf(stderr, "[oracle] cannot write '%s'\n", out_path.c_str());
        return 1;
    }
    out << fx.dump(2) << "\n";
    std::fprintf(stderr, "[oracle] wrote %s\n", out_path.c_str());
    return 0;
}

int cmd_verify(const std::string& fixtures_path, long seed, int threads,
               const std::string& cache_dir) {
    using namespace bulkdiff;
    if (!std::filesystem::exists(fixtures_path)) {
        std::fprintf(stderr,
                     "[verify] fixtures '%s' not found; run `bulkdiff oracle --out %s` first\n",
                     fixtures_path.c_str(), fixtures_path.c_str());
        return 1;
    }
    nlohmann::json fx = nlohmann::json::parse(read_file(fixtures_path));
    AcceptanceConfig cfg;
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    cfg.threads = threads;
    cfg.cache_dir = cache_dir;
    auto results = run_acceptance_criteria(fx, cfg);
    bool ok = print_acceptance(std::cout, results);
    return ok ? 0 : 1;
}

int cmd_cache_stats(const std::string& cache_dir) {
    namespace fs = std::filesystem;
    if (!fs::exists(cache_dir)) {
        std::fprintf(stderr, "[cache-stats] no cache at '%s'\n", cache_dir.c_str());
        return 1;
    }
    size_t entries = 0, bytes = 0;
    for (const auto& e : fs::directory_iterator(cache_dir)) {
        if (e.path().extension() == ".corr") {
            ++entries;
            bytes += static_cast<size_t>(e.file_size());
        }
    }
    std::printf("entries,bytes\n%zu,%zu\n", entries, bytes);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bulk diffusion matrix estimation for locally interacting particle systems"};
    app.require_subcommand(1);

    std::string config_path, fixtures_path = "oracle_fixtures.json", cache_dir, out_path;
    std::vector<std::string> sets;
    long seed = -1;
    int threads = 0;

    auto* est = app.add_subcommand("estimate", "run the estimators of a config file");
    est->add_option("--config", config_path, "run config file")->required();
    est->add_option("--set", sets, "override a config leaf, key=value (repeatable)");
    est->add_option("--seed", seed, "override mc.seed");
    est->add_option("--threads", threads, "worker threads (default: hardware)");
    est->add_option("--cache-dir", cache_dir, "corrector cache directory");
    est->add_option("--out", out_path, "CSV output path (default: stdout)");

    auto* orc = app.add_subcommand("oracle", "generate oracle reference fixtures");
    orc->add_option("--out", fixtures_path, "fixtures JSON path");
    orc->add_option("--seed", seed, "fixture seed");
    orc->add_option("--threads", threads, "worker threads");

    auto* ver = app.add_subcommand("verify", "run the acceptance suite against fixtures");
    ver->add_option("--fixtures", fixtures_path, "fixtures JSON from `oracle`");
    ver->add_option("--seed", seed, "suite seed");
    ver->add_option("--threads", threads, "worker threads");
    ver->add_option("--cache-dir", cache_dir, "corrector cache directory");

    auto* cst = app.add_subcommand("cache-stats", "inspect an on-disk corrector cache");
    cst->add_option("--cache-dir", cache_dir, "cache directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (est->parsed()) return cmd_estimate(config_path, sets, seed, threads, cache_dir, out_path);
        if (orc->parsed()) return cmd_oracle(fixtures_path, seed, threads);
        if (ver->parsed()) return cmd_verify(fixtures_path, seed, threads, cache_dir);
        if (cst->parsed()) return cmd_cache_stats(cache_dir);
    } catch (const bulkdiff::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
