// Acceptance suite: builds the oracle fixtures, runs every criterion at its
// stated tolerance, and prints one pass/fail line per criterion.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "bulkdiff/acceptance.hpp"

int main(int argc, char** argv) {
    using namespace bulkdiff;
    AcceptanceConfig cfg;
    cfg.threads = 0;  // hardware
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--seed" && i + 1 < argc) cfg.seed = std::strtoull(argv[++i], nullptr, 10);
        if (a == "--threads" && i + 1 < argc) cfg.threads = std::atoi(argv[++i]);
    }
    auto t0 = std::chrono::steady_clock::now();
    std::fprintf(stderr, "[acceptance] building oracle fixtures...\n");
    nlohmann::json fixtures = build_acceptance_fixtures(cfg);
    std::fprintf(stderr, "[acceptance] fixtures ready (%.1fs); running criteria\n",
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    auto results = run_acceptance_criteria(fixtures, cfg);
    bool ok = print_acceptance(std::cout, results);
    std::fprintf(stderr, "[acceptance] total %.1fs\n",
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return ok ? 0 : 1;
}
