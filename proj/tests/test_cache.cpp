#include <atomic>
#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <thread>

#include "bulkdiff/corrector_cache.hpp"
#include "bulkdiff/estimator.hpp"

using namespace bulkdiff;

namespace {
DiscreteCorrector tiny_corrector() {
    return solve_dual(crowding_field(2.0, 0.25), GridSpec(box_m(0, 1), 1, 9), Vec::scalar(1.0),
                      PointConfiguration(1));
}
}  // namespace

TEST_CASE("hits and misses count as specified") {
    CorrectorCache cache("");
    REQUIRE(cache.stats().hits == 0);
    REQUIRE(cache.stats().misses == 0);
    REQUIRE(cache.stats().entries == 0);

    auto field = crowding_field(2.0, 0.25);
    GridSpec g(box_m(0, 1), 1, 9);
    CacheKey key = make_cache_key(field, g, Vec::scalar(1.0), PointConfiguration(1));
    int solves = 0;
    auto solve = [&]() {
        ++solves;
        return tiny_corrector();
    };
    cache.get_or_solve(key, solve);
    cache.get_or_solve(key, solve);
    REQUIRE(solves == 1);
    REQUIRE(cache.stats().hits == 1);
    REQUIRE(cache.stats().misses == 1);
    REQUIRE(cache.stats().entries == 1);
}

TEST_CASE("key canonicalization: permutation, collar restriction, quantization") {
    auto field = crowding_field(2.0, 0.25);
    GridSpec g(box_m(0, 1), 2, 17);
    PointConfiguration e1(1), e2(1), e3(1), e4(1);
    e1.push(Vec(1, {0.6}));
    e1.push(Vec(1, {-0.8}));
    e2.push(Vec(1, {-0.8}));
    e2.push(Vec(1, {0.6}));  // permuted
    e3 = e1;
    e3.push(Vec(1, {5.0}));  // beyond the collar
    e4.push(Vec(1, {0.6 + 1e-14}));
    e4.push(Vec(1, {-0.8}));  // inside the quantization grid
    Vec q = Vec::scalar(1.0);
    auto k1 = make_cache_key(field, g, q, e1).digest();
    REQUIRE(k1 == make_cache_key(field, g, q, e2).digest());
    REQUIRE(k1 == make_cache_key(field, g, q, e3).digest());
    REQUIRE(k1 == make_cache_key(field, g, q, e4).digest());
    PointConfiguration moved(1);
    moved.push(Vec(1, {0.61}));
    moved.push(Vec(1, {-0.8}));
    REQUIRE(k1 != make_cache_key(field, g, q, moved).digest());
}

TEST_CASE("distinct keys create distinct entries") {
    CorrectorCache cache("");
    auto field = crowding_field(2.0, 0.25);
    Vec q = Vec::scalar(1.0);
    auto solve = [&]() { return tiny_corrector(); };
    cache.get_or_solve(make_cache_key(field, GridSpec(box_m(0, 1), 1, 9), q, PointConfiguration(1)),
                       solve);
    cache.get_or_solve(make_cache_key(field, GridSpec(box_m(0, 1), 2, 9), q, PointConfiguration(1)),
                       solve);
    REQUIRE(cache.stats().entries == 2);
}

TEST_CASE("single flight under 16 concurrent requests") {
    CorrectorCache cache("");
    auto field = crowding_field(2.0, 0.25);
    CacheKey key = make_cache_key(field, GridSpec(box_m(0, 1), 1, 9), Vec::scalar(1.0),
                                  PointConfiguration(1));
    std::atomic<int> solves{0};
    auto solve = [&]() {
        solves.fetch_add(1);
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        return tiny_corrector();
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < 16; ++t) pool.emplace_back([&] { cache.get_or_solve(key, solve); });
    for (auto& th : pool) th.join();
    REQUIRE(solves.load() == 1);
}

TEST_CASE("disk tier round-trips and survives restarts; corruption evicts") {
    namespace fs = std::filesystem;
    std::string dir = (fs::temp_directory_path() / "bulkdiff_cache_test").string();
    fs::remove_all(dir);
    auto field = crowding_field(2.0, 0.25);
    CacheKey key = make_cache_key(field, GridSpec(box_m(0, 1), 1, 9), Vec::scalar(1.0),
                                  PointConfiguration(1));
    DiscreteCorrector first;
    {
        CorrectorCache cache(dir);
        first = *cache.get_or_solve(key, [] { return tiny_corrector(); });
    }
    {
        CorrectorCache cache(dir);
        int solves = 0;
        auto got = cache.get_or_solve(key, [&] {
            ++solves;
            return tiny_corrector();
        });
        REQUIRE(solves == 0);
        REQUIRE(cache.stats().disk_loads == 1);
        REQUIRE(got->values == first.values);
    }
    // corrupt the entry file; the cache must warn, evict, and re-solve
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".corr") {
            std::fstream f(e.path(), std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(16);
            f.put('\x5a');
        }
    }
    {
        CorrectorCache cache(dir);
        int solves = 0;
        cache.get_or_solve(key, [&] {
            ++solves;
            return tiny_corrector();
        });
        REQUIRE(solves == 1);
    }
    fs::remove_all(dir);
}

TEST_CASE("cache transparency: estimates agree bitwise with and without caching") {
    auto field = crowding_field(2.0, 0.25);
    McConfig mc;
    mc.n_outer = 4;
    mc.n_max = 2;
    mc.h = 1.0 / 16;
    mc.seed = 4711;
    Estimator with(field, 1, std::make_shared<CorrectorCache>(""));
    Estimator without(field, 1, nullptr);
    MCEstimate a = estimate_nu_star(with, 0, Vec::scalar(1.0), 1.0, mc);
    MCEstimate b = estimate_nu_star(without, 0, Vec::scalar(1.0), 1.0, mc);
    REQUIRE(a.value == b.value);
    REQUIRE(a.stderr_ == b.stderr_);
}

TEST_CASE("LRU eviction respects the byte budget") {
    CorrectorCache cache("", 16 * 1024);  // tiny budget
    auto field = crowding_field(2.0, 0.25);
    Vec q = Vec::scalar(1.0);
    for (int p : {9, 11, 13, 15, 17, 19, 21, 23}) {
        PointConfiguration ext(1);
        ext.push(Vec(1, {0.5 + 0.001 * p}));
        cache.get_or_solve(make_cache_key(field, GridSpec(box_m(0, 1), 2, p), q, ext), [&] {
            return solve_dual(field, GridSpec(box_m(0, 1), 2, p), q, ext);
        });
    }
    auto st = cache.stats();
    REQUIRE(st.evictions > 0);
    REQUIRE(st.bytes <= 16 * 1024 + 8 * 1024);
}
