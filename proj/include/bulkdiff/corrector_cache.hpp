#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bulkdiff/conductance.hpp"
#include "bulkdiff/grid.hpp"

namespace bulkdiff {

/// Quantization grid for cache-key coordinates: positions closer than 1e-12
/// are identified.
inline int64_t quantize_tick(double x) { return static_cast<int64_t>(std::llround(x * 1e12)); }

/// Digest of an exterior configuration after collar restriction: points sorted
/// lexicographically on quantized coordinates, so reordering cannot change it.
inline uint64_t exterior_digest(const PointConfiguration& exterior, const Box& U, double collar = 0.5) {
    PointConfiguration c = restrict_collar(exterior, U, collar);
    std::vector<std::vector<int64_t>> pts(c.count());
    for (size_t i = 0; i < c.count(); ++i) {
        pts[i].resize(static_cast<size_t>(c.dim));
        for (int k = 0; k < c.dim; ++k) pts[i][static_cast<size_t>(k)] = quantize_tick(c.point(i)[k]);
    }
    std::sort(pts.begin(), pts.end());
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : pts)
        for (int64_t t : p) h = fnv1a64(&t, sizeof(t), h);
    return h;
}

/// Content key of a solved corrector. Equal keys have byte-equal canonical
/// encodings; the digest of the encoding names the on-disk entry.
struct CacheKey {
    uint64_t field_id = 0;
    int dim = 1;
    std::array<int64_t, kMaxDim> center_ticks{};
    int64_t side_ticks = 0;
    int n = 0;
    int points = 0;
    std::array<int64_t, kMaxDim> q_ticks{};
    uint64_t ext_digest = 0;

    std::string canonical_bytes() const {
        std::string buf;
        detail::put(buf, field_id);
        detail::put(buf, static_cast<int32_t>(dim));
        for (int k = 0; k < kMaxDim; ++k) detail::put(buf, center_ticks[static_cast<size_t>(k)]);
        detail::put(buf, side_ticks);
        detail::put(buf, static_cast<int32_t>(n));
        detail::put(buf, static_cast<int32_t>(points));
        for (int k = 0; k < kMaxDim; ++k) detail::put(buf, q_ticks[static_cast<size_t>(k)]);
        detail::put(buf, ext_digest);
        return buf;
    }
    uint64_t digest() const {
        std::string b = canonical_bytes();
        return fnv1a64(b.data(), b.size());
    }
};

inline CacheKey make_cache_key(const ConductanceField& field, const GridSpec& grid, const Vec& q,
                               const PointConfiguration& exterior) {
    CacheKey k;
    k.field_id = field.field_id;
    k.dim = grid.dim();
    for (int c = 0; c < grid.dim(); ++c) k.center_ticks[static_cast<size_t>(c)] = quantize_tick(grid.box.center[c]);
    k.side_ticks = quantize_tick(grid.box.side);
    k.n = grid.n;
    k.points = grid.points;
    for (int c = 0; c < q.dim; ++c) k.q_ticks[static_cast<size_t>(c)] = quantize_tick(q[c]);
    k.ext_digest = exterior_digest(exterior, grid.box, field.locality_radius);
    return k;
}

struct CacheStats {
    long hits = 0;
    long misses = 0;
    long entries = 0;
    long bytes = 0;
    long disk_loads = 0;
    long evictions = 0;
};

/// Content-addressed store for solved correctors: in-memory LRU front with an
/// optional one-file-per-entry disk tier shared across processes. Cold keys are
/// solved exactly once under concurrency (single flight).
class CorrectorCache {
public:
    explicit CorrectorCache(std::string disk_dir = "", size_t mem_budget = size_t{2} << 30)
        : dir_(std::move(disk_dir)), budget_(mem_budget) {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    using CorrPtr = std::shared_ptr<const DiscreteCorrector>;

    CorrPtr get_or_solve(const CacheKey& key, const std::function<DiscreteCorrector()>& solve) {
        const uint64_t dg = key.digest();
        std::shared_future<CorrPtr> fut;
        bool owner = false;
        {
            std::unique_lock lk(mu_);
            if (auto hit = lookup_locked(dg)) {
                ++stats_.hits;
                return *hit;
            }
            auto it = inflight_.find(dg);
            if (it != inflight_.end()) {
                fut = it->second;
            } else {
                std::promise<CorrPtr> prom;
                fut = prom.get_future().share();
                inflight_[dg] = fut;
                promises_[dg] = std::move(prom);
                owner = true;
                ++stats_.misses;
            }
        }
        if (!owner) {
            auto got = fut.get();
            std::unique_lock lk(mu_);
            ++stats_.hits;
            return got;
        }
        CorrPtr ptr;
        try {
            if (auto disk = load_disk(key, dg)) {
                ptr = std::make_shared<const DiscreteCorrector>(std::move(*disk));
                std::unique_lock lk(mu_);
                ++stats_.disk_loads;
            } else {
                ptr = std::make_shared<const DiscreteCorrector>(solve());
                store_disk(key, dg, *ptr);
            }
        } catch (...) {
            std::unique_lock lk(mu_);
            promises_[dg].set_exception(std::current_exception());
            promises_.erase(dg);
            inflight_.erase(dg);
            throw;
        }
        {
            std::unique_lock lk(mu_);
            insert_locked(dg, ptr);
            promises_[dg].set_value(ptr);
            promises_.erase(dg);
            inflight_.erase(dg);
        }
        return ptr;
    }

    CacheStats stats() const {
        std::unique_lock lk(mu_);
        return stats_;
    }

private:
    struct Entry {
        CorrPtr value;
        size_t bytes;
        std::list<uint64_t>::iterator lru_it;
    };

    std::string dir_;
    size_t budget_;
    mutable std::mutex mu_;
    std::unordered_map<uint64_t, Entry> map_;
    std::list<uint64_t> lru_;  // front = most recent
    std::unordered_map<uint64_t, std::shared_future<CorrPtr>> inflight_;
    std::unordered_map<uint64_t, std::promise<CorrPtr>> promises_;
    CacheStats stats_;

    std::optional<CorrPtr> lookup_locked(uint64_t dg) {
        auto it = map_.find(dg);
        if (it == map_.end()) return std::nullopt;
        lru_.erase(it->second.lru_it);
        lru_.push_front(dg);
        it->second.lru_it = lru_.begin();
        return it->second.value;
    }

    void insert_locked(uint64_t dg, const CorrPtr& ptr) {
        size_t bytes = ptr->values.size() * sizeof(double) + 256;
        lru_.push_front(dg);
        map_[dg] = Entry{ptr, bytes, lru_.begin()};
        stats_.entries = static_cast<long>(map_.size());
        stats_.bytes += static_cast<long>(bytes);
        while (static_cast<size_t>(stats_.bytes) > budget_ && lru_.size() > 1) {
            uint64_t victim = lru_.back();
            lru_.pop_back();
            auto vit = map_.find(victim);
            stats_.bytes -= static_cast<long>(vit->second.bytes);
            map_.erase(vit);
            ++stats_.evictions;
        }
        stats_.entries = static_cast<long>(map_.size());
    }

    std::string path_for(uint64_t dg) const {
        char hex[17];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(dg));
        return dir_ + "/" + hex + ".corr";
    }

    std::optional<DiscreteCorrector> load_disk(const CacheKey& key, uint64_t dg) {
        if (dir_.empty()) return std::nullopt;
        std::string path = path_for(dg);
        std::ifstream in(path, std::ios::binary);
        if (!in) return std::nullopt;
        std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        try {
            uint64_t fid = 0, ext = 0;
            DiscreteCorrector c = corrector_from_blob(buf, &fid, &ext);
            if (fid != key.field_id || ext != key.ext_digest)
                throw std::runtime_error("key mismatch");
            return c;
        } catch (const std::exception&) {
            // corrupt or stale: evict and re-solve
            std::error_code ec;
            std::filesystem::remove(path, ec);
            std::fprintf(stderr, "[cache] warning: evicting corrupt entry %s\n", path.c_str());
            return std::nullopt;
        }
    }

    void store_disk(const CacheKey& key, uint64_t dg, const DiscreteCorrector& c) {
        if (dir_.empty()) return;
        std::string blob = corrector_to_blob(c, key.field_id, key.ext_digest);
        std::string path = path_for(dg);
        std::string tmp = path + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        }
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        append_manifest(key, dg, blob.size());
    }

    void append_manifest(const CacheKey& key, uint64_t dg, size_t bytes) {
        std::ofstream out(dir_ + "/manifest.json", std::ios::app);
        char hex[17];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(dg));
        out << "{\"digest\":\"" << hex << "\",\"n\":" << key.n << ",\"points\":" << key.points
            << ",\"field_id\":" << key.field_id << ",\"bytes\":" << bytes << "}\n";
    }
};

}  // namespace bulkdiff
