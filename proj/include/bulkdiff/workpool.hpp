#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace bulkdiff {

/// Index-parallel execution: task i writes only slot i of its output, so the
/// result is independent of the worker count. Exceptions are rethrown on the
/// caller thread (first one wins).
class WorkPool {
public:
    explicit WorkPool(int threads = 0)
        : threads_(threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency())) {
        if (threads_ < 1) threads_ = 1;
    }

    int threads() const { return threads_; }

    void parallel_for(size_t n, const std::function<void(size_t)>& task) const {
        if (n == 0) return;
        int workers = static_cast<int>(std::min<size_t>(static_cast<size_t>(threads_), n));
        if (workers <= 1) {
            for (size_t i = 0; i < n; ++i) task(i);
            return;
        }
        std::atomic<size_t> next{0};
        std::exception_ptr err;
        std::mutex err_mu;
        auto body = [&] {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard lk(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int t = 0; t < workers; ++t) pool.emplace_back(body);
        for (auto& th : pool) th.join();
        if (err) std::rethrow_exception(err);
    }

private:
    int threads_;
};

/// Pairwise-tree reduction with a fixed association order: bitwise identical
/// for any worker count that produced the inputs.
inline double tree_sum(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    std::vector<double> level = xs;
    while (level.size() > 1) {
        std::vector<double> up;
        up.reserve((level.size() + 1) / 2);
        for (size_t i = 0; i + 1 < level.size(); i += 2) up.push_back(level[i] + level[i + 1]);
        if (level.size() % 2) up.push_back(level.back());
        level = std::move(up);
    }
    return level[0];
}

struct MeanStderr {
    double mean = 0;
    double stderr_ = 0;
};

/// Mean and standard error via deterministic tree sums.
inline MeanStderr tree_mean_stderr(const std::vector<double>& xs) {
    MeanStderr out;
    if (xs.empty()) return out;
    double n = static_cast<double>(xs.size());
    out.mean = tree_sum(xs) / n;
    if (xs.size() > 1) {
        std::vector<double> sq(xs.size());
        for (size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - out.mean) * (xs[i] - out.mean);
        out.stderr_ = std::sqrt(tree_sum(sq) / (n * (n - 1)));
    }
    return out;
}

}  // namespace bulkdiff
