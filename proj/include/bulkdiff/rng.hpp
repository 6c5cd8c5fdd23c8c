#pragma once

#include <cmath>
#include <cstdint>

namespace bulkdiff {

namespace detail {
inline uint64_t splitmix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based generator keyed by (global seed, stream id). Draw i depends only
/// on (seed, stream, i), so parallel streams reproduce independently of scheduling.
class CounterRng {
public:
    CounterRng(uint64_t seed, uint64_t stream)
        : key_(detail::splitmix64(detail::splitmix64(seed) ^
                                  (0x9e6c63d0876a3f6bULL * (stream + 1)))) {}

    uint64_t next_u64() { return detail::splitmix64(key_ + (++ctr_) * 0x9e3779b97f4a7c15ULL); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Exact inversion below mean 30, PTRS rejection above.
    long poisson(double mean) {
        if (mean < 0) return -1;
        if (mean == 0) return 0;
        if (mean < 30.0) return poisson_mult(mean);
        return poisson_ptrs(mean);
    }

private:
    uint64_t key_;
    uint64_t ctr_ = 0;

    long poisson_mult(double mean) {
        const double limit = std::exp(-mean);
        long k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

    // Hoermann's PTRS transformed rejection.
    long poisson_ptrs(double mean) {
        const double b = 0.931 + 2.53 * std::sqrt(mean);
        const double a = -0.059 + 0.02483 * b;
        const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        const double vr = 0.9277 - 3.6224 / (b - 2.0);
        const double log_mean = std::log(mean);
        for (;;) {
            double u = uniform() - 0.5;
            double v = uniform();
            double us = 0.5 - std::abs(u);
            long k = static_cast<long>(std::floor((2.0 * a / us + b) * u + mean + 0.43));
            if (us >= 0.07 && v <= vr) return k;
            if (k < 0 || (us < 0.013 && v > us)) continue;
            if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
                static_cast<double>(k) * log_mean - mean - std::lgamma(static_cast<double>(k) + 1.0))
                return k;
        }
    }
};

/// Poisson pmf / tail helpers used by the exact mixture weights.
inline double poisson_pmf(long n, double lambda) {
    if (lambda == 0) return n == 0 ? 1.0 : 0.0;
    return std::exp(static_cast<double>(n) * std::log(lambda) - lambda -
                    std::lgamma(static_cast<double>(n) + 1.0));
}

/// P[Poisson(lambda) >= n].
inline double poisson_tail(long n, double lambda) {
    double cum = 0;
    for (long k = 0; k < n; ++k) cum += poisson_pmf(k, lambda);
    return std::max(0.0, 1.0 - cum);
}

}  // namespace bulkdiff
