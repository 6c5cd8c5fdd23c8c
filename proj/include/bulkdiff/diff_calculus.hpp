#pragma once

#include <array>
#include <atomic>
#include <bit>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "bulkdiff/geometry.hpp"
#include "bulkdiff/point_process.hpp"

namespace bulkdiff {

/// Subsets E of the index set {1..k} are bitmasks (bit i-1 <-> index i), k <= 6.
using Subset = uint32_t;

inline constexpr int kMaxIndices = 6;

inline int subset_size(Subset e) { return std::popcount(e); }

/// Enumerate all submasks of e in increasing mask value, which is colex order
/// on subsets; the fixed order pins floating-point summation.
template <class F>
inline void for_each_subset(Subset e, F&& fn) {
    for (Subset s = 0;; s = (s - e) & e) {  // (s - e) & e steps to the next submask
        fn(s);
        if (s == e) break;
    }
}

/// Family E -> f(mu + sum_{i in E} delta_{x_i}), lazily evaluated and memoized.
/// The memo table publishes entries once; concurrent readers of a completed
/// entry never block.
template <class V>
class IndexedFamily {
public:
    IndexedFamily(PointConfiguration base, std::vector<Vec> positions,
                  std::function<V(Subset)> eval)
        : base_(std::move(base)), positions_(std::move(positions)), eval_(std::move(eval)) {
        if (positions_.size() > kMaxIndices)
            throw std::invalid_argument("IndexedFamily: index set capped at 6");
        slots_ = std::make_unique<std::atomic<V*>[]>(size_t{1} << positions_.size());
        n_slots_ = size_t{1} << positions_.size();
        for (size_t i = 0; i < n_slots_; ++i) slots_[i].store(nullptr, std::memory_order_relaxed);
    }
    ~IndexedFamily() {
        for (size_t i = 0; i < n_slots_; ++i) delete slots_[i].load(std::memory_order_relaxed);
    }
    IndexedFamily(const IndexedFamily&) = delete;
    IndexedFamily& operator=(const IndexedFamily&) = delete;

    Subset full() const { return static_cast<Subset>(n_slots_ - 1); }
    const PointConfiguration& base() const { return base_; }
    const std::vector<Vec>& positions() const { return positions_; }

    const V& eval(Subset e) const {
        if ((e & full()) != e) throw std::out_of_range("IndexedFamily: E not a subset of the index set");
        auto& slot = slots_[e];
        if (V* got = slot.load(std::memory_order_acquire)) return *got;
        V* fresh = new V(eval_(e));
        V* expected = nullptr;
        if (slot.compare_exchange_strong(expected, fresh, std::memory_order_release,
                                         std::memory_order_acquire))
            return *fresh;
        delete fresh;
        return *expected;
    }

    /// Realizes f(mu + mu_E) on an explicit configuration for callers that
    /// build the perturbed measure themselves.
    PointConfiguration perturbed(Subset e) const {
        PointConfiguration cfg = base_;
        for (size_t i = 0; i < positions_.size(); ++i)
            if (e & (Subset{1} << i)) cfg.push(positions_[i]);
        return cfg;
    }

private:
    PointConfiguration base_;
    std::vector<Vec> positions_;
    std::function<V(Subset)> eval_;
    mutable std::unique_ptr<std::atomic<V*>[]> slots_;
    size_t n_slots_ = 0;
};

/// D_E f by inclusion-exclusion: sum_{F subset E} (-1)^{|E\F|} f^F.
template <class V>
V difference(const IndexedFamily<V>& f, Subset e) {
    bool first = true;
    V acc{};
    for_each_subset(e, [&](Subset s) {
        const V& term = f.eval(s);
        int sign = (subset_size(e) - subset_size(s)) % 2 ? -1 : 1;
        if (first) {
            acc = sign > 0 ? term : -term;
            first = false;
        } else {
            acc = sign > 0 ? acc + term : acc - term;
        }
    });
    return acc;
}

/// Reconstructs f^E = sum_{F subset E} D_F f from a complete difference table.
/// Subsets are summed in colex order so the float result is reproducible.
template <class V>
V telescope(const std::function<V(Subset)>& diff_of, Subset e) {
    bool first = true;
    V acc{};
    for_each_subset(e, [&](Subset s) {
        if (first) {
            acc = diff_of(s);
            first = false;
        } else {
            acc = acc + diff_of(s);
        }
    });
    return acc;
}

/// Both Leibniz expansions of D_E(fg) next to the direct evaluation.
/// mul is the bilinear pairing between the two value types.
template <class Vf, class Vg, class Vout>
std::tuple<Vout, Vout, Vout> leibniz_check(
    const IndexedFamily<Vf>& f, const IndexedFamily<Vg>& g, Subset e,
    const std::function<Vout(const Vf&, const Vg&)>& mul) {
    // direct: D_E over the pointwise product family
    IndexedFamily<Vout> fg(f.base(), f.positions(),
                           [&](Subset s) { return mul(f.eval(s), g.eval(s)); });
    Vout direct = difference(fg, e);

    // form 1: sum_{F subset E} (D_F f)(D_{E\F} g^F)
    bool first = true;
    Vout form1{};
    for_each_subset(e, [&](Subset F) {
        Vf df = difference(f, F);
        // D_{E\F} of the shifted family g^F
        Subset rest = e & ~F;
        bool inner_first = true;
        Vg dg{};
        for_each_subset(rest, [&](Subset G) {
            const Vg& term = g.eval(G | F);
            int sign = (subset_size(rest) - subset_size(G)) % 2 ? -1 : 1;
            if (inner_first) {
                dg = sign > 0 ? term : -term;
                inner_first = false;
            } else {
                dg = sign > 0 ? dg + term : dg - term;
            }
        });
        Vout term = mul(df, dg);
        if (first) {
            form1 = term;
            first = false;
        } else {
            form1 = form1 + term;
        }
    });

    // form 2: sum_{F cup G = E} (D_F f)(D_G g)
    first = true;
    Vout form2{};
    for_each_subset(e, [&](Subset F) {
        Vf df = difference(f, F);
        Subset mandatory = e & ~F;  // G must contain E \ F
        for_each_subset(F, [&](Subset H) {
            Subset G = mandatory | H;
            Vout term = mul(df, difference(g, G));
            if (first) {
                form2 = term;
                first = false;
            } else {
                form2 = form2 + term;
            }
        });
    });

    return {direct, form1, form2};
}

/// D_E(f^# + g): the operator acts on the marked factor only.
template <class V>
V frozen_sum_difference(const IndexedFamily<V>& f, const IndexedFamily<V>& g, Subset e) {
    if (e == 0) return f.eval(0) + g.eval(0);
    return difference(f, e);
}

/// D_E(f^# g) = (D_E f) g.
template <class Vf, class Vg, class Vout>
Vout frozen_product_difference(const IndexedFamily<Vf>& f, const IndexedFamily<Vg>& g, Subset e,
                               const std::function<Vout(const Vf&, const Vg&)>& mul) {
    return mul(difference(f, e), g.eval(0));
}

/// Upsilon(E, z): all particles of E lie in the open unit cube centered at z.
inline double upsilon(const std::vector<Vec>& positions, Subset e, const Vec& z) {
    for (size_t i = 0; i < positions.size(); ++i) {
        if (!(e & (Subset{1} << i))) continue;
        for (int k = 0; k < z.dim; ++k)
            if (!(std::abs(positions[i][k] - z[k]) < 0.5)) return 0.0;
    }
    return 1.0;
}

}  // namespace bulkdiff
