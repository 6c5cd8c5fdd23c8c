#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "bulkdiff/conductance.hpp"
#include "bulkdiff/geometry.hpp"
#include "bulkdiff/point_process.hpp"

namespace bulkdiff {

struct GridTooLarge : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Vertex-centered tensor grid over U^n: `points` nodes per axis including both
/// boundary vertices, spacing h = side/(points-1), dim*n axes total.
struct GridSpec {
    Box box;
    int n = 0;
    int points = 2;

    GridSpec() = default;
    GridSpec(Box b, int n_particles, int pts) : box(b), n(n_particles), points(pts) {
        if (points < 2) throw std::invalid_argument("GridSpec: need at least 2 points per axis");
        if (n < 0) throw std::invalid_argument("GridSpec: negative particle count");
    }

    int dim() const { return box.dim(); }
    int axes() const { return dim() * n; }
    double h() const { return box.side / (points - 1); }
    double node_coord(int axis, int k) const {
        int c = axis % dim();
        return box.lo(c) + k * h();
    }

    size_t total() const {
        size_t t = 1;
        for (int a = 0; a < axes(); ++a) {
            if (t > (size_t{1} << 62) / static_cast<size_t>(points))
                throw GridTooLarge("GridSpec: index overflow");
            t *= static_cast<size_t>(points);
        }
        return t;
    }

    void check_budget(size_t max_unknowns) const {
        if (total() > max_unknowns)
            throw GridTooLarge("GridSpec: " + std::to_string(total()) + " unknowns exceed budget " +
                               std::to_string(max_unknowns));
    }

    /// Row-major strides: axis 0 slowest, last axis contiguous.
    std::vector<size_t> strides() const {
        std::vector<size_t> s(static_cast<size_t>(axes()));
        size_t acc = 1;
        for (int a = axes() - 1; a >= 0; --a) {
            s[static_cast<size_t>(a)] = acc;
            acc *= static_cast<size_t>(points);
        }
        return s;
    }
};

/// Odometer over the multi-index of a grid; keeps flat index in sync.
struct GridIter {
    int points;
    std::vector<int> idx;
    size_t flat = 0;
    bool done = false;

    explicit GridIter(const GridSpec& g) : points(g.points), idx(static_cast<size_t>(g.axes()), 0) {}
    void next() {
        for (int a = static_cast<int>(idx.size()) - 1; a >= 0; --a) {
            if (++idx[static_cast<size_t>(a)] < points) {
                ++flat;
                return;
            }
            idx[static_cast<size_t>(a)] = 0;
        }
        done = true;
        flat = 0;
    }
};

/// Grid-sampled maximizer of the per-n dual functional, with its provenance.
/// j_raw is the optimum of the raw functional (no 1/(rho0 |U|) prefactor), so
/// the stored object is density independent.
struct DiscreteCorrector {
    GridSpec grid;
    Vec direction;              // q (dual) or p (primal slices)
    PointConfiguration exterior;  // collar-restricted frozen exterior
    std::vector<double> values;
    double mean = 0.0;
    double j_raw = 0.0;
    int cg_iters = 0;
    double cg_residual = 0.0;
};

// ---------------------------------------------------------------------------
// Binary blob: header (field_id, U, n, h, q, exterior digest), float64 values
// in row-major order, trailing FNV digest of the payload.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void put(std::string& buf, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.append(p, sizeof(T));
}
template <class T>
T get(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw std::runtime_error("corrector blob: truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}
}  // namespace detail

inline constexpr uint64_t kCorrMagic = 0x4244434f52523031ULL;  // "BDCORR01"

inline std::string corrector_to_blob(const DiscreteCorrector& c, uint64_t field_id,
                                     uint64_t exterior_digest) {
    std::string buf;
    detail::put(buf, kCorrMagic);
    detail::put(buf, field_id);
    detail::put(buf, static_cast<int32_t>(c.grid.dim()));
    detail::put(buf, static_cast<int32_t>(c.grid.n));
    detail::put(buf, static_cast<int32_t>(c.grid.points));
    detail::put(buf, static_cast<int32_t>(0));
    for (int k = 0; k < 3; ++k) detail::put(buf, k < c.grid.dim() ? c.grid.box.center[k] : 0.0);
    detail::put(buf, c.grid.box.side);
    detail::put(buf, c.grid.h());
    for (int k = 0; k < 3; ++k) detail::put(buf, k < c.direction.dim ? c.direction[k] : 0.0);
    detail::put(buf, exterior_digest);
    detail::put(buf, c.j_raw);
    detail::put(buf, static_cast<uint64_t>(c.values.size()));
    for (double v : c.values) detail::put(buf, v);
    // exterior points travel with the blob so cache loads reproduce evaluation
    detail::put(buf, static_cast<uint64_t>(c.exterior.count()));
    for (double v : c.exterior.coords) detail::put(buf, v);
    uint64_t digest = fnv1a64(buf.data(), buf.size());
    detail::put(buf, digest);
    return buf;
}

inline DiscreteCorrector corrector_from_blob(const std::string& buf, uint64_t* field_id_out = nullptr,
                                             uint64_t* exterior_digest_out = nullptr) {
    if (buf.size() < 8) throw std::runtime_error("corrector blob: too short");
    uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (fnv1a64(buf.data(), buf.size() - 8) != stored)
        throw std::runtime_error("corrector blob: digest mismatch");
    size_t off = 0;
    if (detail::get<uint64_t>(buf, off) != kCorrMagic) throw std::runtime_error("corrector blob: bad magic");
    uint64_t fid = detail::get<uint64_t>(buf, off);
    int dim = detail::get<int32_t>(buf, off);
    int n = detail::get<int32_t>(buf, off);
    int points = detail::get<int32_t>(buf, off);
    detail::get<int32_t>(buf, off);
    Vec center(dim);
    for (int k = 0; k < 3; ++k) {
        double v = detail::get<double>(buf, off);
        if (k < dim) center[k] = v;
    }
    double side = detail::get<double>(buf, off);
    detail::get<double>(buf, off);  // h, implied by points
    Vec q(dim);
    for (int k = 0; k < 3; ++k) {
        double v = detail::get<double>(buf, off);
        if (k < dim) q[k] = v;
    }
    uint64_t ext_digest = detail::get<uint64_t>(buf, off);
    double j_raw = detail::get<double>(buf, off);
    uint64_t nvals = detail::get<uint64_t>(buf, off);
    DiscreteCorrector c;
    c.grid = GridSpec(Box(center, side), n, points);
    c.direction = q;
    c.j_raw = j_raw;
    c.values.resize(nvals);
    for (uint64_t i = 0; i < nvals; ++i) c.values[static_cast<size_t>(i)] = detail::get<double>(buf, off);
    uint64_t next = detail::get<uint64_t>(buf, off);
    c.exterior = PointConfiguration(dim);
    c.exterior.coords.resize(static_cast<size_t>(next) * static_cast<size_t>(dim));
    for (auto& v : c.exterior.coords) v = detail::get<double>(buf, off);
    if (field_id_out) *field_id_out = fid;
    if (exterior_digest_out) *exterior_digest_out = ext_digest;
    return c;
}

}  // namespace bulkdiff
