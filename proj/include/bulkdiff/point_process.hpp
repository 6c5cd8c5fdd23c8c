#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bulkdiff/geometry.hpp"
#include "bulkdiff/rng.hpp"

namespace bulkdiff {

/// Finite multiset of points in R^d: the materialized part of a configuration mu.
/// Stored as a flat coordinate array; duplicates allowed, order irrelevant.
struct PointConfiguration {
    int dim = 1;
    std::vector<double> coords;  // size = dim * count
    std::optional<Box> region;

    PointConfiguration() = default;
    explicit PointConfiguration(int d) : dim(d) {}

    size_t count() const { return coords.size() / static_cast<size_t>(dim); }
    bool empty() const { return coords.empty(); }

    Vec point(size_t i) const {
        Vec p(dim);
        for (int k = 0; k < dim; ++k) p[k] = coords[i * static_cast<size_t>(dim) + static_cast<size_t>(k)];
        return p;
    }
    void push(const Vec& p) {
        for (int k = 0; k < dim; ++k) coords.push_back(p[k]);
    }
};

/// Order-insensitive multiset equality on exact coordinates.
inline bool config_equal(const PointConfiguration& a, const PointConfiguration& b) {
    if (a.dim != b.dim || a.count() != b.count()) return false;
    auto key = [&](const PointConfiguration& c) {
        std::vector<std::vector<double>> pts(c.count());
        for (size_t i = 0; i < c.count(); ++i) {
            pts[i].assign(c.coords.begin() + static_cast<long>(i) * c.dim,
                          c.coords.begin() + static_cast<long>(i + 1) * c.dim);
        }
        std::sort(pts.begin(), pts.end());
        return pts;
    };
    return key(a) == key(b);
}

/// Poisson point process on a box: Poisson(rho*|region|) count, i.i.d. uniform positions.
inline PointConfiguration sample_poisson(double rho, const Box& region, CounterRng& rng) {
    if (rho < 0) throw std::invalid_argument("sample_poisson: negative intensity");
    PointConfiguration cfg(region.dim());
    cfg.region = region;
    long n = rng.poisson(rho * region.volume());
    cfg.coords.reserve(static_cast<size_t>(n) * static_cast<size_t>(cfg.dim));
    for (long i = 0; i < n; ++i) {
        Vec p(cfg.dim);
        for (int k = 0; k < cfg.dim; ++k) p[k] = rng.uniform(region.lo(k), region.hi(k));
        cfg.push(p);
    }
    return cfg;
}

/// mu restricted to U: keeps exactly the points inside U.
inline PointConfiguration restrict_to(const PointConfiguration& mu, const Box& U) {
    PointConfiguration out(mu.dim);
    out.region = U;
    for (size_t i = 0; i < mu.count(); ++i) {
        Vec p = mu.point(i);
        if (U.contains(p)) out.push(p);
    }
    return out;
}

/// Points outside U but within Euclidean distance w of it. Conductances with
/// locality radius 1/2 never see anything farther out, so w defaults to 1/2.
inline PointConfiguration restrict_collar(const PointConfiguration& mu, const Box& U, double w = 0.5) {
    PointConfiguration out(mu.dim);
    for (size_t i = 0; i < mu.count(); ++i) {
        Vec p = mu.point(i);
        if (!U.contains(p) && U.distance(p) < w) out.push(p);
    }
    return out;
}

/// tau_{-x} mu: every point p becomes p - x.
inline PointConfiguration translate(const PointConfiguration& mu, const Vec& x) {
    PointConfiguration out(mu.dim);
    out.coords.resize(mu.coords.size());
    for (size_t i = 0; i < mu.count(); ++i)
        for (int k = 0; k < mu.dim; ++k)
            out.coords[i * static_cast<size_t>(mu.dim) + static_cast<size_t>(k)] =
                mu.coords[i * static_cast<size_t>(mu.dim) + static_cast<size_t>(k)] - x[k];
    return out;
}

/// Multiset union; counts add.
inline PointConfiguration superpose(const PointConfiguration& a, const PointConfiguration& b) {
    if (a.dim != b.dim) throw std::invalid_argument("superpose: dimension mismatch");
    PointConfiguration out = a;
    out.region.reset();
    out.coords.insert(out.coords.end(), b.coords.begin(), b.coords.end());
    return out;
}

inline PointConfiguration add_point(const PointConfiguration& mu, const Vec& x) {
    PointConfiguration out = mu;
    out.push(x);
    return out;
}

// ---------------------------------------------------------------------------
// Text serialization: header "dim d; region cx [cy] side" or "dim d; region none",
// then one point per line. Shortest round-trip decimals via std::to_chars.
// ---------------------------------------------------------------------------

inline std::string format_double(double x) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    double x = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc{}) throw std::runtime_error("parse_double: bad token '" + s + "'");
    return x;
}

inline std::string serialize(const PointConfiguration& cfg) {
    std::ostringstream os;
    os << "dim " << cfg.dim << "; region ";
    if (cfg.region) {
        for (int k = 0; k < cfg.dim; ++k) os << format_double(cfg.region->center[k]) << ' ';
        os << format_double(cfg.region->side);
    } else {
        os << "none";
    }
    os << '\n';
    for (size_t i = 0; i < cfg.count(); ++i) {
        for (int k = 0; k < cfg.dim; ++k) {
            if (k) os << ' ';
            os << format_double(cfg.coords[i * static_cast<size_t>(cfg.dim) + static_cast<size_t>(k)]);
        }
        os << '\n';
    }
    return os.str();
}

inline PointConfiguration deserialize(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("deserialize: empty input");
    std::istringstream hs(line);
    std::string tok;
    hs >> tok;
    if (tok != "dim") throw std::runtime_error("deserialize: missing 'dim' header");
    int d = 0;
    hs >> d;
    if (d < 1 || d > kMaxDim) throw std::runtime_error("deserialize: bad dimension");
    hs >> tok;  // ";"  (may be attached to dim value)
    if (tok != ";") throw std::runtime_error("deserialize: malformed header");
    hs >> tok;
    if (tok != "region") throw std::runtime_error("deserialize: malformed header");
    PointConfiguration cfg(d);
    std::vector<std::string> rest;
    while (hs >> tok) rest.push_back(tok);
    if (!(rest.size() == 1 && rest[0] == "none")) {
        if (rest.size() != static_cast<size_t>(d) + 1) throw std::runtime_error("deserialize: bad region");
        Vec c(d);
        for (int k = 0; k < d; ++k) c[k] = parse_double(rest[static_cast<size_t>(k)]);
        cfg.region = Box(c, parse_double(rest.back()));
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Vec p(d);
        for (int k = 0; k < d; ++k) {
            if (!(ls >> tok)) throw std::runtime_error("deserialize: short point line");
            p[k] = parse_double(tok);
        }
        cfg.push(p);
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Mecke's identity as a Monte Carlo residual.
// ---------------------------------------------------------------------------

struct MeckeCheck {
    double lhs = 0, rhs = 0;
    double residual = 0;  // |mean difference|
    double stderr_ = 0;   // standard error of the paired difference
    long n_samples = 0;
};

/// Residual of E[(1/(rho|U|)) int_U H(mu,x) dmu(x)] = avg_U E[H(mu+delta_x, x)] dx.
/// Configurations are sampled on U enlarged by a unit margin so that functionals
/// with locality up to 1 see the correct law. Both sides share each sample (paired).
inline MeckeCheck mecke_residual(
    const std::function<double(const PointConfiguration&, const Vec&)>& H, double rho,
    const Box& U, long n_samples, uint64_t seed) {
    if (!(rho > 0)) throw std::invalid_argument("mecke_residual: rho must be positive");
    Box sample_box(U.center, U.side + 2.0);
    MeckeCheck out;
    out.n_samples = n_samples;
    double sum_d = 0, sum_d2 = 0, sum_l = 0, sum_r = 0;
    const double norm = 1.0 / (rho * U.volume());
    for (long s = 0; s < n_samples; ++s) {
        CounterRng rng(seed, static_cast<uint64_t>(s));
        PointConfiguration mu = sample_poisson(rho, sample_box, rng);
        double lhs = 0;
        for (size_t i = 0; i < mu.count(); ++i) {
            Vec p = mu.point(i);
            if (U.contains(p)) lhs += H(mu, p);
        }
        lhs *= norm;
        Vec x(U.dim());
        for (int k = 0; k < U.dim(); ++k) x[k] = rng.uniform(U.lo(k), U.hi(k));
        double rhs = H(add_point(mu, x), x);
        double d = lhs - rhs;
        sum_d += d;
        sum_d2 += d * d;
        sum_l += lhs;
        sum_r += rhs;
    }
    double n = static_cast<double>(n_samples);
    double mean_d = sum_d / n;
    out.lhs = sum_l / n;
    out.rhs = sum_r / n;
    out.residual = std::abs(mean_d);
    out.stderr_ = std::sqrt(std::max(0.0, (sum_d2 / n - mean_d * mean_d) / n));
    return out;
}

}  // namespace bulkdiff
