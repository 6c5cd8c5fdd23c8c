#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>

#include "bulkdiff/geometry.hpp"
#include "bulkdiff/point_process.hpp"

namespace bulkdiff {

struct InvariantViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

/// Local conductance rule mu -> a_circ(mu), with its ellipticity bound and the
/// fixed locality radius 1/2. The evaluator receives the configuration centered
/// at the evaluation point; the particle at the origin is part of it.
struct ConductanceField {
    std::string spec;    // canonical "name(param=...,...)" string
    double lambda = 2.0; // ellipticity upper bound
    double locality_radius = 0.5;
    std::function<SymMatrix(int dim, const PointConfiguration& centered)> eval_origin_raw;
    uint64_t field_id = 0;

    void finalize() { field_id = fnv1a64(spec); }
};

inline void check_conductance_invariants(const ConductanceField& f, const SymMatrix& a) {
    const double tol = 1e-9;
    if (!a.is_symmetric(tol))
        throw InvariantViolation("conductance field '" + f.spec + "' returned a non-symmetric matrix");
    auto [lo, hi] = a.eig_range();
    if (lo < 1.0 - tol || hi > f.lambda + tol)
        throw InvariantViolation("conductance field '" + f.spec + "' violated ellipticity [1," +
                                 format_double(f.lambda) + "]: eig in [" + format_double(lo) + "," +
                                 format_double(hi) + "]");
}

/// a_circ(mu) with fail-fast invariant checks.
inline SymMatrix evaluate_origin(const ConductanceField& f, int dim, const PointConfiguration& mu) {
    SymMatrix a = f.eval_origin_raw(dim, mu);
    check_conductance_invariants(f, a);
    return a;
}

/// a(mu, x) = a_circ(tau_{-x} mu).
inline SymMatrix evaluate(const ConductanceField& f, const PointConfiguration& mu, const Vec& x) {
    return evaluate_origin(f, x.dim, translate(mu, x));
}

// ---------------------------------------------------------------------------
// Built-in fields. All of them ignore particles at the origin itself, so that
// gradients evaluated on supp(mu) see genuine neighbors only.
// ---------------------------------------------------------------------------

inline ConductanceField constant_field(double c) {
    if (c < 1.0) throw std::invalid_argument("constant_field: c must be >= 1");
    ConductanceField f;
    f.spec = "constant(c=" + format_double(c) + ")";
    f.lambda = c;
    f.eval_origin_raw = [c](int dim, const PointConfiguration&) { return SymMatrix::isotropic(dim, c); };
    f.finalize();
    return f;
}

/// Id + (Lambda-1) Id when any other particle lies within r of the origin.
inline ConductanceField crowding_field(double lambda = 2.0, double r = 0.25) {
    if (lambda < 1.0 || r <= 0.0 || r > 0.5)
        throw std::invalid_argument("crowding_field: need lambda >= 1 and 0 < r <= 1/2");
    ConductanceField f;
    f.spec = "crowding(lambda=" + format_double(lambda) + ",r=" + format_double(r) + ")";
    f.lambda = lambda;
    f.eval_origin_raw = [lambda, r](int dim, const PointConfiguration& mu) {
        bool crowded = false;
        for (size_t i = 0; i < mu.count() && !crowded; ++i) {
            double n2 = mu.point(i).norm2();
            crowded = n2 > 0.0 && n2 < r * r;
        }
        return SymMatrix::isotropic(dim, crowded ? lambda : 1.0);
    };
    f.finalize();
    return f;
}

/// Id + (Lambda-1) min(1, sum_y phi(|y|)) Id with phi(t) = (1-(2t)^2)^2 on [0,1/2).
inline ConductanceField smooth_pair_field(double lambda = 2.0) {
    if (lambda < 1.0) throw std::invalid_argument("smooth_pair_field: lambda must be >= 1");
    ConductanceField f;
    f.spec = "smooth_pair(lambda=" + format_double(lambda) + ")";
    f.lambda = lambda;
    f.eval_origin_raw = [lambda](int dim, const PointConfiguration& mu) {
        double s = 0;
        for (size_t i = 0; i < mu.count(); ++i) {
            double n2 = mu.point(i).norm2();
            if (n2 == 0.0 || n2 >= 0.25) continue;
            double u = 1.0 - 4.0 * n2;
            s += u * u;
        }
        return SymMatrix::isotropic(dim, 1.0 + (lambda - 1.0) * std::min(1.0, s));
    };
    f.finalize();
    return f;
}

/// Field registry used by run configs: name + parameter map.
inline ConductanceField make_field(const std::string& name, const std::map<std::string, double>& params) {
    auto get = [&](const std::string& k, double dflt) {
        auto it = params.find(k);
        return it == params.end() ? dflt : it->second;
    };
    if (name == "constant") return constant_field(get("c", 1.0));
    if (name == "crowding") return crowding_field(get("lambda", 2.0), get("r", 0.25));
    if (name == "smooth_pair") return smooth_pair_field(get("lambda", 2.0));
    throw std::invalid_argument("make_field: unknown field '" + name + "'");
}

// ---------------------------------------------------------------------------
// Randomized audit of the finite-range assumption: a_circ must not move when
// points beyond radius 1/2 are added or removed.
// ---------------------------------------------------------------------------

inline bool locality_probe(const ConductanceField& f, int dim, const PointConfiguration& mu,
                           int n_trials, uint64_t seed) {
    SymMatrix base = evaluate_origin(f, dim, mu);
    // the value must already coincide on the restriction to the locality ball
    PointConfiguration near(dim);
    near.push(Vec(dim));
    for (size_t i = 0; i < mu.count(); ++i) {
        Vec p = mu.point(i);
        double n2 = p.norm2();
        if (n2 > 0 && n2 < f.locality_radius * f.locality_radius) near.push(p);
    }
    SymMatrix restricted = evaluate_origin(f, dim, near);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            if (restricted.at(i, j) != base.at(i, j)) return false;
    CounterRng rng(seed, 0xb0b);
    for (int t = 0; t < n_trials; ++t) {
        PointConfiguration pert(dim);
        // keep the near part, drop far points with probability 1/2
        for (size_t i = 0; i < mu.count(); ++i) {
            Vec p = mu.point(i);
            if (p.norm() < f.locality_radius || rng.uniform() < 0.5) pert.push(p);
        }
        int extra = 1 + static_cast<int>(rng.next_u64() % 3);
        for (int e = 0; e < extra; ++e) {
            Vec p(dim);
            double rad = rng.uniform(f.locality_radius + 1e-9, 2.0);
            // direction by normalized uniform cube sample
            Vec dir(dim);
            double nrm = 0;
            do {
                for (int k = 0; k < dim; ++k) dir[k] = rng.uniform(-1, 1);
                nrm = dir.norm();
            } while (nrm < 1e-6);
            for (int k = 0; k < dim; ++k) p[k] = dir[k] / nrm * rad;
            pert.push(p);
        }
        SymMatrix got = evaluate_origin(f, dim, pert);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j)
                if (got.at(i, j) != base.at(i, j)) return false;
    }
    return true;
}

}  // namespace bulkdiff
