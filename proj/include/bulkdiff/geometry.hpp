#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace bulkdiff {

inline constexpr int kMaxDim = 3;

/// Point or direction in R^d, d <= kMaxDim. Unused components stay zero.
struct Vec {
    int dim = 1;
    std::array<double, kMaxDim> c{};

    Vec() = default;
    explicit Vec(int d) : dim(d) {}
    Vec(int d, std::initializer_list<double> xs) : dim(d) {
        int i = 0;
        for (double x : xs) c[static_cast<size_t>(i++)] = x;
    }
    static Vec scalar(double x) { return Vec(1, {x}); }
    static Vec unit(int d, int axis) {
        Vec v(d);
        v.c[static_cast<size_t>(axis)] = 1.0;
        return v;
    }

    double& operator[](int i) { return c[static_cast<size_t>(i)]; }
    double operator[](int i) const { return c[static_cast<size_t>(i)]; }

    Vec operator+(const Vec& o) const {
        Vec r(dim);
        for (int i = 0; i < dim; ++i) r[i] = c[static_cast<size_t>(i)] + o[i];
        return r;
    }
    Vec operator-(const Vec& o) const {
        Vec r(dim);
        for (int i = 0; i < dim; ++i) r[i] = c[static_cast<size_t>(i)] - o[i];
        return r;
    }
    Vec operator*(double s) const {
        Vec r(dim);
        for (int i = 0; i < dim; ++i) r[i] = c[static_cast<size_t>(i)] * s;
        return r;
    }
    Vec operator-() const { return *this * -1.0; }
    bool operator==(const Vec& o) const {
        if (dim != o.dim) return false;
        for (int i = 0; i < dim; ++i)
            if (c[static_cast<size_t>(i)] != o[i]) return false;
        return true;
    }

    double norm2() const {
        double s = 0;
        for (int i = 0; i < dim; ++i) s += c[static_cast<size_t>(i)] * c[static_cast<size_t>(i)];
        return s;
    }
    double norm() const { return std::sqrt(norm2()); }
};

inline double dot(const Vec& a, const Vec& b) {
    double s = 0;
    for (int i = 0; i < a.dim; ++i) s += a[i] * b[i];
    return s;
}

/// Symmetric d x d matrix stored dense; symmetry is enforced at construction.
struct SymMatrix {
    int dim = 1;
    std::array<double, kMaxDim * kMaxDim> a{};

    SymMatrix() = default;
    explicit SymMatrix(int d) : dim(d) {}

    static SymMatrix isotropic(int d, double s) {
        SymMatrix m(d);
        for (int i = 0; i < d; ++i) m.at(i, i) = s;
        return m;
    }
    static SymMatrix identity(int d) { return isotropic(d, 1.0); }

    double& at(int i, int j) { return a[static_cast<size_t>(i * kMaxDim + j)]; }
    double at(int i, int j) const { return a[static_cast<size_t>(i * kMaxDim + j)]; }

    void set(int i, int j, double v) {
        at(i, j) = v;
        at(j, i) = v;
    }

    bool is_symmetric(double tol = 1e-12) const {
        for (int i = 0; i < dim; ++i)
            for (int j = i + 1; j < dim; ++j)
                if (std::abs(at(i, j) - at(j, i)) > tol * (1.0 + std::abs(at(i, j)))) return false;
        return true;
    }

    bool is_diagonal(double tol = 0.0) const {
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j)
                if (i != j && std::abs(at(i, j)) > tol) return false;
        return true;
    }

    Vec apply(const Vec& v) const {
        Vec r(dim);
        for (int i = 0; i < dim; ++i) {
            double s = 0;
            for (int j = 0; j < dim; ++j) s += at(i, j) * v[j];
            r[i] = s;
        }
        return r;
    }

    SymMatrix operator+(const SymMatrix& o) const {
        SymMatrix r(dim);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) r.at(i, j) = at(i, j) + o.at(i, j);
        return r;
    }
    SymMatrix operator-(const SymMatrix& o) const {
        SymMatrix r(dim);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) r.at(i, j) = at(i, j) - o.at(i, j);
        return r;
    }
    SymMatrix operator*(double s) const {
        SymMatrix r(dim);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) r.at(i, j) = at(i, j) * s;
        return r;
    }
    SymMatrix operator-() const { return *this * -1.0; }

    /// Extremal eigenvalues, closed form for d <= 2, Gershgorin-free exact for d=3 not needed.
    std::pair<double, double> eig_range() const {
        if (dim == 1) return {at(0, 0), at(0, 0)};
        if (dim == 2) {
            double tr = at(0, 0) + at(1, 1);
            double det = at(0, 0) * at(1, 1) - at(0, 1) * at(1, 0);
            double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
            return {tr / 2.0 - disc, tr / 2.0 + disc};
        }
        throw std::runtime_error("eig_range: dim > 2 unsupported");
    }

    SymMatrix inverse() const {
        SymMatrix r(dim);
        if (dim == 1) {
            r.at(0, 0) = 1.0 / at(0, 0);
            return r;
        }
        if (dim == 2) {
            double det = at(0, 0) * at(1, 1) - at(0, 1) * at(1, 0);
            r.at(0, 0) = at(1, 1) / det;
            r.at(1, 1) = at(0, 0) / det;
            r.set(0, 1, -at(0, 1) / det);
            return r;
        }
        throw std::runtime_error("inverse: dim > 2 unsupported");
    }
};

inline double quad_form(const Vec& q, const SymMatrix& m) { return dot(q, m.apply(q)); }

/// Axis-aligned cube: Q_s centered anywhere; box_m(m,d) is the cube of side 3^m at the origin.
struct Box {
    Vec center;
    double side = 1.0;

    Box() = default;
    Box(Vec c, double s) : center(c), side(s) {
        if (!(s > 0)) throw std::invalid_argument("Box: side must be positive");
    }

    int dim() const { return center.dim; }
    double volume() const { return std::pow(side, dim()); }

    double lo(int axis) const { return center[axis] - side / 2.0; }
    double hi(int axis) const { return center[axis] + side / 2.0; }

    bool contains(const Vec& p) const {
        for (int i = 0; i < dim(); ++i)
            if (!(p[i] > lo(i) && p[i] < hi(i))) return false;
        return true;
    }

    /// Euclidean distance from p to the (closed) cube; 0 inside.
    double distance(const Vec& p) const {
        double s = 0;
        for (int i = 0; i < dim(); ++i) {
            double d = 0;
            if (p[i] < lo(i)) d = lo(i) - p[i];
            else if (p[i] > hi(i)) d = p[i] - hi(i);
            s += d * d;
        }
        return std::sqrt(s);
    }
};

/// The cube of side 3^m centered at the origin.
inline Box box_m(int m, int dim) {
    return Box(Vec(dim), std::pow(3.0, m));
}

}  // namespace bulkdiff
