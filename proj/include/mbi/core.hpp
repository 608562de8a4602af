#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbi {

struct error : std::runtime_error {
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr uint32_t kMaxDim = 16;
inline constexpr uint32_t kMinDim = 2;
inline constexpr uint64_t kNoId = ~uint64_t{0};

/// A d-dimensional point. Coordinates beyond the dataset dimensionality are
/// unused; d is carried by the surrounding dataset/codec, not per point.
struct Point {
    std::array<double, kMaxDim> coords{};
    uint64_t id = kNoId;

    double operator[](size_t i) const { return coords[i]; }
    double& operator[](size_t i) { return coords[i]; }
};

inline Point make_point(std::initializer_list<double> cs, uint64_t id = kNoId) {
    Point p;
    p.id = id;
    size_t i = 0;
    for (double c : cs) p.coords[i++] = c;
    return p;
}

// Total order used wherever duplicate coordinates would otherwise make page
// boundaries depend on the sort implementation.
inline bool point_less_on(const Point& a, const Point& b, uint32_t dim, uint32_t d) {
    if (a.coords[dim] != b.coords[dim]) return a.coords[dim] < b.coords[dim];
    for (uint32_t i = 0; i < d; ++i)
        if (a.coords[i] != b.coords[i]) return a.coords[i] < b.coords[i];
    return a.id < b.id;
}

inline bool point_lex_less(const Point& a, const Point& b, uint32_t d) {
    for (uint32_t i = 0; i < d; ++i)
        if (a.coords[i] != b.coords[i]) return a.coords[i] < b.coords[i];
    return a.id < b.id;
}

/// Axis-aligned minimum bounding box, closed on all faces.
struct Box {
    uint32_t d = 0;
    std::array<double, kMaxDim> lo{};
    std::array<double, kMaxDim> hi{};

    Box() = default;
    explicit Box(uint32_t dim) : d(dim) {
        lo.fill(std::numeric_limits<double>::infinity());
        hi.fill(-std::numeric_limits<double>::infinity());
    }

    bool empty() const { return d == 0 || lo[0] > hi[0]; }

    void expand(const Point& p) {
        for (uint32_t i = 0; i < d; ++i) {
            lo[i] = std::min(lo[i], p.coords[i]);
            hi[i] = std::max(hi[i], p.coords[i]);
        }
    }

    void expand(const Box& b) {
        for (uint32_t i = 0; i < d; ++i) {
            lo[i] = std::min(lo[i], b.lo[i]);
            hi[i] = std::max(hi[i], b.hi[i]);
        }
    }

    bool contains(const Point& p) const {
        for (uint32_t i = 0; i < d; ++i)
            if (p.coords[i] < lo[i] || p.coords[i] > hi[i]) return false;
        return true;
    }

    bool contains(const Box& b) const {
        for (uint32_t i = 0; i < d; ++i)
            if (b.lo[i] < lo[i] || b.hi[i] > hi[i]) return false;
        return true;
    }

    double extent(uint32_t i) const { return hi[i] - lo[i]; }

    double volume() const {
        double v = 1.0;
        for (uint32_t i = 0; i < d; ++i) v *= extent(i);
        return v;
    }

    // Sum of extents; doubled in 2D so it is the usual rectangle perimeter.
    double perimeter() const {
        double s = 0.0;
        for (uint32_t i = 0; i < d; ++i) s += extent(i);
        return d == 2 ? 2.0 * s : s;
    }
};

inline Box make_box(std::initializer_list<double> lo, std::initializer_list<double> hi) {
    Box b(static_cast<uint32_t>(lo.size()));
    size_t i = 0;
    for (double c : lo) b.lo[i++] = c;
    i = 0;
    for (double c : hi) b.hi[i++] = c;
    return b;
}

inline Box mbb_of(std::span<const Point> points, uint32_t d) {
    if (points.empty()) throw error("mbb_of: empty point set");
    Box b(d);
    for (const Point& p : points) b.expand(p);
    return b;
}

/// Index of the dimension with the largest extent; ties break to the lowest
/// index so builds are reproducible.
inline uint32_t longest_dimension(const Box& box) {
    uint32_t best = 0;
    double best_ext = box.extent(0);
    for (uint32_t i = 1; i < box.d; ++i) {
        if (box.extent(i) > best_ext) {
            best_ext = box.extent(i);
            best = i;
        }
    }
    return best;
}

/// Euclidean distance from q to the nearest point of box (0 if q inside).
inline double mindist(const Point& q, const Box& box) {
    double s = 0.0;
    for (uint32_t i = 0; i < box.d; ++i) {
        double c = q.coords[i];
        double r = c < box.lo[i] ? box.lo[i] - c : (c > box.hi[i] ? c - box.hi[i] : 0.0);
        s += r * r;
    }
    return std::sqrt(s);
}

/// Minimum distance between two boxes; 0 when they intersect.
inline double mindist(const Box& a, const Box& b) {
    double s = 0.0;
    for (uint32_t i = 0; i < a.d; ++i) {
        double r = 0.0;
        if (a.hi[i] < b.lo[i]) r = b.lo[i] - a.hi[i];
        else if (b.hi[i] < a.lo[i]) r = a.lo[i] - b.hi[i];
        s += r * r;
    }
    return std::sqrt(s);
}

inline bool intersects(const Box& a, const Box& b) {
    for (uint32_t i = 0; i < a.d; ++i)
        if (a.hi[i] < b.lo[i] || b.hi[i] < a.lo[i]) return false;
    return true;
}

// Open-interior overlap test, used by the zero-overlap structural checks.
inline bool interiors_intersect(const Box& a, const Box& b) {
    for (uint32_t i = 0; i < a.d; ++i)
        if (a.hi[i] <= b.lo[i] || b.hi[i] <= a.lo[i]) return false;
    return true;
}

struct WindowQuery {
    Box rect;
};

struct KnnQuery {
    Point center;
    uint64_t k = 1;
};

inline double dist2(const Point& a, const Point& b, uint32_t d) {
    double s = 0.0;
    for (uint32_t i = 0; i < d; ++i) {
        double r = a.coords[i] - b.coords[i];
        s += r * r;
    }
    return s;
}

}  // namespace mbi
