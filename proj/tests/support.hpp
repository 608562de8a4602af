#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here deliberately avoids the code paths it is used to check: the oracles
// are plain scans and sorts over raw point vectors.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mbi/core.hpp"
#include "mbi/index_format.hpp"
#include "mbi/query.hpp"
#include "mbi/storage.hpp"

namespace test {

using namespace mbi;

inline std::string temp_path(const std::string& tag) {
    static int counter = 0;
    return (std::filesystem::temp_directory_path() /
            ("mbi_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++)))
        .string();
}

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& tag) : path(temp_path(tag)) {
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return path + "/" + name; }
};

inline std::vector<Point> random_points(size_t n, uint32_t d, uint64_t seed, double lo = 0.0,
                                        double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<Point> pts(n);
    for (size_t i = 0; i < n; ++i) {
        for (uint32_t j = 0; j < d; ++j) pts[i].coords[j] = u(rng);
        pts[i].id = i;
    }
    return pts;
}

inline std::vector<Point> clustered_points(size_t n, uint32_t d, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    const int k = 8;
    std::vector<Point> centers(k);
    for (auto& c : centers)
        for (uint32_t j = 0; j < d; ++j) c.coords[j] = u(rng);
    std::vector<Point> pts(n);
    for (size_t i = 0; i < n; ++i) {
        // Zipf-ish cluster choice: low clusters get most of the mass.
        int c = static_cast<int>(k * std::pow(u(rng), 3.0));
        double sigma = 0.002 + 0.02 * (c + 1) / k;
        for (uint32_t j = 0; j < d; ++j) pts[i].coords[j] = centers[c].coords[j] + sigma * g(rng);
        pts[i].id = i;
    }
    return pts;
}

/// Pack points into a dataset file in the on-disk format.
inline PageFile write_dataset(const std::string& path, const std::vector<Point>& pts, uint32_t d,
                              uint32_t page_size = kDefaultPageSize, bool ids = true) {
    FileHeader h;
    h.d = d;
    h.n = pts.size();
    h.page_size = page_size;
    h.flags = ids ? kFlagHasIds : 0;
    PageFile f = PageFile::create(path, h);
    PageCodec codec{page_size, d, ids};
    std::vector<uint8_t> buf;
    uint32_t cl = codec.leaf_capacity();
    for (size_t b = 0; b < pts.size(); b += cl) {
        size_t e = std::min(pts.size(), b + cl);
        encode_data_page(codec, std::span<const Point>(pts.data() + b, e - b), buf);
        f.write(f.page_count(), buf);
    }
    return f;
}

/// Every point stored in the index's leaf pages, in file order.
inline std::vector<Point> extract_points(IndexHandle& ix, BufferPool& pool) {
    std::vector<Point> out;
    visit_nodes(ix, pool, [&](const NodeVisit& v) {
        for (const NodeEntry& e : *v.entries) {
            if (e.kind != EntryKind::kLeaf) continue;
            decode_data_page(ix.codec, pool.read_page(ix.file, e.child_page), out);
        }
    });
    return out;
}

inline void sort_points(std::vector<Point>& pts, uint32_t d) {
    std::sort(pts.begin(), pts.end(),
              [d](const Point& a, const Point& b) { return point_lex_less(a, b, d); });
}

inline bool same_multiset(std::vector<Point> a, std::vector<Point> b, uint32_t d) {
    if (a.size() != b.size()) return false;
    sort_points(a, d);
    sort_points(b, d);
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id) return false;
        for (uint32_t j = 0; j < d; ++j)
            if (a[i].coords[j] != b[i].coords[j]) return false;
    }
    return true;
}

// ---- independent oracles ----------------------------------------------

inline std::vector<Point> window_oracle(const std::vector<Point>& pts, const Box& w, uint32_t d) {
    std::vector<Point> out;
    for (const Point& p : pts) {
        bool in = true;
        for (uint32_t i = 0; i < d && in; ++i)
            in = p.coords[i] >= w.lo[i] && p.coords[i] <= w.hi[i];
        if (in) out.push_back(p);
    }
    std::sort(out.begin(), out.end(), [](const Point& a, const Point& b) { return a.id < b.id; });
    return out;
}

inline std::vector<Point> knn_oracle(const std::vector<Point>& pts, const Point& q, uint64_t k,
                                     uint32_t d) {
    std::vector<std::pair<double, Point>> dd;
    dd.reserve(pts.size());
    for (const Point& p : pts) dd.emplace_back(dist2(p, q, d), p);
    std::sort(dd.begin(), dd.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second.id < b.second.id;
    });
    std::vector<Point> out;
    for (size_t i = 0; i < std::min<size_t>(k, dd.size()); ++i) out.push_back(dd[i].second);
    return out;
}

inline bool same_points(const std::vector<Point>& a, const std::vector<Point>& b, uint32_t d) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id) return false;
        for (uint32_t j = 0; j < d; ++j)
            if (a[i].coords[j] != b[i].coords[j]) return false;
    }
    return true;
}

}  // namespace test
