#pragma once

#include <functional>
#include <queue>
#include <span>
#include <vector>

#include "mbi/core.hpp"
#include "mbi/index_format.hpp"
#include "mbi/storage.hpp"

namespace mbi {

struct QueryResult {
    std::vector<Point> points;
    uint64_t pages_read = 0;
    uint64_t nodes_visited = 0;
    bool truncated = false;  // set when k exceeded the point count
};

inline void sort_result(std::vector<Point>& pts, uint32_t d, bool has_ids) {
    if (has_ids) {
        std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.id < b.id; });
    } else {
        std::sort(pts.begin(), pts.end(),
                  [d](const Point& a, const Point& b) { return point_lex_less(a, b, d); });
    }
}

/// Candidate set for k nearest neighbors; ties on distance break to the
/// lower record id.
class KnnCandidates {
  public:
    KnnCandidates(uint64_t k, uint32_t d, const Point& center) : k_(k), d_(d), center_(center) {}

    double bound() const {
        return heap_.size() < k_ ? std::numeric_limits<double>::infinity() : heap_.front().first;
    }

    bool admits(double dist) const {
        if (heap_.size() < k_) return true;
        return dist <= heap_.front().first;  // equal: may win on id
    }

    void offer(const Point& p) {
        double dd = std::sqrt(dist2(p, center_, d_));
        if (heap_.size() < k_) {
            heap_.emplace_back(dd, p);
            std::push_heap(heap_.begin(), heap_.end(), cmp);
            return;
        }
        const auto& worst = heap_.front();
        if (dd < worst.first || (dd == worst.first && p.id < worst.second.id)) {
            std::pop_heap(heap_.begin(), heap_.end(), cmp);
            heap_.back() = {dd, p};
            std::push_heap(heap_.begin(), heap_.end(), cmp);
        }
    }

    std::vector<Point> take_sorted() {
        std::sort(heap_.begin(), heap_.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second.id < b.second.id;
        });
        std::vector<Point> out;
        out.reserve(heap_.size());
        for (auto& [dd, p] : heap_) out.push_back(p);
        return out;
    }

    size_t size() const { return heap_.size(); }

  private:
    static bool cmp(const std::pair<double, Point>& a, const std::pair<double, Point>& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second.id < b.second.id;
    }

    uint64_t k_;
    uint32_t d_;
    Point center_;
    std::vector<std::pair<double, Point>> heap_;  // max-heap by (dist, id)
};

/// Exact window query: visits exactly the nodes whose MBB intersects the
/// window, scans qualifying leaf pages, and returns matches sorted by id
/// (lexicographically by coordinates when ids are absent).
inline QueryResult window_query(IndexHandle& ix, BufferPool& pool, const WindowQuery& q) {
    if (q.rect.d != ix.codec.d) throw error("window dimensionality mismatch");
    for (uint32_t i = 0; i < q.rect.d; ++i)
        if (q.rect.lo[i] > q.rect.hi[i]) throw error("invalid window");
    QueryResult res;
    IoStats before = pool.stats();
    std::vector<NodeRef> stack{ix.root()};
    std::vector<Point> pts;
    while (!stack.empty()) {
        NodeRef ref = stack.back();
        stack.pop_back();
        std::vector<NodeEntry> entries = decode_node(ix.codec, pool.read_page(ix.file, ref.page), ref.slot);
        ++res.nodes_visited;
        for (const NodeEntry& e : entries) {
            if (!intersects(e.mbb, q.rect)) continue;
            if (e.kind == EntryKind::kBranch) {
                stack.push_back({e.child_page, e.child_slot});
            } else {
                pts.clear();
                decode_data_page(ix.codec, pool.read_page(ix.file, e.child_page), pts);
                for (const Point& p : pts)
                    if (q.rect.contains(p)) res.points.push_back(p);
            }
        }
    }
    sort_result(res.points, ix.codec.d, ix.codec.has_ids);
    res.pages_read = (pool.stats() - before).page_reads;
    return res;
}

/// Exact k nearest neighbors by best-first search over node MBBs.
inline QueryResult knn_query(IndexHandle& ix, BufferPool& pool, const KnnQuery& q) {
    if (q.k < 1) throw error("k must be positive");
    QueryResult res;
    IoStats before = pool.stats();
    KnnCandidates cand(q.k, ix.codec.d, q.center);

    struct Item {
        double dist;
        bool leaf;
        uint64_t page;
        uint16_t slot;
    };
    auto worse = [](const Item& a, const Item& b) { return a.dist > b.dist; };
    std::priority_queue<Item, std::vector<Item>, decltype(worse)> pq(worse);
    pq.push({0.0, false, ix.root().page, ix.root().slot});
    std::vector<Point> pts;
    while (!pq.empty()) {
        Item it = pq.top();
        pq.pop();
        if (it.dist > cand.bound()) break;  // nothing closer remains
        if (it.leaf) {
            pts.clear();
            decode_data_page(ix.codec, pool.read_page(ix.file, it.page), pts);
            for (const Point& p : pts) cand.offer(p);
            continue;
        }
        std::vector<NodeEntry> entries = decode_node(ix.codec, pool.read_page(ix.file, it.page), it.slot);
        ++res.nodes_visited;
        for (const NodeEntry& e : entries) {
            double dd = mindist(q.center, e.mbb);
            if (!cand.admits(dd)) continue;
            pq.push({dd, e.kind == EntryKind::kLeaf, e.child_page, e.child_slot});
        }
    }
    res.truncated = cand.size() < q.k;
    res.points = cand.take_sorted();
    res.pages_read = (pool.stats() - before).page_reads;
    return res;
}

// ---- structural walks -------------------------------------------------

struct NodeVisit {
    NodeRef ref;
    uint32_t depth = 0;
    uint16_t co_resident_nodes = 1;
    const std::vector<NodeEntry>* entries = nullptr;
};

/// Depth-first visit of every node reachable from the root.
inline void visit_nodes(IndexHandle& ix, BufferPool& pool,
                        const std::function<void(const NodeVisit&)>& fn) {
    struct Frame {
        NodeRef ref;
        uint32_t depth;
    };
    std::vector<Frame> stack{{ix.root(), 0}};
    while (!stack.empty()) {
        Frame f = stack.back();
        stack.pop_back();
        auto page = pool.read_page(ix.file, f.ref.page);
        uint16_t co = node_page_node_count(page);
        std::vector<NodeEntry> entries = decode_node(ix.codec, page, f.ref.slot);
        NodeVisit v{f.ref, f.depth, co, &entries};
        fn(v);
        for (const NodeEntry& e : entries)
            if (e.kind == EntryKind::kBranch) stack.push_back({{e.child_page, e.child_slot}, f.depth + 1});
    }
}

struct IndexStats {
    uint64_t leaf_count = 0;
    uint64_t points = 0;
    double total_perimeter = 0.0;
    double total_area = 0.0;
    uint16_t height = 0;
    std::vector<uint64_t> nodes_per_level;
};

/// Exact sums over leaf MBBs plus node counts per level. In 2D the perimeter
/// is the usual 2*(w+h) per box; for d>2 it is the sum of extents per box.
inline IndexStats index_stats(IndexHandle& ix, BufferPool& pool) {
    IndexStats st;
    visit_nodes(ix, pool, [&](const NodeVisit& v) {
        if (st.nodes_per_level.size() <= v.depth) st.nodes_per_level.resize(v.depth + 1, 0);
        ++st.nodes_per_level[v.depth];
        st.height = std::max<uint16_t>(st.height, static_cast<uint16_t>(v.depth + 1));
        for (const NodeEntry& e : *v.entries) {
            if (e.kind != EntryKind::kLeaf) continue;
            ++st.leaf_count;
            st.points += e.count;
            st.total_perimeter += e.mbb.perimeter();
            st.total_area += e.mbb.volume();
        }
    });
    return st;
}

}  // namespace mbi
