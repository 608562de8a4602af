#pragma once

#include <span>
#include <vector>

#include "mbi/core.hpp"

namespace mbi {

/// Binary tree of (dimension, coordinate) splits. Points with coordinate on
/// the split dimension <= the split coordinate route left, strictly greater
/// route right, so boundary points are assigned uniquely.
///
/// A tree built with fanout F holds F-1 splits and F subspace leaves. Trees
/// are transient build structures; they are never persisted.
struct SplitTree {
    struct Node {
        uint32_t dim = 0;
        double coord = 0.0;
        int32_t left = -1;
        int32_t right = -1;
        int32_t parent = -1;
        int32_t subspace = -1;  // >= 0 marks a leaf
    };

    std::vector<Node> nodes;
    int32_t root = -1;
    uint32_t d = 0;

    uint32_t split_count() const {
        uint32_t n = 0;
        for (const Node& nd : nodes)
            if (nd.subspace < 0) ++n;
        return n;
    }

    uint32_t leaf_count() const { return static_cast<uint32_t>(nodes.size()) - split_count(); }

    uint32_t locate(const Point& p) const {
        int32_t cur = root;
        while (nodes[cur].subspace < 0) {
            const Node& n = nodes[cur];
            cur = p.coords[n.dim] <= n.coord ? n.left : n.right;
        }
        return static_cast<uint32_t>(nodes[cur].subspace);
    }
};

/// Seed range of one subspace inside the sorted sample, in subspace id order.
struct SubspaceSeed {
    uint32_t id = 0;
    size_t begin = 0;
    size_t end = 0;
    Box mbb;
};

struct SplitBuild {
    SplitTree tree;
    std::vector<SubspaceSeed> seeds;
};

namespace detail {

struct SplitBuilder {
    std::span<Point> pts;
    uint32_t leaf_cap;
    uint64_t quantum;
    uint32_t d;
    SplitBuild out;

    // Ranges are tracked in quanta (groups of `quantum` pages); a range of q
    // quanta starting at page p covers points [p*C_L, (p+q*quantum)*C_L)
    // clipped to the input size, so only the global tail page can be partial.
    int32_t build(uint64_t page_begin, uint64_t quanta) {
        size_t b = std::min(pts.size(), static_cast<size_t>(page_begin * leaf_cap));
        size_t e = std::min(pts.size(),
                            static_cast<size_t>((page_begin + quanta * quantum) * leaf_cap));
        if (quanta == 1) {
            int32_t idx = static_cast<int32_t>(out.tree.nodes.size());
            SplitTree::Node leaf;
            leaf.subspace = static_cast<int32_t>(out.seeds.size());
            out.tree.nodes.push_back(leaf);
            SubspaceSeed seed;
            seed.id = static_cast<uint32_t>(leaf.subspace);
            seed.begin = b;
            seed.end = e;
            seed.mbb = mbb_of(std::span<const Point>(pts.data() + b, e - b), d);
            out.seeds.push_back(seed);
            return idx;
        }
        Box box = mbb_of(std::span<const Point>(pts.data() + b, e - b), d);
        uint32_t dim = longest_dimension(box);
        std::sort(pts.begin() + b, pts.begin() + e,
                  [&](const Point& x, const Point& y) { return point_less_on(x, y, dim, d); });
        uint64_t left_quanta = quanta / 2;
        uint64_t left_pages = left_quanta * quantum;
        size_t split_at = b + static_cast<size_t>(left_pages) * leaf_cap;
        double coord = pts[split_at - 1].coords[dim];

        int32_t idx = static_cast<int32_t>(out.tree.nodes.size());
        SplitTree::Node split;
        split.dim = dim;
        split.coord = coord;
        out.tree.nodes.push_back(split);

        int32_t l = build(page_begin, left_quanta);
        int32_t r = build(page_begin + left_pages, quanta - left_quanta);
        out.tree.nodes[idx].left = l;
        out.tree.nodes[idx].right = r;
        out.tree.nodes[l].parent = idx;
        out.tree.nodes[r].parent = idx;
        return idx;
    }
};

}  // namespace detail

/// Recursive median-page partitioning of `pages` in-memory pages of points
/// into `fanout` subspaces of `quantum` pages each. Sorting happens on the
/// longest dimension of the point set being split; the split coordinate is
/// the last point of the median page, and points equal to it route left.
inline SplitBuild build_splittree(std::span<Point> pts, uint64_t pages, uint32_t leaf_cap,
                                  uint64_t quantum, uint32_t fanout, uint32_t d) {
    if (fanout < 2) throw error("splittree: fanout must be at least 2");
    if (pages != quantum * fanout) throw error("splittree: page count must equal quantum*fanout");
    if (pts.empty()) throw error("splittree: empty input");
    detail::SplitBuilder sb{pts, leaf_cap, quantum, d, {}};
    sb.out.tree.d = d;
    sb.out.tree.root = sb.build(0, fanout);
    return std::move(sb.out);
}

}  // namespace mbi
