#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mbi/core.hpp"
#include "mbi/index_format.hpp"
#include "mbi/splittree.hpp"
#include "mbi/storage.hpp"

namespace mbi {

inline bool is_underflowed(size_t entries, uint32_t branch_cap) {
    return 2 * entries <= branch_cap;
}

/// Emits finished data pages and index nodes for a build. Tracks page counts
/// and the heights of emitted subtrees.
struct EntrySink {
    BufferPool& pool;
    PageFile& out;
    PageCodec codec;
    uint64_t leaf_pages = 0;
    uint64_t node_pages = 0;
    uint32_t underflowed_internal = 0;
    std::vector<uint8_t> scratch_buf;

    uint64_t emit_data_page(std::span<const Point> pts) {
        encode_data_page(codec, pts, scratch_buf);
        ++leaf_pages;
        return pool.append_page(out, scratch_buf);
    }

    NodeRef emit_node(const std::vector<NodeEntry>& entries) {
        std::vector<std::vector<NodeEntry>> one{entries};
        encode_node_page(codec, one, scratch_buf);
        ++node_pages;
        if (is_underflowed(entries.size(), codec.branch_capacity())) ++underflowed_internal;
        return {pool.append_page(out, scratch_buf), 0};
    }

    NodeRef emit_shared_node_page(std::span<const std::vector<NodeEntry>> nodes) {
        encode_node_page(codec, nodes, scratch_buf);
        ++node_pages;
        return {pool.append_page(out, scratch_buf), 0};
    }
};

namespace detail {

inline Box union_mbb(std::span<const NodeEntry> entries) {
    Box b(entries.front().mbb.d);
    for (const NodeEntry& e : entries) b.expand(e.mbb);
    return b;
}

struct GenResult {
    std::vector<NodeEntry> entries;
    std::vector<uint16_t> heights;  // subtree height below each entry
};

inline uint16_t below_height(const GenResult& r) {
    uint16_t h = 0;
    for (uint16_t x : r.heights) h = std::max(h, x);
    return h;
}

// Wrap an entry run into a node and return the branch entry covering it.
inline void wrap_node(EntrySink& sink, GenResult& from, size_t begin, size_t end,
                      GenResult& into) {
    std::vector<NodeEntry> part(from.entries.begin() + begin, from.entries.begin() + end);
    uint16_t h = 0;
    for (size_t i = begin; i < end; ++i) h = std::max(h, from.heights[i]);
    NodeRef ref = sink.emit_node(part);
    NodeEntry e;
    e.mbb = union_mbb(part);
    e.child_page = ref.page;
    e.child_slot = ref.slot;
    e.count = part.size();
    e.kind = EntryKind::kBranch;
    into.entries.push_back(e);
    into.heights.push_back(static_cast<uint16_t>(h + 1));
}

inline GenResult generate_entries_rec(std::span<Point> pts, uint64_t pages, EntrySink& sink,
                                      uint32_t d) {
    uint32_t cl = sink.codec.leaf_capacity();
    uint32_t cb = sink.codec.branch_capacity();
    if (pages <= 1) {
        uint64_t pid = sink.emit_data_page(pts);
        NodeEntry e;
        e.mbb = mbb_of(pts, d);
        e.child_page = pid;
        e.count = pts.size();
        e.kind = EntryKind::kLeaf;
        GenResult r;
        r.entries.push_back(e);
        r.heights.push_back(0);
        return r;
    }
    Box box = mbb_of(pts, d);
    uint32_t dim = longest_dimension(box);
    std::sort(pts.begin(), pts.end(),
              [&](const Point& a, const Point& b) { return point_less_on(a, b, dim, d); });
    uint64_t left_pages = pages / 2;
    size_t split_at = static_cast<size_t>(left_pages) * cl;
    GenResult r1 = generate_entries_rec(pts.subspan(0, split_at), left_pages, sink, d);
    GenResult r2 = generate_entries_rec(pts.subspan(split_at), pages - left_pages, sink, d);
    if (r1.entries.size() + r2.entries.size() <= cb) {
        r1.entries.insert(r1.entries.end(), r2.entries.begin(), r2.entries.end());
        r1.heights.insert(r1.heights.end(), r2.heights.begin(), r2.heights.end());
        return r1;
    }
    // Too many entries for one node: one branch entry per half. A half small
    // enough to underflow is passed up unwrapped instead (its entries stay
    // within the half's range, so sibling disjointness is preserved, and the
    // result still fits: 1 + C_B/2 <= C_B). At most one half can be that
    // small because the two together exceed C_B.
    GenResult out;
    auto wrap_or_inline = [&](GenResult& r) {
        if (is_underflowed(r.entries.size(), cb)) {
            out.entries.insert(out.entries.end(), r.entries.begin(), r.entries.end());
            out.heights.insert(out.heights.end(), r.heights.begin(), r.heights.end());
        } else {
            wrap_node(sink, r, 0, r.entries.size(), out);
        }
    };
    wrap_or_inline(r1);
    wrap_or_inline(r2);
    return out;
}

}  // namespace detail

/// Post-order refinement of one subspace's points into at most C_B node
/// entries (the subspace's node), repacking the points into full data pages.
inline detail::GenResult generate_entries(std::vector<Point>& pts, EntrySink& sink, uint32_t d) {
    if (pts.empty()) throw error("generate_entries: empty page list");
    uint64_t pages = sink.codec.pages_for_points(pts.size());
    return detail::generate_entries_rec(std::span<Point>(pts), pages, sink, d);
}

namespace fmbi {

struct BuildConfig {
    uint64_t seed = 0;
    uint32_t cl_override = 0;
    uint32_t cb_override = 0;
    uint32_t max_depth = 32;
};

struct InvocationStats {
    uint32_t depth = 0;
    uint32_t subspaces = 0;
    uint32_t underflowed = 0;
    uint32_t merge_groups = 0;
    bool sampled = false;  // false for the small-dataset path
};

struct BuildReport {
    IoStats io;
    uint64_t n_points = 0;
    uint64_t leaf_pages = 0;
    uint64_t node_pages = 0;
    uint16_t height = 0;
    uint64_t alpha = 0;
    std::vector<uint64_t> root_subspace_cardinalities;
    std::vector<InvocationStats> invocations;

    uint32_t max_underflowed_per_invocation() const {
        uint32_t m = 0;
        for (const auto& inv : invocations) m = std::max(m, inv.underflowed);
        return m;
    }
};

struct MergeGroup {
    std::vector<uint32_t> members;  // subspace ids, merge order
    size_t total_entries = 0;
    bool alive = true;
};

namespace detail {

struct MergeCand {
    int32_t group = -1;
    size_t entries = 0;
    bool null() const { return group < 0; }
};

inline MergeCand merge_rec(const SplitTree& tree, int32_t node,
                           const std::vector<std::optional<size_t>>& counts,
                           std::vector<MergeGroup>& groups, std::vector<int32_t>& group_of,
                           uint32_t cb) {
    const SplitTree::Node& n = tree.nodes[node];
    if (n.subspace >= 0) {
        if (!counts[n.subspace]) return {};  // dense, not processed
        return {group_of[n.subspace], *counts[n.subspace]};
    }
    MergeCand l = merge_rec(tree, n.left, counts, groups, group_of, cb);
    MergeCand r = merge_rec(tree, n.right, counts, groups, group_of, cb);
    if (l.null()) return r;
    if (r.null()) return l;
    if (l.entries + r.entries <= cb &&
        groups[l.group].members.size() + groups[r.group].members.size() <= 255) {
        MergeGroup& gl = groups[l.group];
        MergeGroup& gr = groups[r.group];
        gl.members.insert(gl.members.end(), gr.members.begin(), gr.members.end());
        gl.total_entries += gr.total_entries;
        for (uint32_t sid : gr.members) group_of[sid] = l.group;
        gr.alive = false;
        gr.members.clear();
        return {l.group, gl.total_entries};
    }
    return l.entries <= r.entries ? l : r;
}

}  // namespace detail

/// Post-order pass over the Major SplitTree deciding which branch nodes share
/// a disk page. Subspaces with no entry count (dense, unprocessed) pass their
/// sibling through. Merging two candidates requires their combined entry
/// count to stay within the branch capacity; otherwise the candidate with
/// fewer entries propagates upward.
inline std::vector<MergeGroup> merge_plan(const SplitTree& tree,
                                          const std::vector<std::optional<size_t>>& entry_counts,
                                          uint32_t branch_cap) {
    std::vector<MergeGroup> groups;
    std::vector<int32_t> group_of(entry_counts.size(), -1);
    for (uint32_t i = 0; i < entry_counts.size(); ++i) {
        if (!entry_counts[i]) continue;
        group_of[i] = static_cast<int32_t>(groups.size());
        groups.push_back({{i}, *entry_counts[i], true});
    }
    if (tree.root >= 0)
        detail::merge_rec(tree, tree.root, entry_counts, groups, group_of, branch_cap);
    return groups;
}

namespace detail {

using mbi::detail::GenResult;

struct WorkingPage {
    uint64_t page_id = 0;  // scratch page backing this frame
    std::vector<Point> pts;
};

struct Subspace {
    uint32_t id = 0;
    Box mbb;
    bool active = true;
    bool dense = false;
    bool refined = false;
    uint64_t count = 0;
    size_t seed_pages = 0;
    std::vector<WorkingPage> mem;
    std::vector<uint64_t> disk;
    GenResult result;
    NodeRef node;  // where the subspace node landed
    uint16_t node_height = 0;
};

struct Builder {
    BufferPool& pool;
    PageFile& data;
    PageFile& out;
    PageFile& scratch;
    PageCodec codec;
    BuildConfig cfg;
    std::mt19937_64 rng;
    BuildReport report;
    EntrySink sink;
    std::vector<uint8_t> iobuf;

    Builder(BufferPool& pool_, PageFile& data_, PageFile& out_, PageFile& scratch_,
            const PageCodec& codec_, const BuildConfig& cfg_)
        : pool(pool_), data(data_), out(out_), scratch(scratch_), codec(codec_), cfg(cfg_),
          rng(cfg_.seed), sink{pool_, out_, codec_} {}

    uint32_t d() const { return codec.d; }
    uint32_t cl() const { return codec.leaf_capacity(); }
    uint32_t cb() const { return codec.branch_capacity(); }
    uint64_t buffer_pages() const { return pool.capacity(); }

    std::vector<Point> load_pages(PageFile& f, std::span<const uint64_t> ids) {
        std::vector<Point> pts;
        for (uint64_t pid : ids) {
            pool.read_streaming(f, pid, iobuf);
            decode_data_page(codec, iobuf, pts);
        }
        return pts;
    }

    WorkingPage new_working_page() {
        uint64_t id = pool.allocate_page(scratch);
        pool.pin(scratch, id);
        WorkingPage wp;
        wp.page_id = id;
        wp.pts.reserve(cl());
        return wp;
    }

    void flush_working(Subspace& sub, WorkingPage& wp) {
        std::vector<uint8_t> buf;
        encode_data_page(codec, wp.pts, buf);
        pool.write_page(scratch, wp.page_id, buf);
        pool.flush_evict(scratch, wp.page_id);
        sub.disk.push_back(wp.page_id);
    }

    void release_working(WorkingPage& wp) { pool.discard(scratch, wp.page_id); }

    void deactivate(Subspace& sub) {
        // Flush everything, keeping only the newest partial page in memory.
        // Flushing in page order keeps the subspace's disk list ascending.
        size_t keep = sub.mem.size();
        for (size_t i = sub.mem.size(); i-- > 0;) {
            if (sub.mem[i].pts.size() < cl()) {
                keep = i;
                break;
            }
        }
        bool have_retained = keep < sub.mem.size();
        WorkingPage retained;
        for (size_t i = 0; i < sub.mem.size(); ++i) {
            if (i == keep) retained = std::move(sub.mem[i]);
            else flush_working(sub, sub.mem[i]);
        }
        sub.mem.clear();
        sub.mem.push_back(have_retained ? std::move(retained) : new_working_page());
        sub.active = false;
    }

    void insert_point(Subspace& sub, const Point& p) {
        sub.mbb.expand(p);
        ++sub.count;
        if (sub.active) {
            bool need_page = sub.mem.size() == sub.seed_pages || sub.mem.back().pts.size() >= cl();
            if (need_page) {
                if (pool.pinned() >= pool.capacity()) {
                    deactivate(sub);  // frees this subspace's full pages
                } else {
                    sub.mem.push_back(new_working_page());
                }
            }
        }
        if (sub.active) {
            sub.mem.back().pts.push_back(p);
            return;
        }
        // Inactive: single retained page, flushed whenever it fills.
        WorkingPage& wp = sub.mem.back();
        wp.pts.push_back(p);
        if (wp.pts.size() >= cl()) {
            flush_working(sub, wp);
            sub.mem.back() = new_working_page();
        }
    }

    std::vector<uint64_t> sample_pages(std::span<const uint64_t> pages, uint64_t want) {
        std::vector<uint64_t> idx(pages.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (uint64_t i = 0; i < want; ++i) {
            std::uniform_int_distribution<uint64_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        std::vector<uint64_t> out(want);
        for (uint64_t i = 0; i < want; ++i) out[i] = pages[idx[i]];
        std::sort(out.begin(), out.end());
        return out;
    }

    // Steps 1-5 over one (sub)dataset; returns the entries of its root node.
    GenResult build_invocation(PageFile& src, std::span<const uint64_t> pages, uint32_t depth) {
        if (depth > cfg.max_depth) throw error("fmbi: dense recursion depth cap exceeded");
        uint64_t alpha = buffer_pages() / cb();
        uint64_t sample_count = alpha * cb();
        if (depth == 0) report.alpha = alpha;

        InvocationStats inv;
        inv.depth = depth;

        if (pages.size() < sample_count) {
            // Small datasets skip Step 1: refine all pages in one pass.
            std::vector<Point> pts = load_pages(src, pages);
            uint32_t before = sink.underflowed_internal;
            GenResult root = generate_entries(pts, sink, d());
            inv.underflowed = sink.underflowed_internal - before;
            if (is_underflowed(root.entries.size(), cb())) ++inv.underflowed;
            inv.subspaces = 1;
            if (depth == 0)
                report.root_subspace_cardinalities.assign(1, static_cast<uint64_t>(pts.size()));
            report.invocations.push_back(inv);
            return root;
        }
        inv.sampled = true;

        // Step 1: initial partitioning of a random sample.
        std::vector<uint64_t> sampled = sample_pages(pages, sample_count);
        std::vector<Point> sample_pts = load_pages(src, sampled);
        SplitBuild sb = build_splittree(std::span<Point>(sample_pts), sample_count, cl(), alpha,
                                        cb(), d());
        std::vector<Subspace> subs(sb.seeds.size());
        for (const SubspaceSeed& seed : sb.seeds) {
            Subspace& s = subs[seed.id];
            s.id = seed.id;
            s.mbb = seed.mbb;
            s.count = seed.end - seed.begin;
            for (size_t b = seed.begin; b < seed.end; b += cl()) {
                WorkingPage wp = new_working_page();
                size_t e = std::min(seed.end, b + cl());
                wp.pts.assign(sample_pts.begin() + b, sample_pts.begin() + e);
                s.mem.push_back(std::move(wp));
            }
            s.seed_pages = s.mem.size();
        }
        sample_pts.clear();
        sample_pts.shrink_to_fit();

        // Step 2: distribute the remaining pages through the split tree.
        {
            std::vector<Point> pts;
            size_t si = 0;
            for (uint64_t pid : pages) {
                if (si < sampled.size() && sampled[si] == pid) {
                    ++si;
                    continue;
                }
                pts.clear();
                pool.read_streaming(src, pid, iobuf);
                decode_data_page(codec, iobuf, pts);
                for (const Point& p : pts) insert_point(subs[sb.tree.locate(p)], p);
            }
        }
        // Release the distribution's retained partials before refinement so
        // each subspace sees the full buffer.
        for (Subspace& s : subs) {
            if (s.active) continue;
            WorkingPage& wp = s.mem.back();
            if (wp.pts.empty()) release_working(wp);
            else flush_working(s, wp);
            s.mem.clear();
        }

        // Step 3: refine sparse subspaces, buffer-resident ones first.
        for (Subspace& s : subs) {
            if (!s.active) continue;
            std::vector<Point> pts;
            for (WorkingPage& wp : s.mem) {
                pts.insert(pts.end(), wp.pts.begin(), wp.pts.end());
                release_working(wp);
            }
            s.mem.clear();
            refine(s, pts, inv);
        }
        for (Subspace& s : subs) {
            if (s.active || s.refined) continue;
            if (s.disk.size() > buffer_pages()) {
                s.dense = true;  // Step 5 input
                continue;
            }
            std::vector<Point> pts = load_pages(scratch, s.disk);
            refine(s, pts, inv);
        }

        // Step 4: merge underflowed branches along the split tree.
        std::vector<std::optional<size_t>> counts(subs.size());
        for (Subspace& s : subs)
            if (s.refined) counts[s.id] = s.result.entries.size();
        std::vector<MergeGroup> groups = merge_plan(sb.tree, counts, cb());
        for (const MergeGroup& g : groups) {
            if (!g.alive) continue;
            ++inv.merge_groups;
            std::vector<std::vector<NodeEntry>> nodes;
            for (uint32_t sid : g.members) nodes.push_back(subs[sid].result.entries);
            NodeRef page = sink.emit_shared_node_page(nodes);
            for (size_t slot = 0; slot < g.members.size(); ++slot) {
                Subspace& s = subs[g.members[slot]];
                s.node = {page.page, static_cast<uint16_t>(slot)};
                s.node_height = static_cast<uint16_t>(mbi::detail::below_height(s.result) + 1);
            }
            if (g.members.size() == 1 && is_underflowed(g.total_entries, cb())) ++inv.underflowed;
        }

        // Step 5: every dense subspace is bulk loaded as its own dataset.
        inv.subspaces = static_cast<uint32_t>(subs.size());
        if (depth == 0) {
            report.root_subspace_cardinalities.clear();
            for (const Subspace& s : subs) report.root_subspace_cardinalities.push_back(s.count);
        }
        report.invocations.push_back(inv);
        size_t inv_index = report.invocations.size() - 1;
        for (Subspace& s : subs) {
            if (!s.dense) continue;
            std::sort(s.disk.begin(), s.disk.end());
            GenResult sub_root = build_invocation(scratch, s.disk, depth + 1);
            NodeRef ref = sink.emit_node(sub_root.entries);
            s.node = ref;
            s.node_height = static_cast<uint16_t>(mbi::detail::below_height(sub_root) + 1);
            s.result.entries = std::move(sub_root.entries);
            s.refined = true;
        }

        (void)inv_index;
        GenResult root;
        for (const Subspace& s : subs) {
            NodeEntry e;
            e.mbb = s.mbb;
            e.child_page = s.node.page;
            e.child_slot = s.node.slot;
            e.count = s.result.entries.size();
            e.kind = EntryKind::kBranch;
            root.entries.push_back(e);
            root.heights.push_back(s.node_height);
        }
        return root;
    }

    void refine(Subspace& s, std::vector<Point>& pts, InvocationStats& inv) {
        uint32_t before = sink.underflowed_internal;
        s.result = generate_entries(pts, sink, d());
        inv.underflowed += sink.underflowed_internal - before;
        s.refined = true;
    }
};

}  // namespace detail

/// Scan-based bulk load of `data` into an index file at `out_path`.
inline BuildReport bulk_load(BufferPool& pool, PageFile& data, const std::string& out_path,
                             const BuildConfig& cfg = {}) {
    const FileHeader& hd = data.header();
    PageCodec codec{hd.page_size, hd.d, (hd.flags & kFlagHasIds) != 0, cfg.cl_override,
                    cfg.cb_override};
    codec.validate();
    if (pool.capacity() <= codec.branch_capacity())
        throw error("fmbi: buffer must exceed the branch capacity");

    FileHeader out_header = hd;
    out_header.flags |= kFlagIndexFile;
    PageFile out = PageFile::create(out_path, out_header);
    TempFile scratch(out_path, out_header);

    IoStats before = pool.stats();
    detail::Builder b(pool, data, out, scratch.file(), codec, cfg);
    std::vector<uint64_t> pages(data.page_count());
    for (size_t i = 0; i < pages.size(); ++i) pages[i] = i;

    detail::GenResult root;
    if (!pages.empty()) root = b.build_invocation(data, pages, 0);
    NodeRef root_ref = b.sink.emit_node(root.entries);

    IndexTrailer t;
    t.root_page = static_cast<uint32_t>(root_ref.page);
    t.root_slot = root_ref.slot;
    t.height = static_cast<uint16_t>(root.entries.empty() ? 1 : mbi::detail::below_height(root) + 1);
    t.n_points = hd.n;
    t.leaf_pages = static_cast<uint32_t>(b.sink.leaf_pages);
    t.node_pages = static_cast<uint32_t>(b.sink.node_pages);
    t.c_l = codec.leaf_capacity();
    t.c_b = codec.branch_capacity();
    t.buffer_pages = static_cast<uint32_t>(pool.capacity());
    t.seed = cfg.seed;
    t.method = IndexMethod::kFmbi;
    IoStats io = pool.stats() - before;
    t.build_reads = io.page_reads;
    t.build_writes = io.page_writes;
    write_trailer(pool, out, codec, t);
    out.set_point_count(hd.n);
    pool.reset_cache();

    b.report.io = pool.stats() - before;
    b.report.n_points = hd.n;
    b.report.leaf_pages = b.sink.leaf_pages;
    b.report.node_pages = b.sink.node_pages;
    b.report.height = t.height;
    return b.report;
}

}  // namespace fmbi
}  // namespace mbi
