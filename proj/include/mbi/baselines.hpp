#pragma once

#include <cmath>
#include <functional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "mbi/core.hpp"
#include "mbi/fmbi.hpp"
#include "mbi/hilbert.hpp"
#include "mbi/index_format.hpp"
#include "mbi/storage.hpp"

namespace mbi {

using PointLess = std::function<bool(const Point&, const Point&)>;

/// Stable external merge sort of the points held by `pages` of `in`. Sorted
/// runs are appended to `run_file` as full pages; the returned ids hold the
/// final sorted sequence. Buffer budget: pool.capacity() pages per run during
/// formation, fan-in pool.capacity()-1 during merging.
inline std::vector<uint64_t> external_sort(BufferPool& pool, PageFile& in,
                                           std::span<const uint64_t> pages, const PageCodec& codec,
                                           PageFile& run_file, const PointLess& less) {
    const uint64_t m = pool.capacity();
    const uint32_t cl = codec.leaf_capacity();
    std::vector<uint8_t> iobuf;
    std::vector<uint8_t> outbuf;

    struct Run {
        std::vector<uint64_t> ids;
    };
    std::vector<Run> runs;

    // Run formation: sort buffer-sized chunks in memory.
    std::vector<Point> chunk;
    auto emit_run = [&](std::vector<Point>& pts) {
        std::stable_sort(pts.begin(), pts.end(), less);
        Run r;
        for (size_t b = 0; b < pts.size(); b += cl) {
            size_t e = std::min(pts.size(), b + cl);
            encode_data_page(codec, std::span<const Point>(pts.data() + b, e - b), outbuf);
            r.ids.push_back(pool.append_page(run_file, outbuf));
        }
        runs.push_back(std::move(r));
        pts.clear();
    };
    uint64_t pages_in_chunk = 0;
    for (uint64_t pid : pages) {
        pool.read_streaming(in, pid, iobuf);
        decode_data_page(codec, iobuf, chunk);
        if (++pages_in_chunk >= m) {
            emit_run(chunk);
            pages_in_chunk = 0;
        }
    }
    if (!chunk.empty()) emit_run(chunk);
    if (runs.empty()) return {};

    // Merge passes with fan-in M-1.
    struct Cursor {
        const std::vector<uint64_t>* ids;
        size_t page = 0;
        std::vector<Point> buf;
        size_t pos = 0;
    };
    while (runs.size() > 1) {
        std::vector<Run> next;
        for (size_t g = 0; g < runs.size(); g += m - 1) {
            size_t ge = std::min(runs.size(), g + (m - 1));
            std::vector<Cursor> cur(ge - g);
            for (size_t i = 0; i < cur.size(); ++i) cur[i].ids = &runs[g + i].ids;
            auto refill = [&](Cursor& c) {
                c.buf.clear();
                c.pos = 0;
                if (c.page >= c.ids->size()) return false;
                pool.read_streaming(run_file, (*c.ids)[c.page++], iobuf);
                decode_data_page(codec, iobuf, c.buf);
                return true;
            };
            struct QE {
                const Point* p;
                size_t run;
            };
            auto after = [&](const QE& a, const QE& b) {
                if (less(*b.p, *a.p)) return true;
                if (less(*a.p, *b.p)) return false;
                return a.run > b.run;  // stability across runs
            };
            std::priority_queue<QE, std::vector<QE>, decltype(after)> pq(after);
            for (size_t i = 0; i < cur.size(); ++i)
                if (refill(cur[i])) pq.push({&cur[i].buf[0], i});
            Run merged;
            std::vector<Point> out;
            out.reserve(cl);
            while (!pq.empty()) {
                QE e = pq.top();
                pq.pop();
                out.push_back(*e.p);
                if (out.size() == cl) {
                    encode_data_page(codec, out, outbuf);
                    merged.ids.push_back(pool.append_page(run_file, outbuf));
                    out.clear();
                }
                Cursor& c = cur[e.run];
                if (++c.pos >= c.buf.size() && !refill(c)) continue;
                pq.push({&c.buf[c.pos], e.run});
            }
            if (!out.empty()) {
                encode_data_page(codec, out, outbuf);
                merged.ids.push_back(pool.append_page(run_file, outbuf));
            }
            next.push_back(std::move(merged));
        }
        runs = std::move(next);
    }
    return std::move(runs.front().ids);
}

namespace baselines {

struct BaselineConfig {
    uint64_t seed = 0;
    uint32_t cl_override = 0;
    uint32_t cb_override = 0;
    uint32_t hilbert_order = 16;
};

struct BaselineReport {
    IoStats io;
    uint64_t n_points = 0;
    uint64_t leaf_pages = 0;
    uint64_t node_pages = 0;
    uint16_t height = 0;
};

namespace detail {

// In-memory sort-tile-recursive ordering of entries by their MBB centers:
// after the call, packing consecutive groups of `cap` forms the tiling.
inline void tile_entries(std::span<NodeEntry> items, uint32_t axis, uint32_t d, uint64_t cap) {
    if (items.size() <= cap || axis >= d) return;
    auto center_less = [axis](const NodeEntry& a, const NodeEntry& b) {
        double ca = a.mbb.lo[axis] + a.mbb.hi[axis];
        double cb = b.mbb.lo[axis] + b.mbb.hi[axis];
        return ca < cb;
    };
    std::stable_sort(items.begin(), items.end(), center_less);
    uint64_t pages = (items.size() + cap - 1) / cap;
    uint32_t rem = d - axis;
    uint64_t slices = static_cast<uint64_t>(std::ceil(std::pow(double(pages), 1.0 / rem)));
    if (slices < 1) slices = 1;
    uint64_t slab_items = ((pages + slices - 1) / slices) * cap;
    for (size_t b = 0; b < items.size(); b += slab_items) {
        size_t e = std::min(items.size(), b + slab_items);
        tile_entries(items.subspan(b, e - b), axis + 1, d, cap);
    }
}

// Pack ordered entries into nodes of `cap`, then recurse level by level in
// memory until a single root node remains.
inline NodeRef pack_upper_levels(EntrySink& sink, std::vector<NodeEntry> level, bool str_order,
                                 const Box& domain, uint32_t order, uint16_t* height_out) {
    const PageCodec& codec = sink.codec;
    uint32_t cb = codec.branch_capacity();
    uint16_t height = 1;
    while (level.size() > cb) {
        // Upper levels are a few percent of the data and are ordered in
        // memory; only a pathological size is rejected.
        if (level.size() * codec.entry_bytes() > (1ull << 31))
            throw error("upper index level too large for in-memory ordering");
        if (str_order) {
            tile_entries(level, 0, codec.d, cb);
        } else {
            std::stable_sort(level.begin(), level.end(),
                             [&](const NodeEntry& a, const NodeEntry& b) {
                                 Point ca, cbp;
                                 for (uint32_t i = 0; i < codec.d; ++i) {
                                     ca.coords[i] = (a.mbb.lo[i] + a.mbb.hi[i]) / 2;
                                     cbp.coords[i] = (b.mbb.lo[i] + b.mbb.hi[i]) / 2;
                                 }
                                 return hilbert_key(ca, domain, codec.d, order) <
                                        hilbert_key(cbp, domain, codec.d, order);
                             });
        }
        std::vector<NodeEntry> next;
        for (size_t b = 0; b < level.size(); b += cb) {
            size_t e = std::min(level.size(), b + cb);
            std::vector<NodeEntry> node(level.begin() + b, level.begin() + e);
            NodeRef ref = sink.emit_node(node);
            NodeEntry entry;
            entry.mbb = mbi::detail::union_mbb(node);
            entry.child_page = ref.page;
            entry.child_slot = ref.slot;
            entry.count = node.size();
            entry.kind = EntryKind::kBranch;
            next.push_back(entry);
        }
        level = std::move(next);
        ++height;
    }
    NodeRef root = sink.emit_node(level);
    if (height_out) *height_out = height;
    return root;
}

// Consume sorted pages in order, re-packing them into leaf pages.
inline std::vector<NodeEntry> pack_leaves(BufferPool& pool, PageFile& run_file,
                                          std::span<const uint64_t> ids, EntrySink& sink,
                                          const PageCodec& codec) {
    std::vector<NodeEntry> leaves;
    std::vector<uint8_t> iobuf;
    std::vector<Point> pending;
    uint32_t cl = codec.leaf_capacity();
    auto flush = [&](size_t take) {
        std::span<const Point> pts(pending.data(), take);
        uint64_t pid = sink.emit_data_page(pts);
        NodeEntry e;
        e.mbb = mbb_of(pts, codec.d);
        e.child_page = pid;
        e.count = take;
        e.kind = EntryKind::kLeaf;
        leaves.push_back(e);
        pending.erase(pending.begin(), pending.begin() + take);
    };
    for (uint64_t pid : ids) {
        pool.read_streaming(run_file, pid, iobuf);
        decode_data_page(codec, iobuf, pending);
        while (pending.size() >= cl) flush(cl);
    }
    if (!pending.empty()) flush(pending.size());
    return leaves;
}

struct OutFiles {
    PageFile out;
    TempFile scratch;
    PageCodec codec;

    OutFiles(PageFile& data, const std::string& out_path, const BaselineConfig& cfg)
        : out(), scratch(out_path, index_header(data)), codec() {
        const FileHeader& hd = data.header();
        codec = PageCodec{hd.page_size, hd.d, (hd.flags & kFlagHasIds) != 0, cfg.cl_override,
                          cfg.cb_override};
        codec.validate();
        out = PageFile::create(out_path, index_header(data));
    }

    static FileHeader index_header(PageFile& data) {
        FileHeader h = data.header();
        h.flags |= kFlagIndexFile;
        return h;
    }
};

inline BaselineReport finish(BufferPool& pool, OutFiles& files, EntrySink& sink, NodeRef root,
                             uint16_t height, uint64_t n, IoStats before, IndexMethod method,
                             const BaselineConfig& cfg) {
    IndexTrailer t;
    t.root_page = static_cast<uint32_t>(root.page);
    t.root_slot = root.slot;
    t.height = height;
    t.n_points = n;
    t.leaf_pages = static_cast<uint32_t>(sink.leaf_pages);
    t.node_pages = static_cast<uint32_t>(sink.node_pages);
    t.c_l = files.codec.leaf_capacity();
    t.c_b = files.codec.branch_capacity();
    t.buffer_pages = static_cast<uint32_t>(pool.capacity());
    t.seed = cfg.seed;
    t.method = method;
    IoStats io = pool.stats() - before;
    t.build_reads = io.page_reads;
    t.build_writes = io.page_writes;
    write_trailer(pool, files.out, files.codec, t);
    files.out.set_point_count(n);
    pool.reset_cache();

    BaselineReport rep;
    rep.io = pool.stats() - before;
    rep.n_points = n;
    rep.leaf_pages = sink.leaf_pages;
    rep.node_pages = sink.node_pages;
    rep.height = height;
    return rep;
}

}  // namespace detail

/// Sort-tile-recursive bulk loading: a staged external sort per dimension,
/// then fully packed leaves and upper levels built from MBB centers.
inline BaselineReport str_bulk_load(BufferPool& pool, PageFile& data, const std::string& out_path,
                                    const BaselineConfig& cfg = {}) {
    detail::OutFiles files(data, out_path, cfg);
    const PageCodec& codec = files.codec;
    IoStats before = pool.stats();
    EntrySink sink{pool, files.out, codec};

    std::vector<uint64_t> input(data.page_count());
    for (size_t i = 0; i < input.size(); ++i) input[i] = i;

    std::vector<NodeEntry> leaves;
    if (!input.empty()) {
        auto axis_less = [&codec](uint32_t axis) {
            return [axis, &codec](const Point& a, const Point& b) {
                return point_less_on(a, b, axis, codec.d);
            };
        };
        // Axis 0 over the whole file, then per-slab stages for the rest.
        std::vector<uint64_t> sorted =
            external_sort(pool, data, input, codec, files.scratch.file(), axis_less(0));

        struct Slab {
            std::vector<uint64_t> ids;
            uint32_t axis;
        };
        std::vector<Slab> work{{std::move(sorted), 1}};
        while (!work.empty()) {
            Slab s = std::move(work.back());
            work.pop_back();
            uint64_t pages = s.ids.size();
            if (s.axis >= codec.d || pages <= 1) {
                auto part = detail::pack_leaves(pool, files.scratch.file(), s.ids, sink, codec);
                leaves.insert(leaves.end(), part.begin(), part.end());
                continue;
            }
            uint32_t rem = codec.d - (s.axis - 1);
            uint64_t slices =
                static_cast<uint64_t>(std::ceil(std::pow(double(pages), 1.0 / rem)));
            if (slices < 1) slices = 1;
            uint64_t slab_pages = (pages + slices - 1) / slices;
            // Queue slabs in reverse so they are processed left to right.
            std::vector<Slab> pending;
            for (uint64_t b = 0; b < pages; b += slab_pages) {
                uint64_t e = std::min(pages, b + slab_pages);
                std::vector<uint64_t> part(s.ids.begin() + b, s.ids.begin() + e);
                std::vector<uint64_t> staged = external_sort(
                    pool, files.scratch.file(), part, codec, files.scratch.file(),
                    axis_less(s.axis));
                pending.push_back({std::move(staged), s.axis + 1});
            }
            for (size_t i = pending.size(); i-- > 0;) work.push_back(std::move(pending[i]));
        }
    }

    uint16_t height = 1;
    Box domain(codec.d);
    NodeRef root = detail::pack_upper_levels(sink, std::move(leaves), true, domain, 0, &height);
    return detail::finish(pool, files, sink, root, height, data.header().n, before,
                          IndexMethod::kStr, cfg);
}

/// Hilbert packing: one external sort by Hilbert rank over the dataset MBB,
/// fully packed leaves, upper levels ranked by MBB centers.
inline BaselineReport hilbert_bulk_load(BufferPool& pool, PageFile& data,
                                        const std::string& out_path,
                                        const BaselineConfig& cfg = {}) {
    detail::OutFiles files(data, out_path, cfg);
    const PageCodec& codec = files.codec;
    IoStats before = pool.stats();
    EntrySink sink{pool, files.out, codec};

    std::vector<uint64_t> input(data.page_count());
    for (size_t i = 0; i < input.size(); ++i) input[i] = i;

    // One scan to fix the quantization domain.
    Box domain(codec.d);
    {
        std::vector<uint8_t> iobuf;
        std::vector<Point> pts;
        for (uint64_t pid : input) {
            pts.clear();
            pool.read_streaming(data, pid, iobuf);
            decode_data_page(codec, iobuf, pts);
            for (const Point& p : pts) domain.expand(p);
        }
    }

    std::vector<NodeEntry> leaves;
    if (!input.empty()) {
        uint32_t order = cfg.hilbert_order;
        auto rank_less = [&codec, &domain, order](const Point& a, const Point& b) {
            HilbertKey ka = hilbert_key(a, domain, codec.d, order);
            HilbertKey kb = hilbert_key(b, domain, codec.d, order);
            if (ka == kb) return point_lex_less(a, b, codec.d);
            return ka < kb;
        };
        std::vector<uint64_t> sorted =
            external_sort(pool, data, input, codec, files.scratch.file(), rank_less);
        leaves = detail::pack_leaves(pool, files.scratch.file(), sorted, sink, codec);
    }

    uint16_t height = 1;
    NodeRef root = detail::pack_upper_levels(sink, std::move(leaves), false, domain,
                                             cfg.hilbert_order, &height);
    return detail::finish(pool, files, sink, root, height, data.header().n, before,
                          IndexMethod::kHilbert, cfg);
}

}  // namespace baselines
}  // namespace mbi
