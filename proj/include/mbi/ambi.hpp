#pragma once

#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "mbi/core.hpp"
#include "mbi/fmbi.hpp"
#include "mbi/index_format.hpp"
#include "mbi/query.hpp"
#include "mbi/splittree.hpp"
#include "mbi/storage.hpp"

namespace mbi {
namespace ambi {

struct AmbiConfig {
    uint64_t seed = 0;
    uint32_t cl_override = 0;
    uint32_t cb_override = 0;
};

struct RefineLog {
    uint64_t query_id = 0;
    uint32_t subspaces_refined = 0;
    uint64_t pages_reloaded = 0;
    uint64_t heap_evictions = 0;
};

struct AmbiStats {
    uint64_t leaf_count = 0;
    uint64_t points = 0;
    double total_perimeter = 0.0;
    double total_area = 0.0;
    uint64_t unrefined_subspaces = 0;
};

/// Adaptive index: built on demand by the queries themselves. The first query
/// scans the data file once, partitions it, and keeps whatever the buffer
/// allows; everything else is spilled and refined when a later query needs
/// it. The branch structure is kept live in memory; data pages, spilled
/// subspace pages and finalized nodes live in a scratch page file owned by
/// the state, and all I/O flows through the owner's buffer pool.
class AmbiState {
    struct ANode;

    // Deferred subspace: pages on disk, refined when a query first needs it.
    struct Unref {
        std::vector<uint64_t> pages;
        std::vector<Point> pending;  // buffered inserts not yet spilled
        uint64_t points = 0;
        int32_t group = -1;
        uint16_t slot = 0;
    };

    struct AEntry {
        enum class Kind : uint8_t { kLeaf, kChild, kDisk, kUnref };
        Box mbb;
        uint64_t count = 0;
        Kind kind = Kind::kLeaf;
        uint64_t page = 0;  // data page (kLeaf) or node page (kDisk)
        uint16_t slot = 0;
        std::unique_ptr<ANode> child;
        std::unique_ptr<Unref> unref;
    };

    struct ANode {
        std::vector<AEntry> entries;
        int32_t group = -1;  // node page shared with merge partners
        uint16_t slot = 0;
    };

    // Serialized images of the node pages assembled so far; a page is
    // rewritten whenever one of its member nodes (re)finalizes.
    struct NodeGroup {
        int64_t page = -1;
        std::vector<std::vector<NodeEntry>> slots;
    };

    struct Chain {
        std::vector<uint64_t> pages;
        std::vector<Point> tail;
    };

  public:
    AmbiState(BufferPool& pool, PageFile& data, const std::string& work_path,
              const AmbiConfig& cfg = {})
        : pool_(pool), data_(data), cfg_(cfg), codec_(make_codec(data, cfg)),
          scratch_(work_path, scratch_header(data)), rng_(cfg.seed), io_base_(pool.stats()) {
        codec_.validate();
        if (pool_.capacity() <= codec_.branch_capacity())
            throw error("ambi: buffer must exceed the branch capacity");
        n_ = data.header().n;
    }

    QueryResult window(const WindowQuery& q) {
        for (uint32_t i = 0; i < q.rect.d; ++i)
            if (q.rect.lo[i] > q.rect.hi[i]) throw error("invalid window");
        WindowCollector col(q.rect, codec_.d);
        QueryResult res = run_query(col);
        sort_result(res.points, codec_.d, codec_.has_ids);
        return res;
    }

    QueryResult knn(const KnnQuery& q) {
        if (q.k < 1) throw error("k must be positive");
        KnnCollector col(q, codec_.d);
        QueryResult res = run_query(col);
        res.truncated = res.points.size() < q.k;
        return res;
    }

    /// Route a new point to its covering leaf or deferred subspace. A full
    /// leaf grows an overflow chain; restructuring waits for the next query
    /// that reaches the leaf.
    void insert(const Point& p) {
        ensure_initialized();
        ++n_;
        if (root_.entries.empty()) {
            AEntry e;
            e.mbb = Box(codec_.d);
            e.mbb.expand(p);
            e.kind = AEntry::Kind::kLeaf;
            e.page = new_data_page({&p, 1});
            e.count = 1;
            root_.entries.push_back(std::move(e));
            return;
        }
        insert_into(root_, p);
    }

    /// Remove one point matching p's coordinates (and id when present).
    /// Emptied leaves linger until a query repacks their node.
    bool erase(const Point& p) {
        ensure_initialized();
        bool found = erase_from(root_, p);
        if (found) --n_;
        return found;
    }

    const std::vector<RefineLog>& refinement_log() const { return log_; }
    IoStats io() const { return pool_.stats() - io_base_; }
    uint64_t point_count() const { return n_; }
    bool initialized() const { return initialized_; }

    bool fully_refined() const { return initialized_ && !has_unref(root_); }

    /// Leaf-level statistics of the refined part. Walking the structure
    /// performs real page reads through the owning pool; snapshot io() first
    /// when measuring workload cost.
    AmbiStats stats() {
        ensure_initialized();
        AmbiStats st;
        stats_rec(root_, st);
        return st;
    }

    uint64_t chained_leaf_count() const { return chains_.size(); }

    uint64_t chain_page_count() const {
        uint64_t n = 0;
        for (const auto& [pid, c] : chains_) n += c.pages.size() + (c.tail.empty() ? 0 : 1);
        return n;
    }

    /// True when no leaf intersecting `rect` still carries an overflow chain
    /// or sits empty. Used to check the lazy-update contract after queries.
    bool region_clean(const Box& rect) {
        return region_clean_rec(root_, rect);
    }

  private:
    // ---- collectors ------------------------------------------------------

    struct WindowCollector {
        Box rect;
        uint32_t d;
        std::vector<Point> out;

        WindowCollector(const Box& r, uint32_t dim) : rect(r), d(dim) {}
        bool qualifies(const Box& b) const { return intersects(b, rect); }
        double key(const Box& b) const { return mindist(rect, b); }
        void offer(const Point& p) {
            if (rect.contains(p)) out.push_back(p);
        }
        std::vector<Point> take() { return std::move(out); }
    };

    struct KnnCollector {
        KnnCandidates cand;
        Point center;

        KnnCollector(const KnnQuery& q, uint32_t dim)
            : cand(q.k, dim, q.center), center(q.center) {}
        bool qualifies(const Box& b) const { return mindist(center, b) <= cand.bound(); }
        double key(const Box& b) const { return mindist(center, b); }
        void offer(const Point& p) { cand.offer(p); }
        std::vector<Point> take() { return cand.take_sorted(); }
    };

    // ---- shared plumbing ---------------------------------------------------

    static PageCodec make_codec(PageFile& data, const AmbiConfig& cfg) {
        const FileHeader& hd = data.header();
        return PageCodec{hd.page_size, hd.d, (hd.flags & kFlagHasIds) != 0, cfg.cl_override,
                         cfg.cb_override};
    }

    static FileHeader scratch_header(PageFile& data) {
        FileHeader h = data.header();
        h.flags |= kFlagIndexFile;
        return h;
    }

    uint32_t d() const { return codec_.d; }
    uint32_t cl() const { return codec_.leaf_capacity(); }
    uint32_t cb() const { return codec_.branch_capacity(); }
    PageFile& sfile() { return scratch_.file(); }

    uint64_t new_data_page(std::span<const Point> pts) {
        std::vector<uint8_t> buf;
        encode_data_page(codec_, pts, buf);
        return pool_.append_page(sfile(), buf);
    }

    void rewrite_data_page(uint64_t page, std::span<const Point> pts) {
        std::vector<uint8_t> buf;
        encode_data_page(codec_, pts, buf);
        pool_.write_page(sfile(), page, buf);
    }

    std::vector<Point> read_data_page(uint64_t page) {
        std::vector<Point> pts;
        decode_data_page(codec_, pool_.read_page(sfile(), page), pts);
        return pts;
    }

    // ---- node group (shared page) bookkeeping ------------------------------

    int32_t new_group(size_t member_count) {
        groups_.push_back(NodeGroup{-1, std::vector<std::vector<NodeEntry>>(member_count)});
        return static_cast<int32_t>(groups_.size() - 1);
    }

    void materialize_slot(int32_t group, uint16_t slot, const std::vector<NodeEntry>& entries) {
        if (group < 0) return;
        NodeGroup& g = groups_[group];
        size_t total = entries.size();
        for (size_t i = 0; i < g.slots.size(); ++i)
            if (i != slot) total += g.slots[i].size();
        if (total > codec_.physical_branch_capacity()) {
            // grew past its planned shared page; store the node alone
            std::vector<std::vector<NodeEntry>> one{entries};
            std::vector<uint8_t> buf;
            encode_node_page(codec_, one, buf);
            pool_.append_page(sfile(), buf);
            return;
        }
        g.slots[slot] = entries;
        std::vector<uint8_t> buf;
        encode_node_page(codec_, g.slots, buf);
        if (g.page < 0) {
            g.page = static_cast<int64_t>(pool_.append_page(sfile(), buf));
        } else {
            pool_.write_page(sfile(), g.page, buf);
            pool_.flush_page(sfile(), g.page);
        }
    }

    // ---- first-query build: adaptive distribution --------------------------

    struct WorkPage {
        uint64_t page_id = 0;
        std::vector<Point> pts;
    };

    struct LevelWork;

    struct SubWork {
        uint32_t id = 0;
        Box mbb;
        uint64_t points = 0;
        bool active = true;
        size_t seed_pages = 0;
        std::vector<WorkPage> mem;
        std::vector<uint64_t> disk;
        std::unique_ptr<LevelWork> split;
        std::vector<NodeEntry> entries;
        bool refined = false;
    };

    struct LevelWork {
        SplitTree tree;
        std::vector<std::unique_ptr<SubWork>> subs;
    };

    struct HeapItem {
        double key;
        uint64_t pages;
        uint64_t seq;
        SubWork* sub;
    };
    struct HeapLess {
        bool operator()(const HeapItem& a, const HeapItem& b) const {
            if (a.key != b.key) return a.key < b.key;          // max-heap on distance
            if (a.pages != b.pages) return a.pages < b.pages;  // bigger flushes first
            return a.seq > b.seq;
        }
    };

    template <typename Collector>
    struct Distribution {
        AmbiState& st;
        Collector& col;
        std::priority_queue<HeapItem, std::vector<HeapItem>, HeapLess> heap;
        uint64_t seq = 0;
        uint64_t evictions = 0;
        std::vector<SubWork*> all_subs;
        std::vector<uint8_t> iobuf;

        Distribution(AmbiState& s, Collector& c) : st(s), col(c) {}

        uint64_t work_pages(const SubWork& s) const {
            return st.codec_.pages_for_points(mem_points(s)) + s.disk.size();
        }
        uint64_t mem_points(const SubWork& s) const {
            uint64_t n = 0;
            for (const WorkPage& wp : s.mem) n += wp.pts.size();
            return n;
        }

        void push_heap_item(SubWork* s) {
            heap.push({col.key(s->mbb), work_pages(*s), seq++, s});
        }

        WorkPage new_work_page() {
            if (st.pool_.pinned() >= st.pool_.capacity()) relieve_pressure();
            uint64_t id = st.pool_.allocate_page(st.sfile());
            st.pool_.pin(st.sfile(), id);
            WorkPage wp;
            wp.page_id = id;
            wp.pts.reserve(st.cl());
            return wp;
        }

        void flush_work(SubWork& s, WorkPage& wp) {
            std::vector<uint8_t> buf;
            encode_data_page(st.codec_, wp.pts, buf);
            st.pool_.write_page(st.sfile(), wp.page_id, buf);
            st.pool_.flush_evict(st.sfile(), wp.page_id);
            s.disk.push_back(wp.page_id);
        }

        void drop_work(WorkPage& wp) { st.pool_.discard(st.sfile(), wp.page_id); }

        void deactivate(SubWork& s) {
            size_t keep = s.mem.size();
            for (size_t i = s.mem.size(); i-- > 0;) {
                if (s.mem[i].pts.size() < st.cl()) {
                    keep = i;
                    break;
                }
            }
            bool have_keep = keep < s.mem.size();
            WorkPage retained;
            for (size_t i = 0; i < s.mem.size(); ++i) {
                if (i == keep) retained = std::move(s.mem[i]);
                else flush_work(s, s.mem[i]);
            }
            s.mem.clear();
            if (have_keep) s.mem.push_back(std::move(retained));
            s.active = false;
            ++evictions;
        }

        // Split a qualified buffer-hogging subspace: a minor tree built from
        // its in-memory pages replaces it in the heap with its children.
        void split(SubWork& s) {
            std::vector<Point> pts;
            for (WorkPage& wp : s.mem) {
                pts.insert(pts.end(), wp.pts.begin(), wp.pts.end());
                drop_work(wp);
            }
            s.mem.clear();
            s.active = false;
            uint64_t pages = st.codec_.pages_for_points(pts.size());
            uint64_t beta = pages / st.cb();
            uint64_t sample = beta * st.cb();
            size_t seed_pts = std::min(pts.size(), static_cast<size_t>(sample * st.cl()));

            SplitBuild sb = build_splittree(std::span<Point>(pts.data(), seed_pts), sample,
                                            st.cl(), beta, st.cb(), st.d());
            auto level = std::make_unique<LevelWork>();
            level->tree = std::move(sb.tree);
            for (const SubspaceSeed& seed : sb.seeds) {
                auto child = std::make_unique<SubWork>();
                child->id = seed.id;
                child->mbb = seed.mbb;
                child->points = seed.end - seed.begin;
                for (size_t b = seed.begin; b < seed.end; b += st.cl()) {
                    WorkPage wp = new_work_page();
                    size_t e = std::min(seed.end, b + st.cl());
                    wp.pts.assign(pts.begin() + b, pts.begin() + e);
                    child->mem.push_back(std::move(wp));
                }
                child->seed_pages = child->mem.size();
                all_subs.push_back(child.get());
                push_heap_item(child.get());
                level->subs.push_back(std::move(child));
            }
            s.split = std::move(level);
            // pages beyond the sample are distributed to the children
            for (size_t i = seed_pts; i < pts.size(); ++i)
                insert_point(find_target(*s.split, pts[i]), pts[i]);
        }

        // Descend through split subspaces, growing each passed level's
        // aggregate extent on the way.
        SubWork& find_target(LevelWork& level, const Point& p) {
            SubWork& s = *level.subs[level.tree.locate(p)];
            if (s.split) {
                s.mbb.expand(p);
                ++s.points;
                return find_target(*s.split, p);
            }
            return s;
        }

        void relieve_pressure() {
            while (st.pool_.pinned() >= st.pool_.capacity()) {
                if (heap.empty()) {
                    if (!force_flush_retained()) throw error("ambi: buffer exhausted");
                    continue;
                }
                HeapItem it = heap.top();
                heap.pop();
                SubWork* s = it.sub;
                if (!s->active || s->split) continue;  // settled via another path
                double fresh_key = col.key(s->mbb);
                uint64_t fresh_pages = work_pages(*s);
                if (fresh_key != it.key || fresh_pages != it.pages) {
                    heap.push({fresh_key, fresh_pages, seq++, s});  // lazy re-key
                    continue;
                }
                if (col.qualifies(s->mbb) && st.codec_.pages_for_points(mem_points(*s)) >= st.cb()) {
                    split(*s);
                } else {
                    deactivate(*s);
                }
            }
        }

        bool force_flush_retained() {
            // every frame is a retained partial of some deactivated subspace
            SubWork* best = nullptr;
            for (SubWork* s : all_subs)
                if (!s->active && !s->split && !s->mem.empty())
                    if (!best || s->mem.back().pts.size() > best->mem.back().pts.size()) best = s;
            if (!best) return false;
            WorkPage& wp = best->mem.back();
            if (wp.pts.empty()) drop_work(wp);
            else flush_work(*best, wp);
            best->mem.clear();
            return true;
        }

        void insert_point(SubWork& s, const Point& p) {
            s.mbb.expand(p);
            ++s.points;
            if (s.active) {
                bool need = s.mem.size() == s.seed_pages || s.mem.back().pts.size() >= st.cl();
                if (!need) {
                    s.mem.back().pts.push_back(p);
                    return;
                }
                WorkPage wp = new_work_page();  // may deactivate or split s
                if (s.split) {
                    drop_work(wp);
                    // the point belongs to a child now; its aggregate was
                    // already bumped above
                    SubWork& t = find_target(*s.split, p);
                    insert_point(t, p);
                    return;
                }
                if (s.active) {
                    s.mem.push_back(std::move(wp));
                    s.mem.back().pts.push_back(p);
                    return;
                }
                // s was deactivated while making room
                if (!s.mem.empty()) drop_work(wp);
                else s.mem.push_back(std::move(wp));
            }
            if (s.mem.empty()) s.mem.push_back(new_work_page());
            WorkPage& wp = s.mem.back();
            wp.pts.push_back(p);
            if (wp.pts.size() >= st.cl()) {
                flush_work(s, wp);
                s.mem.clear();
            }
        }

        std::vector<uint64_t> sample(std::span<const uint64_t> pages, uint64_t want) {
            std::vector<uint64_t> idx(pages.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            for (uint64_t i = 0; i < want; ++i) {
                std::uniform_int_distribution<uint64_t> pick(i, idx.size() - 1);
                std::swap(idx[i], idx[pick(st.rng_)]);
            }
            std::vector<uint64_t> out(want);
            for (uint64_t i = 0; i < want; ++i) out[i] = pages[idx[i]];
            std::sort(out.begin(), out.end());
            return out;
        }

        // Shared by the first query (over the data file) and deferred dense
        // refinement (over spilled pages). Sampled points seed the tree; the
        // rest stream through it under heap-guided deactivation.
        ANode partition(PageFile& src, std::span<const uint64_t> pages,
                        std::span<const Point> extra, RefineLog& log) {
            uint64_t alpha = st.pool_.capacity() / st.cb();
            uint64_t sample_count = alpha * st.cb();
            std::vector<uint64_t> sampled = sample(pages, sample_count);
            std::vector<Point> pts;
            for (uint64_t pid : sampled) {
                st.pool_.read_streaming(src, pid, iobuf);
                decode_data_page(st.codec_, iobuf, pts);
            }
            for (const Point& p : pts) col.offer(p);
            // spilled pages may be partial; seed the tree from whole pages
            // and route the remainder like any other arrival
            uint64_t pages_eff = pts.size() / st.cl();
            uint64_t alpha_eff = std::min(alpha, pages_eff / st.cb());
            if (alpha_eff == 0) throw error("ambi: sample too sparse to partition");
            uint64_t seed_pages = alpha_eff * st.cb();
            size_t seed_pts = static_cast<size_t>(seed_pages) * st.cl();

            SplitBuild sb = build_splittree(std::span<Point>(pts.data(), seed_pts), seed_pages,
                                            st.cl(), alpha_eff, st.cb(), st.d());
            auto level = std::make_unique<LevelWork>();
            level->tree = std::move(sb.tree);
            for (const SubspaceSeed& seed : sb.seeds) {
                auto s = std::make_unique<SubWork>();
                s->id = seed.id;
                s->mbb = seed.mbb;
                s->points = seed.end - seed.begin;
                for (size_t b = seed.begin; b < seed.end; b += st.cl()) {
                    WorkPage wp = new_work_page();
                    size_t e = std::min(seed_pts, b + st.cl());
                    wp.pts.assign(pts.begin() + b, pts.begin() + e);
                    s->mem.push_back(std::move(wp));
                }
                s->seed_pages = s->mem.size();
                all_subs.push_back(s.get());
                push_heap_item(s.get());
                level->subs.push_back(std::move(s));
            }
            std::vector<Point> leftover(pts.begin() + seed_pts, pts.end());
            pts.clear();
            pts.shrink_to_fit();
            for (const Point& p : leftover) insert_point(find_target(*level, p), p);

            std::vector<Point> page_pts;
            size_t si = 0;
            for (uint64_t pid : pages) {
                if (si < sampled.size() && sampled[si] == pid) {
                    ++si;
                    continue;
                }
                page_pts.clear();
                st.pool_.read_streaming(src, pid, iobuf);
                decode_data_page(st.codec_, iobuf, page_pts);
                for (const Point& p : page_pts) {
                    col.offer(p);
                    insert_point(find_target(*level, p), p);
                }
            }
            for (const Point& p : extra) {
                col.offer(p);
                insert_point(find_target(*level, p), p);
            }
            log.heap_evictions += evictions;
            return st.finalize_level(*level, log);
        }
    };

    // Turn a finished distribution level into overlay entries: refine the
    // still-active subspaces (they cost no extra I/O), defer the rest, and
    // plan page sharing across refined and deferred nodes alike.
    ANode finalize_level(LevelWork& level, RefineLog& log) {
        for (auto& sp : level.subs) {
            SubWork& s = *sp;
            if (s.split) continue;
            if (s.active) {
                std::vector<Point> pts;
                for (WorkPage& wp : s.mem) {
                    pts.insert(pts.end(), wp.pts.begin(), wp.pts.end());
                    pool_.discard(sfile(), wp.page_id);
                }
                s.mem.clear();
                if (!pts.empty()) {
                    EntrySink sink{pool_, sfile(), codec_};
                    auto r = generate_entries(pts, sink, d());
                    s.entries = std::move(r.entries);
                    ++log.subspaces_refined;
                }
                s.refined = true;
            } else if (!s.mem.empty()) {
                WorkPage& wp = s.mem.back();
                if (wp.pts.empty()) pool_.discard(sfile(), wp.page_id);
                else flush_work_final(s, wp);
                s.mem.clear();
            }
        }

        // merge plan: refined nodes by entry count, deferred sparse ones by
        // their future leaf entry count, dense ones excluded
        std::vector<std::optional<size_t>> counts(level.subs.size());
        for (auto& sp : level.subs) {
            SubWork& s = *sp;
            if (s.split) counts[s.id] = s.split->subs.size();
            else if (s.refined) counts[s.id] = s.entries.size();
            else if (s.disk.size() <= pool_.capacity())
                counts[s.id] = codec_.pages_for_points(s.points);
        }
        std::vector<fmbi::MergeGroup> groups = fmbi::merge_plan(level.tree, counts, cb());

        std::vector<int32_t> group_of(level.subs.size(), -1);
        std::vector<uint16_t> slot_of(level.subs.size(), 0);
        for (const auto& g : groups) {
            if (!g.alive) continue;
            int32_t gid = new_group(g.members.size());
            for (size_t i = 0; i < g.members.size(); ++i) {
                group_of[g.members[i]] = gid;
                slot_of[g.members[i]] = static_cast<uint16_t>(i);
            }
        }

        ANode out;
        for (auto& sp : level.subs) {
            SubWork& s = *sp;
            AEntry e;
            e.mbb = s.mbb;
            if (s.split) {
                e.kind = AEntry::Kind::kChild;
                e.child = std::make_unique<ANode>(finalize_level(*s.split, log));
                e.count = e.child->entries.size();
            } else if (s.refined) {
                materialize_slot(group_of[s.id], slot_of[s.id], s.entries);
                e.kind = AEntry::Kind::kChild;
                auto node = std::make_unique<ANode>();
                node->entries = to_overlay(s.entries);
                node->group = group_of[s.id];
                node->slot = slot_of[s.id];
                e.child = std::move(node);
                e.count = s.entries.size();
            } else {
                e.kind = AEntry::Kind::kUnref;
                auto u = std::make_unique<Unref>();
                std::sort(s.disk.begin(), s.disk.end());
                u->pages = std::move(s.disk);
                u->points = s.points;
                u->group = group_of[s.id];
                u->slot = slot_of[s.id];
                e.count = codec_.pages_for_points(s.points);
                e.unref = std::move(u);
            }
            out.entries.push_back(std::move(e));
        }
        return out;
    }

    void flush_work_final(SubWork& s, WorkPage& wp) {
        std::vector<uint8_t> buf;
        encode_data_page(codec_, wp.pts, buf);
        pool_.write_page(sfile(), wp.page_id, buf);
        pool_.flush_evict(sfile(), wp.page_id);
        s.disk.push_back(wp.page_id);
    }

    std::vector<AEntry> to_overlay(const std::vector<NodeEntry>& entries) {
        std::vector<AEntry> out;
        for (const NodeEntry& n : entries) {
            AEntry e;
            e.mbb = n.mbb;
            e.count = n.count;
            e.page = n.child_page;
            e.slot = n.child_slot;
            e.kind = n.kind == EntryKind::kLeaf ? AEntry::Kind::kLeaf : AEntry::Kind::kDisk;
            out.push_back(std::move(e));
        }
        return out;
    }

    // ---- query processing over the partial index ---------------------------

    template <typename Collector>
    QueryResult run_query(Collector& col) {
        IoStats before = pool_.stats();
        RefineLog log;
        log.query_id = next_query_id_++;
        QueryResult res;
        if (!initialized_) {
            first_query(col, log);
            initialized_ = true;
            res.nodes_visited = 1;
        } else {
            traverse(root_, col, log, res);
            repair_pass(log);
        }
        res.points = col.take();
        res.pages_read = (pool_.stats() - before).page_reads;
        log_.push_back(log);
        return res;
    }

    template <typename Collector>
    void first_query(Collector& col, RefineLog& log) {
        uint64_t total = data_.page_count();
        uint64_t alpha = pool_.capacity() / cb();
        std::vector<uint64_t> pages(total);
        for (size_t i = 0; i < pages.size(); ++i) pages[i] = i;
        if (total < alpha * cb()) {
            // buffer-sized dataset: refine everything in one pass
            std::vector<Point> pts;
            std::vector<uint8_t> buf;
            for (uint64_t pid : pages) {
                pool_.read_streaming(data_, pid, buf);
                decode_data_page(codec_, buf, pts);
            }
            for (const Point& p : pts) col.offer(p);
            root_ = ANode{};
            if (!pts.empty()) {
                EntrySink sink{pool_, sfile(), codec_};
                auto r = generate_entries(pts, sink, d());
                int32_t g = new_group(1);
                materialize_slot(g, 0, r.entries);
                root_.entries = to_overlay(r.entries);
                root_.group = g;
                log.subspaces_refined = 1;
            }
            return;
        }
        Distribution<Collector> dist(*this, col);
        root_ = dist.partition(data_, pages, {}, log);
    }

    template <typename Collector>
    void traverse(ANode& node, Collector& col, RefineLog& log, QueryResult& res) {
        ++res.nodes_visited;
        for (AEntry& e : node.entries) {
            if (!col.qualifies(e.mbb)) continue;
            switch (e.kind) {
                case AEntry::Kind::kLeaf:
                    scan_leaf(e.page, col);
                    break;
                case AEntry::Kind::kChild:
                    traverse(*e.child, col, log, res);
                    break;
                case AEntry::Kind::kDisk:
                    traverse_disk(e.page, e.slot, col, res);
                    break;
                case AEntry::Kind::kUnref:
                    refine_unref(e, col, log, res);
                    break;
            }
        }
        for (AEntry& e : node.entries) {
            if (e.kind == AEntry::Kind::kLeaf && col.qualifies(e.mbb) && leaf_dirty(e))
                mark_repack(&node);
        }
    }

    template <typename Collector>
    void traverse_disk(uint64_t page, uint16_t slot, Collector& col, QueryResult& res) {
        ++res.nodes_visited;
        std::vector<NodeEntry> entries = decode_node(codec_, pool_.read_page(sfile(), page), slot);
        bool dirty = false;
        for (const NodeEntry& n : entries) {
            if (!col.qualifies(n.mbb)) continue;
            if (n.kind == EntryKind::kLeaf) {
                scan_leaf(n.child_page, col);
                if (chains_.count(n.child_page) || n.count == 0) dirty = true;
            } else {
                traverse_disk(n.child_page, n.child_slot, col, res);
            }
        }
        if (dirty) mark_repack_disk(page, slot);
    }

    template <typename Collector>
    void scan_leaf(uint64_t page, Collector& col) {
        for (const Point& p : read_data_page(page)) col.offer(p);
        auto it = chains_.find(page);
        if (it == chains_.end()) return;
        for (uint64_t cp : it->second.pages)
            for (const Point& p : read_data_page(cp)) col.offer(p);
        for (const Point& p : it->second.tail) col.offer(p);
    }

    bool leaf_dirty(const AEntry& e) const { return chains_.count(e.page) || e.count == 0; }

    void mark_repack(ANode* n) {
        if (repack_seen_.insert(n).second) repack_nodes_.push_back(n);
    }
    void mark_repack_disk(uint64_t page, uint16_t slot) {
        uint64_t key = page * 65536 + slot;
        if (repack_disk_seen_.insert(key).second) repack_disk_.push_back(key);
    }

    // ---- deferred refinement ------------------------------------------------

    template <typename Collector>
    void refine_unref(AEntry& e, Collector& col, RefineLog& log, QueryResult& res) {
        Unref& u = *e.unref;
        log.pages_reloaded += u.pages.size();
        ++log.subspaces_refined;
        if (u.pages.size() <= pool_.capacity()) {
            // sparse: reload, refine and answer in one pass
            std::vector<Point> pts;
            std::vector<uint8_t> buf;
            for (uint64_t pid : u.pages) {
                pool_.read_streaming(sfile(), pid, buf);
                decode_data_page(codec_, buf, pts);
            }
            pts.insert(pts.end(), u.pending.begin(), u.pending.end());
            for (const Point& p : pts) col.offer(p);
            int32_t g = u.group;
            uint16_t slot = u.slot;
            e.unref.reset();
            e.kind = AEntry::Kind::kChild;
            e.child = std::make_unique<ANode>();
            if (pts.empty()) {
                e.count = 0;
                return;
            }
            EntrySink sink{pool_, sfile(), codec_};
            auto r = generate_entries(pts, sink, d());
            materialize_slot(g, slot, r.entries);
            e.child->entries = to_overlay(r.entries);
            e.child->group = g;
            e.child->slot = slot;
            e.count = r.entries.size();
            e.mbb = mbi::detail::union_mbb(r.entries);
            return;
        }
        // dense: one adaptive partitioning pass guided by this query
        std::vector<uint64_t> spill = std::move(u.pages);
        std::vector<Point> pending = std::move(u.pending);
        e.unref.reset();
        Distribution<Collector> dist(*this, col);
        ANode child = dist.partition(sfile(), spill, pending, log);
        e.kind = AEntry::Kind::kChild;
        e.child = std::make_unique<ANode>(std::move(child));
        e.count = e.child->entries.size();
        ++res.nodes_visited;
    }

    // ---- lazy repair of chained / emptied leaves ----------------------------

    void repair_pass(RefineLog& log) {
        for (ANode* n : repack_nodes_) repack_overlay(*n, log);
        repack_nodes_.clear();
        repack_seen_.clear();
        for (uint64_t key : repack_disk_) repack_disk_node(key / 65536, key % 65536, log);
        repack_disk_.clear();
        repack_disk_seen_.clear();
    }

    void collect_leaf_points(uint64_t page, std::vector<Point>& pts) {
        auto page_pts = read_data_page(page);
        pts.insert(pts.end(), page_pts.begin(), page_pts.end());
        auto it = chains_.find(page);
        if (it == chains_.end()) return;
        for (uint64_t cp : it->second.pages) {
            auto more = read_data_page(cp);
            pts.insert(pts.end(), more.begin(), more.end());
        }
        pts.insert(pts.end(), it->second.tail.begin(), it->second.tail.end());
        chains_.erase(it);
    }

    void repack_overlay(ANode& node, RefineLog& log) {
        std::vector<Point> pts;
        std::vector<AEntry> kept;
        for (AEntry& e : node.entries) {
            if (e.kind == AEntry::Kind::kLeaf) collect_leaf_points(e.page, pts);
            else kept.push_back(std::move(e));
        }
        node.entries = std::move(kept);
        if (!pts.empty()) {
            EntrySink sink{pool_, sfile(), codec_};
            auto r = generate_entries(pts, sink, d());
            std::vector<AEntry> fresh = to_overlay(r.entries);
            if (node.entries.size() + fresh.size() > cb()) {
                NodeRef ref = sink.emit_node(r.entries);
                AEntry e;
                e.mbb = mbi::detail::union_mbb(r.entries);
                e.kind = AEntry::Kind::kDisk;
                e.page = ref.page;
                e.slot = ref.slot;
                e.count = r.entries.size();
                node.entries.push_back(std::move(e));
            } else {
                for (auto& e : fresh) node.entries.push_back(std::move(e));
            }
        }
        ++log.subspaces_refined;
        if (node.group >= 0) materialize_slot(node.group, node.slot, overlay_to_entries(node));
    }

    void repack_disk_node(uint64_t page, uint16_t slot, RefineLog& log) {
        std::vector<NodeEntry> entries = decode_node(codec_, pool_.read_page(sfile(), page), slot);
        std::vector<Point> pts;
        std::vector<NodeEntry> kept;
        for (NodeEntry& n : entries) {
            if (n.kind == EntryKind::kLeaf) collect_leaf_points(n.child_page, pts);
            else kept.push_back(n);
        }
        if (!pts.empty()) {
            EntrySink sink{pool_, sfile(), codec_};
            auto r = generate_entries(pts, sink, d());
            for (auto& n : r.entries) kept.push_back(n);
        }
        std::vector<std::vector<NodeEntry>> one{kept};
        std::vector<uint8_t> buf;
        encode_node_page(codec_, one, buf);
        pool_.write_page(sfile(), page, buf);
        pool_.flush_page(sfile(), page);
        ++log.subspaces_refined;
    }

    std::vector<NodeEntry> overlay_to_entries(const ANode& node) {
        std::vector<NodeEntry> out;
        for (const AEntry& e : node.entries) {
            NodeEntry n;
            n.mbb = e.mbb;
            n.count = e.count;
            n.child_page = e.page;
            n.child_slot = e.slot;
            n.kind = e.kind == AEntry::Kind::kLeaf ? EntryKind::kLeaf : EntryKind::kBranch;
            out.push_back(n);
        }
        return out;
    }

    // ---- updates -------------------------------------------------------------

    void ensure_initialized() {
        if (initialized_) return;
        // an update before any query triggers the initial scan unfiltered
        WindowCollector col(universe_box(), codec_.d);
        run_query(col);
    }

    Box universe_box() const {
        Box b(codec_.d);
        for (uint32_t i = 0; i < codec_.d; ++i) {
            b.lo[i] = -std::numeric_limits<double>::infinity();
            b.hi[i] = std::numeric_limits<double>::infinity();
        }
        return b;
    }

    // least-enlargement choice; ties to the smaller box, then first
    static size_t choose_entry(const std::vector<AEntry>& entries, const Point& p, uint32_t dim) {
        size_t best = 0;
        double best_grow = std::numeric_limits<double>::infinity();
        double best_vol = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < entries.size(); ++i) {
            const Box& b = entries[i].mbb;
            double vol = 1, nvol = 1;
            for (uint32_t j = 0; j < dim; ++j) {
                double lo = std::min(b.lo[j], p.coords[j]);
                double hi = std::max(b.hi[j], p.coords[j]);
                vol *= b.extent(j);
                nvol *= hi - lo;
            }
            double grow = nvol - vol;
            if (grow < best_grow || (grow == best_grow && vol < best_vol)) {
                best_grow = grow;
                best_vol = vol;
                best = i;
            }
        }
        return best;
    }

    void append_to_leaf(uint64_t page, uint64_t& count, const Point& p) {
        if (count < cl()) {
            auto pts = read_data_page(page);
            pts.push_back(p);
            rewrite_data_page(page, pts);
            ++count;
            return;
        }
        Chain& c = chains_[page];
        c.tail.push_back(p);
        if (c.tail.size() >= cl()) {
            c.pages.push_back(new_data_page(c.tail));
            c.tail.clear();
        }
    }

    void insert_into(ANode& node, const Point& p) {
        size_t i = choose_entry(node.entries, p, d());
        AEntry& e = node.entries[i];
        e.mbb.expand(p);
        switch (e.kind) {
            case AEntry::Kind::kLeaf:
                append_to_leaf(e.page, e.count, p);
                break;
            case AEntry::Kind::kChild:
                insert_into(*e.child, p);
                break;
            case AEntry::Kind::kDisk:
                insert_into_disk(e.page, e.slot, p);
                break;
            case AEntry::Kind::kUnref: {
                Unref& u = *e.unref;
                u.pending.push_back(p);
                ++u.points;
                e.count = codec_.pages_for_points(u.points);
                if (u.pending.size() >= cl()) {
                    u.pages.push_back(new_data_page(u.pending));
                    u.pending.clear();
                }
                break;
            }
        }
    }

    std::vector<std::vector<NodeEntry>> read_all_slots(uint64_t page) {
        uint16_t n_nodes = node_page_node_count(pool_.read_page(sfile(), page));
        std::vector<std::vector<NodeEntry>> slots;
        for (uint16_t s = 0; s < n_nodes; ++s)
            slots.push_back(decode_node(codec_, pool_.read_page(sfile(), page), s));
        return slots;
    }

    void write_all_slots(uint64_t page, const std::vector<std::vector<NodeEntry>>& slots) {
        std::vector<uint8_t> buf;
        encode_node_page(codec_, slots, buf);
        pool_.write_page(sfile(), page, buf);
    }

    void insert_into_disk(uint64_t page, uint16_t slot, const Point& p) {
        auto slots = read_all_slots(page);
        std::vector<NodeEntry>& entries = slots[slot];
        std::vector<AEntry> view(entries.size());
        for (size_t i = 0; i < entries.size(); ++i) view[i].mbb = entries[i].mbb;
        size_t best = choose_entry(view, p, d());
        NodeEntry& e = entries[best];
        e.mbb.expand(p);
        bool leaf = e.kind == EntryKind::kLeaf;
        uint64_t child_page = e.child_page;
        uint16_t child_slot = e.child_slot;
        if (leaf) {
            uint64_t count = e.count;
            append_to_leaf(child_page, count, p);
            e.count = count;
        }
        write_all_slots(page, slots);
        if (!leaf) insert_into_disk(child_page, child_slot, p);
    }

    bool point_matches(const Point& a, const Point& b) const {
        for (uint32_t i = 0; i < d(); ++i)
            if (a.coords[i] != b.coords[i]) return false;
        return b.id == kNoId || a.id == b.id;
    }

    bool erase_from_page(uint64_t page, const Point& p) {
        auto pts = read_data_page(page);
        for (size_t i = 0; i < pts.size(); ++i) {
            if (point_matches(pts[i], p)) {
                pts.erase(pts.begin() + i);
                rewrite_data_page(page, pts);
                return true;
            }
        }
        return false;
    }

    bool erase_from_chain(uint64_t page, const Point& p) {
        auto it = chains_.find(page);
        if (it == chains_.end()) return false;
        auto& tail = it->second.tail;
        for (size_t i = 0; i < tail.size(); ++i) {
            if (point_matches(tail[i], p)) {
                tail.erase(tail.begin() + i);
                return true;
            }
        }
        for (uint64_t cp : it->second.pages)
            if (erase_from_page(cp, p)) return true;
        return false;
    }

    bool erase_from(ANode& node, const Point& p) {
        for (AEntry& e : node.entries) {
            if (!e.mbb.contains(p)) continue;
            switch (e.kind) {
                case AEntry::Kind::kLeaf:
                    if (erase_from_page(e.page, p)) {
                        --e.count;
                        return true;
                    }
                    if (erase_from_chain(e.page, p)) return true;
                    break;
                case AEntry::Kind::kChild:
                    if (erase_from(*e.child, p)) return true;
                    break;
                case AEntry::Kind::kDisk:
                    if (erase_from_disk(e.page, e.slot, p)) return true;
                    break;
                case AEntry::Kind::kUnref: {
                    Unref& u = *e.unref;
                    for (size_t i = 0; i < u.pending.size(); ++i) {
                        if (point_matches(u.pending[i], p)) {
                            u.pending.erase(u.pending.begin() + i);
                            --u.points;
                            return true;
                        }
                    }
                    for (uint64_t pid : u.pages) {
                        if (erase_from_page(pid, p)) {
                            --u.points;
                            return true;
                        }
                    }
                    break;
                }
            }
        }
        return false;
    }

    bool erase_from_disk(uint64_t page, uint16_t slot, const Point& p) {
        auto slots = read_all_slots(page);
        for (NodeEntry& e : slots[slot]) {
            if (!e.mbb.contains(p)) continue;
            if (e.kind == EntryKind::kLeaf) {
                if (erase_from_page(e.child_page, p)) {
                    --e.count;
                    write_all_slots(page, slots);
                    return true;
                }
                if (erase_from_chain(e.child_page, p)) return true;
            } else if (erase_from_disk(e.child_page, e.child_slot, p)) {
                return true;
            }
        }
        return false;
    }

    // ---- stats -----------------------------------------------------------

    bool region_clean_rec(const ANode& node, const Box& rect) {
        for (const AEntry& e : node.entries) {
            if (!intersects(e.mbb, rect)) continue;
            switch (e.kind) {
                case AEntry::Kind::kLeaf:
                    if (leaf_dirty(e)) return false;
                    break;
                case AEntry::Kind::kChild:
                    if (!region_clean_rec(*e.child, rect)) return false;
                    break;
                case AEntry::Kind::kDisk:
                    if (!region_clean_disk(e.page, e.slot, rect)) return false;
                    break;
                case AEntry::Kind::kUnref:
                    break;  // deferred subspaces have no leaves yet
            }
        }
        return true;
    }

    bool region_clean_disk(uint64_t page, uint16_t slot, const Box& rect) {
        std::vector<NodeEntry> entries = decode_node(codec_, pool_.read_page(sfile(), page), slot);
        for (const NodeEntry& e : entries) {
            if (!intersects(e.mbb, rect)) continue;
            if (e.kind == EntryKind::kLeaf) {
                if (chains_.count(e.child_page) || e.count == 0) return false;
            } else if (!region_clean_disk(e.child_page, e.child_slot, rect)) {
                return false;
            }
        }
        return true;
    }

    bool has_unref(const ANode& node) const {
        for (const AEntry& e : node.entries) {
            if (e.kind == AEntry::Kind::kUnref) return true;
            if (e.kind == AEntry::Kind::kChild && has_unref(*e.child)) return true;
        }
        return false;
    }

    void stats_rec(const ANode& node, AmbiStats& st) {
        for (const AEntry& e : node.entries) {
            switch (e.kind) {
                case AEntry::Kind::kLeaf:
                    ++st.leaf_count;
                    st.points += e.count;
                    st.total_perimeter += e.mbb.perimeter();
                    st.total_area += e.mbb.volume();
                    break;
                case AEntry::Kind::kChild:
                    stats_rec(*e.child, st);
                    break;
                case AEntry::Kind::kDisk:
                    stats_disk(e.page, e.slot, st);
                    break;
                case AEntry::Kind::kUnref:
                    ++st.unrefined_subspaces;
                    st.points += e.unref->points;
                    break;
            }
        }
    }

    void stats_disk(uint64_t page, uint16_t slot, AmbiStats& st) {
        std::vector<NodeEntry> entries = decode_node(codec_, pool_.read_page(sfile(), page), slot);
        for (const NodeEntry& e : entries) {
            if (e.kind == EntryKind::kLeaf) {
                ++st.leaf_count;
                st.points += e.count;
                st.total_perimeter += e.mbb.perimeter();
                st.total_area += e.mbb.volume();
            } else {
                stats_disk(e.child_page, e.child_slot, st);
            }
        }
    }

    BufferPool& pool_;
    PageFile& data_;
    AmbiConfig cfg_;
    PageCodec codec_;
    TempFile scratch_;
    std::mt19937_64 rng_;
    IoStats io_base_;
    ANode root_;
    std::vector<NodeGroup> groups_;
    std::map<uint64_t, Chain> chains_;
    std::vector<RefineLog> log_;
    std::vector<ANode*> repack_nodes_;
    std::set<ANode*> repack_seen_;
    std::vector<uint64_t> repack_disk_;
    std::set<uint64_t> repack_disk_seen_;
    bool initialized_ = false;
    uint64_t n_ = 0;
    uint64_t next_query_id_ = 0;
};

}  // namespace ambi
}  // namespace mbi
