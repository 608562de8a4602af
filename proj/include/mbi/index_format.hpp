#pragma once

#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "mbi/core.hpp"
#include "mbi/storage.hpp"

namespace mbi {

enum class EntryKind : uint8_t {
    kLeaf = 0,    // child_page is a data page holding `count` points
    kBranch = 1,  // (child_page, child_slot) is an index node with `count` entries
};

struct NodeEntry {
    Box mbb;
    uint64_t child_page = 0;
    uint64_t count = 0;  // points under a leaf entry, direct entries under a branch
    uint16_t child_slot = 0;
    EntryKind kind = EntryKind::kLeaf;
};

struct NodeRef {
    uint64_t page = 0;
    uint16_t slot = 0;
};

/// Node pages hold one or more nodes (several when branches were merged onto
/// a shared page). Entries are stored grouped by owner slot, so a slot's
/// entries are one contiguous run.
///
/// layout: u16 total_entries | u16 node_count | 12B pad | entries
/// entry:  lo[d] f64 | hi[d] f64 | u32 child_page | u32 count | u16 child_slot
///         | u8 kind | u8 owner_slot | 4B pad
inline void encode_node_page(const PageCodec& c,
                             std::span<const std::vector<NodeEntry>> nodes,
                             std::vector<uint8_t>& buf) {
    size_t total = 0;
    for (const auto& n : nodes) total += n.size();
    if (total > c.physical_branch_capacity()) throw error("node page overflow");
    if (nodes.size() > 255) throw error("too many co-resident nodes");
    buf.assign(c.page_size, 0);
    detail::put(buf, 0, static_cast<uint16_t>(total));
    detail::put(buf, 2, static_cast<uint16_t>(nodes.size()));
    size_t off = kNodePageHeaderBytes;
    for (size_t slot = 0; slot < nodes.size(); ++slot) {
        for (const NodeEntry& e : nodes[slot]) {
            std::memcpy(buf.data() + off, e.mbb.lo.data(), 8 * c.d);
            off += 8 * c.d;
            std::memcpy(buf.data() + off, e.mbb.hi.data(), 8 * c.d);
            off += 8 * c.d;
            detail::put(buf, off, static_cast<uint32_t>(e.child_page));
            detail::put(buf, off + 4, static_cast<uint32_t>(e.count));
            detail::put(buf, off + 8, e.child_slot);
            detail::put(buf, off + 10, static_cast<uint8_t>(e.kind));
            detail::put(buf, off + 11, static_cast<uint8_t>(slot));
            off += 16;
        }
    }
}

inline uint16_t node_page_node_count(std::span<const uint8_t> buf) {
    return detail::get<uint16_t>(buf, 2);
}

inline std::vector<NodeEntry> decode_node(const PageCodec& c, std::span<const uint8_t> buf,
                                          uint16_t slot) {
    uint16_t total = detail::get<uint16_t>(buf, 0);
    std::vector<NodeEntry> out;
    size_t off = kNodePageHeaderBytes;
    for (uint16_t i = 0; i < total; ++i) {
        uint8_t owner = detail::get<uint8_t>(buf, off + 16 * c.d + 11);
        if (owner == slot) {
            NodeEntry e;
            e.mbb.d = c.d;
            std::memcpy(e.mbb.lo.data(), buf.data() + off, 8 * c.d);
            std::memcpy(e.mbb.hi.data(), buf.data() + off + 8 * c.d, 8 * c.d);
            size_t p = off + 16 * c.d;
            e.child_page = detail::get<uint32_t>(buf, p);
            e.count = detail::get<uint32_t>(buf, p + 4);
            e.child_slot = detail::get<uint16_t>(buf, p + 8);
            e.kind = static_cast<EntryKind>(detail::get<uint8_t>(buf, p + 10));
            out.push_back(e);
        }
        off += 16 * c.d + 16;
    }
    return out;
}

enum class IndexMethod : uint8_t { kFmbi = 0, kStr = 1, kHilbert = 2, kAmbi = 3 };

inline const char* method_name(IndexMethod m) {
    switch (m) {
        case IndexMethod::kFmbi: return "fmbi";
        case IndexMethod::kStr: return "str";
        case IndexMethod::kHilbert: return "hilbert";
        case IndexMethod::kAmbi: return "ambi";
    }
    return "?";
}

inline constexpr char kTrailerMagic[4] = {'M', 'B', 'I', 'T'};

/// Written as the last page of an index file, after the root node.
struct IndexTrailer {
    uint32_t root_page = 0;
    uint16_t root_slot = 0;
    uint16_t height = 0;
    uint64_t n_points = 0;
    uint32_t leaf_pages = 0;
    uint32_t node_pages = 0;
    uint32_t c_l = 0;
    uint32_t c_b = 0;
    uint32_t buffer_pages = 0;
    uint64_t build_reads = 0;
    uint64_t build_writes = 0;
    uint64_t seed = 0;
    IndexMethod method = IndexMethod::kFmbi;

    void encode(std::vector<uint8_t>& buf) const {
        std::memcpy(buf.data(), kTrailerMagic, 4);
        detail::put(buf, 4, kFormatVersion);
        detail::put(buf, 8, root_page);
        detail::put(buf, 12, root_slot);
        detail::put(buf, 14, height);
        detail::put(buf, 16, n_points);
        detail::put(buf, 24, leaf_pages);
        detail::put(buf, 28, node_pages);
        detail::put(buf, 32, c_l);
        detail::put(buf, 36, c_b);
        detail::put(buf, 40, buffer_pages);
        detail::put(buf, 44, build_reads);
        detail::put(buf, 52, build_writes);
        detail::put(buf, 60, seed);
        detail::put(buf, 68, static_cast<uint8_t>(method));
    }

    static IndexTrailer decode(std::span<const uint8_t> buf) {
        if (std::memcmp(buf.data(), kTrailerMagic, 4) != 0) throw error("missing index trailer");
        IndexTrailer t;
        t.root_page = detail::get<uint32_t>(buf, 8);
        t.root_slot = detail::get<uint16_t>(buf, 12);
        t.height = detail::get<uint16_t>(buf, 14);
        t.n_points = detail::get<uint64_t>(buf, 16);
        t.leaf_pages = detail::get<uint32_t>(buf, 24);
        t.node_pages = detail::get<uint32_t>(buf, 28);
        t.c_l = detail::get<uint32_t>(buf, 32);
        t.c_b = detail::get<uint32_t>(buf, 36);
        t.buffer_pages = detail::get<uint32_t>(buf, 40);
        t.build_reads = detail::get<uint64_t>(buf, 44);
        t.build_writes = detail::get<uint64_t>(buf, 52);
        t.seed = detail::get<uint64_t>(buf, 60);
        t.method = static_cast<IndexMethod>(detail::get<uint8_t>(buf, 68));
        return t;
    }
};

/// An index file opened for query processing. The trailer page is excluded
/// from the addressable page range.
struct IndexHandle {
    PageFile file;
    PageCodec codec;
    IndexTrailer meta;

    static IndexHandle open(const std::string& path) {
        IndexHandle h;
        h.file = PageFile::open(path);
        const FileHeader& hd = h.file.header();
        if (!(hd.flags & kFlagIndexFile)) throw error("not an index file: " + path);
        h.codec = PageCodec{hd.page_size, hd.d, (hd.flags & kFlagHasIds) != 0};
        std::vector<uint8_t> buf(hd.page_size);
        h.file.read(h.file.page_count() - 1, buf);
        h.meta = IndexTrailer::decode(buf);
        h.codec.cl_override = h.meta.c_l;
        h.codec.cb_override = h.meta.c_b;
        return h;
    }

    NodeRef root() const { return {h_root_page(), meta.root_slot}; }

  private:
    uint64_t h_root_page() const { return meta.root_page; }
};

inline void write_trailer(BufferPool& pool, PageFile& file, const PageCodec& codec,
                          const IndexTrailer& t) {
    std::vector<uint8_t> buf(codec.page_size, 0);
    t.encode(buf);
    pool.append_page(file, buf);
}

}  // namespace mbi
