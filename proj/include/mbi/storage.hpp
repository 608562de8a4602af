#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <list>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mbi/core.hpp"

namespace mbi {

inline constexpr uint32_t kDefaultPageSize = 4096;
inline constexpr char kFileMagic[4] = {'M', 'B', 'I', 'D'};
inline constexpr uint32_t kFormatVersion = 1;
inline constexpr uint32_t kFlagHasIds = 1u << 0;
inline constexpr uint32_t kFlagIndexFile = 1u << 1;

inline constexpr uint32_t kDataPageHeaderBytes = 4;   // u32 point count
inline constexpr uint32_t kNodePageHeaderBytes = 16;  // u16 entries, u16 nodes, pad

namespace detail {

template <typename T>
void put(std::vector<uint8_t>& buf, size_t off, T v) {
    std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T get(std::span<const uint8_t> buf, size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

}  // namespace detail

/// Per-page point layout plus the capacities derived from it. C_L and C_B can
/// be overridden downwards to mirror other encodings in experiments.
struct PageCodec {
    uint32_t page_size = kDefaultPageSize;
    uint32_t d = 2;
    bool has_ids = true;
    uint32_t cl_override = 0;
    uint32_t cb_override = 0;

    uint32_t point_bytes() const { return 8 * d + (has_ids ? 8 : 0); }
    uint32_t entry_bytes() const { return 16 * d + 16; }

    uint32_t physical_leaf_capacity() const {
        return (page_size - kDataPageHeaderBytes) / point_bytes();
    }
    uint32_t physical_branch_capacity() const {
        return (page_size - kNodePageHeaderBytes) / entry_bytes();
    }

    uint32_t leaf_capacity() const {
        uint32_t c = physical_leaf_capacity();
        if (cl_override) c = std::min(c, cl_override);
        return c;
    }
    uint32_t branch_capacity() const {
        uint32_t c = physical_branch_capacity();
        if (cb_override) c = std::min(c, cb_override);
        return c;
    }

    void validate() const {
        if (d < kMinDim || d > kMaxDim) throw error("codec: dimensionality out of range");
        if (leaf_capacity() < 1) throw error("codec: page too small for one point");
        if (branch_capacity() < 2) throw error("codec: page too small for two branch entries");
        if (cl_override > physical_leaf_capacity())
            throw error("codec: C_L override exceeds physical page capacity");
        if (cb_override > physical_branch_capacity())
            throw error("codec: C_B override exceeds physical page capacity");
    }

    uint64_t pages_for_points(uint64_t n) const {
        uint64_t cl = leaf_capacity();
        return (n + cl - 1) / cl;
    }
};

struct FileHeader {
    uint32_t version = kFormatVersion;
    uint32_t d = 2;
    uint64_t n = 0;
    uint32_t page_size = kDefaultPageSize;
    uint32_t flags = kFlagHasIds;

    static constexpr size_t kBytes = 28;

    void encode(std::vector<uint8_t>& buf) const {
        std::memcpy(buf.data(), kFileMagic, 4);
        detail::put(buf, 4, version);
        detail::put(buf, 8, d);
        detail::put(buf, 12, n);
        detail::put(buf, 20, page_size);
        detail::put(buf, 24, flags);
    }

    static FileHeader decode(std::span<const uint8_t> buf) {
        if (buf.size() < kBytes || std::memcmp(buf.data(), kFileMagic, 4) != 0)
            throw error("not a MBID file");
        FileHeader h;
        h.version = detail::get<uint32_t>(buf, 4);
        h.d = detail::get<uint32_t>(buf, 8);
        h.n = detail::get<uint64_t>(buf, 12);
        h.page_size = detail::get<uint32_t>(buf, 20);
        h.flags = detail::get<uint32_t>(buf, 24);
        if (h.version != kFormatVersion) throw error("unsupported format version");
        return h;
    }
};

inline void encode_data_page(const PageCodec& c, std::span<const Point> pts,
                             std::vector<uint8_t>& buf) {
    if (pts.size() > c.physical_leaf_capacity()) throw error("data page overflow");
    buf.assign(c.page_size, 0);
    detail::put(buf, 0, static_cast<uint32_t>(pts.size()));
    size_t off = kDataPageHeaderBytes;
    for (const Point& p : pts) {
        std::memcpy(buf.data() + off, p.coords.data(), 8 * c.d);
        off += 8 * c.d;
        if (c.has_ids) {
            detail::put(buf, off, p.id);
            off += 8;
        }
    }
}

inline uint32_t data_page_count(std::span<const uint8_t> buf) {
    return detail::get<uint32_t>(buf, 0);
}

inline void decode_data_page(const PageCodec& c, std::span<const uint8_t> buf,
                             std::vector<Point>& out) {
    uint32_t n = data_page_count(buf);
    size_t off = kDataPageHeaderBytes;
    for (uint32_t i = 0; i < n; ++i) {
        Point p;
        std::memcpy(p.coords.data(), buf.data() + off, 8 * c.d);
        off += 8 * c.d;
        if (c.has_ids) {
            p.id = detail::get<uint64_t>(buf, off);
            off += 8;
        }
        out.push_back(p);
    }
}

/// Fixed-size page storage. Page i lives at byte offset page_size*(i+1); the
/// first page-size bytes hold the 28-byte header, zero padded. The physical
/// read/write counters are independent of any buffering above and double as
/// the shadow oracle for the buffer pool counters in tests.
class PageFile {
  public:
    PageFile() = default;

    PageFile(const PageFile&) = delete;
    PageFile& operator=(const PageFile&) = delete;
    PageFile(PageFile&& o) noexcept { *this = std::move(o); }
    PageFile& operator=(PageFile&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
            path_ = std::move(o.path_);
            header_ = o.header_;
            page_count_ = o.page_count_;
            uid_ = o.uid_;
            phys_reads_ = o.phys_reads_;
            phys_writes_ = o.phys_writes_;
        }
        return *this;
    }

    ~PageFile() { close(); }

    static PageFile create(const std::string& path, const FileHeader& header) {
        PageFile f;
        f.fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
        if (f.fd_ < 0) throw error("cannot create " + path);
        f.path_ = path;
        f.header_ = header;
        f.page_count_ = 0;
        f.uid_ = next_uid();
        f.write_header();
        return f;
    }

    static PageFile open(const std::string& path, bool writable = false) {
        PageFile f;
        f.fd_ = ::open(path.c_str(), writable ? O_RDWR : O_RDONLY);
        if (f.fd_ < 0) throw error("cannot open " + path);
        f.path_ = path;
        std::vector<uint8_t> buf(FileHeader::kBytes);
        if (::pread(f.fd_, buf.data(), buf.size(), 0) != static_cast<ssize_t>(buf.size()))
            throw error("short header read: " + path);
        f.header_ = FileHeader::decode(buf);
        struct stat st{};
        if (::fstat(f.fd_, &st) != 0) throw error("stat failed: " + path);
        f.page_count_ = st.st_size / f.header_.page_size - 1;
        f.uid_ = next_uid();
        return f;
    }

    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

    const FileHeader& header() const { return header_; }
    const std::string& path() const { return path_; }
    uint64_t page_count() const { return page_count_; }
    uint32_t page_size() const { return header_.page_size; }
    uint64_t uid() const { return uid_; }

    uint64_t physical_reads() const { return phys_reads_; }
    uint64_t physical_writes() const { return phys_writes_; }

    void set_point_count(uint64_t n) {
        header_.n = n;
        write_header();
    }

    void read(uint64_t page_id, std::span<uint8_t> buf) {
        if (page_id >= page_count_) throw error("page read out of range");
        ssize_t got = ::pread(fd_, buf.data(), header_.page_size, offset(page_id));
        if (got != static_cast<ssize_t>(header_.page_size)) throw error("short page read");
        ++phys_reads_;
    }

    void write(uint64_t page_id, std::span<const uint8_t> buf) {
        if (page_id > page_count_) throw error("page write out of range");
        ssize_t put = ::pwrite(fd_, buf.data(), header_.page_size, offset(page_id));
        if (put != static_cast<ssize_t>(header_.page_size)) throw error("short page write");
        if (page_id == page_count_) ++page_count_;
        ++phys_writes_;
    }

    /// Reserve the next page id without touching disk. The slot is backed by
    /// the filesystem once the page is first written.
    uint64_t reserve_page() { return page_count_++; }

  private:
    void write_header() {
        std::vector<uint8_t> buf(header_.page_size, 0);
        header_.encode(buf);
        if (::pwrite(fd_, buf.data(), buf.size(), 0) != static_cast<ssize_t>(buf.size()))
            throw error("header write failed");
    }

    off_t offset(uint64_t page_id) const {
        return static_cast<off_t>(header_.page_size) * (page_id + 1);
    }

    static uint64_t next_uid() {
        static uint64_t counter = 0;
        return ++counter;
    }

    int fd_ = -1;
    std::string path_;
    FileHeader header_;
    uint64_t page_count_ = 0;
    uint64_t uid_ = 0;
    uint64_t phys_reads_ = 0;
    uint64_t phys_writes_ = 0;
};

struct IoStats {
    uint64_t page_reads = 0;
    uint64_t page_writes = 0;
    uint64_t total() const { return page_reads + page_writes; }

    IoStats operator-(const IoStats& o) const {
        return {page_reads - o.page_reads, page_writes - o.page_writes};
    }
};

/// LRU page cache with read/write counters. A pool is single-owner; it may
/// cache pages of several files at once (keys are file uid + page id).
///
/// Counter contract: page_reads counts buffer misses (cached or streaming),
/// page_writes counts dirty evictions, explicit flushes and append writes.
class BufferPool {
  public:
    explicit BufferPool(uint64_t capacity) : capacity_(capacity) {
        if (capacity_ < 1) throw error("buffer pool needs at least one page");
    }

    uint64_t capacity() const { return capacity_; }
    uint64_t resident() const { return index_.size(); }
    uint64_t pinned() const { return pinned_; }
    IoStats stats() const { return stats_; }

    /// Cached read. The returned span is valid until the next pool call.
    std::span<const uint8_t> read_page(PageFile& f, uint64_t page_id) {
        Frame& fr = fetch(f, page_id);
        return {fr.data.data(), fr.data.size()};
    }

    /// Mutable view of a cached page; marks it dirty.
    std::span<uint8_t> modify_page(PageFile& f, uint64_t page_id) {
        Frame& fr = fetch(f, page_id);
        fr.dirty = true;
        return {fr.data.data(), fr.data.size()};
    }

    /// One-shot read: served from cache when resident, otherwise read from
    /// disk without occupying a frame. Used by builds for sequential scans.
    void read_streaming(PageFile& f, uint64_t page_id, std::vector<uint8_t>& out) {
        out.resize(f.page_size());
        auto it = index_.find(key(f, page_id));
        if (it != index_.end()) {
            touch(it->second);
            std::copy(it->second->data.begin(), it->second->data.end(), out.begin());
            return;
        }
        f.read(page_id, out);
        ++stats_.page_reads;
    }

    /// New zeroed page in the cache; no I/O until flushed or evicted dirty.
    uint64_t allocate_page(PageFile& f) {
        uint64_t id = f.reserve_page();
        make_room();
        lru_.push_front(Frame{key(f, id), &f, id, std::vector<uint8_t>(f.page_size(), 0),
                              /*dirty=*/true, /*pinned=*/false});
        index_[key(f, id)] = lru_.begin();
        return id;
    }

    /// Append a full page straight to disk, bypassing the cache.
    uint64_t append_page(PageFile& f, std::span<const uint8_t> buf) {
        uint64_t id = f.reserve_page();
        f.write(id, buf);
        ++stats_.page_writes;
        return id;
    }

    void write_page(PageFile& f, uint64_t page_id, std::span<const uint8_t> buf) {
        Frame& fr = fetch_for_write(f, page_id);
        std::copy(buf.begin(), buf.end(), fr.data.begin());
        fr.dirty = true;
    }

    void pin(PageFile& f, uint64_t page_id) {
        auto it = index_.find(key(f, page_id));
        if (it == index_.end()) throw error("pin of non-resident page");
        if (!it->second->pinned) {
            it->second->pinned = true;
            ++pinned_;
        }
    }

    void unpin(PageFile& f, uint64_t page_id) {
        auto it = index_.find(key(f, page_id));
        if (it == index_.end()) throw error("unpin of non-resident page");
        if (it->second->pinned) {
            it->second->pinned = false;
            --pinned_;
        }
    }

    void flush_page(PageFile& f, uint64_t page_id) {
        auto it = index_.find(key(f, page_id));
        if (it == index_.end()) throw error("flush of non-resident page");
        if (it->second->dirty) {
            f.write(page_id, it->second->data);
            ++stats_.page_writes;
            it->second->dirty = false;
        }
    }

    /// Flush (when dirty) and drop the frame.
    void flush_evict(PageFile& f, uint64_t page_id) {
        flush_page(f, page_id);
        drop(f, page_id);
    }

    /// Drop a frame without writing it, even when dirty. Only valid for
    /// scratch pages whose contents are no longer needed.
    void discard(PageFile& f, uint64_t page_id) { drop(f, page_id); }

    void flush_all() {
        for (Frame& fr : lru_) {
            if (fr.dirty) {
                fr.file->write(fr.page_id, fr.data);
                ++stats_.page_writes;
                fr.dirty = false;
            }
        }
    }

    /// Flush everything and empty the cache (cold restart between phases).
    void reset_cache() {
        flush_all();
        lru_.clear();
        index_.clear();
        pinned_ = 0;
    }

  private:
    using Key = std::pair<uint64_t, uint64_t>;

    struct Frame {
        Key k;
        PageFile* file;
        uint64_t page_id;
        std::vector<uint8_t> data;
        bool dirty;
        bool pinned;
    };

    using FrameIt = std::list<Frame>::iterator;

    static Key key(const PageFile& f, uint64_t page_id) { return {f.uid(), page_id}; }

    void touch(FrameIt it) { lru_.splice(lru_.begin(), lru_, it); }

    void make_room() {
        if (frames_count() < capacity_) return;
        for (auto it = std::prev(lru_.end());; --it) {
            if (!it->pinned) {
                if (it->dirty) {
                    it->file->write(it->page_id, it->data);
                    ++stats_.page_writes;
                }
                index_.erase(it->k);
                lru_.erase(it);
                return;
            }
            if (it == lru_.begin()) break;
        }
        throw error("buffer pool exhausted: all pages pinned");
    }

    Frame& fetch(PageFile& f, uint64_t page_id) {
        auto it = index_.find(key(f, page_id));
        if (it != index_.end()) {
            touch(it->second);
            return *it->second;
        }
        make_room();
        std::vector<uint8_t> data(f.page_size());
        f.read(page_id, data);
        ++stats_.page_reads;
        lru_.push_front(Frame{key(f, page_id), &f, page_id, std::move(data), false, false});
        index_[key(f, page_id)] = lru_.begin();
        return lru_.front();
    }

    // Full-page blind write: no read needed when the page is not resident.
    Frame& fetch_for_write(PageFile& f, uint64_t page_id) {
        auto it = index_.find(key(f, page_id));
        if (it != index_.end()) {
            touch(it->second);
            return *it->second;
        }
        if (page_id == f.page_count()) f.reserve_page();
        make_room();
        lru_.push_front(
            Frame{key(f, page_id), &f, page_id, std::vector<uint8_t>(f.page_size(), 0), false, false});
        index_[key(f, page_id)] = lru_.begin();
        return lru_.front();
    }

    void drop(PageFile& f, uint64_t page_id) {
        auto it = index_.find(key(f, page_id));
        if (it == index_.end()) return;
        if (it->second->pinned) --pinned_;
        lru_.erase(it->second);
        index_.erase(it);
    }

    uint64_t frames_count() const { return index_.size(); }

    uint64_t capacity_;
    uint64_t pinned_ = 0;
    std::list<Frame> lru_;
    std::map<Key, FrameIt> index_;
    IoStats stats_;
};

/// Scratch file living next to `base`, removed on destruction.
class TempFile {
  public:
    TempFile(const std::string& base, const FileHeader& header) {
        path_ = base + ".tmp" + std::to_string(counter()++);
        file_ = PageFile::create(path_, header);
    }
    ~TempFile() {
        file_.close();
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    PageFile& file() { return file_; }

  private:
    static uint64_t& counter() {
        static uint64_t c = 0;
        return c;
    }
    std::string path_;
    PageFile file_;
};

}  // namespace mbi
