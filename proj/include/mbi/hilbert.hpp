#pragma once

#include <array>
#include <cstdint>

#include "mbi/core.hpp"

namespace mbi {

/// Hilbert rank of a grid cell, stored as up to 256 interleaved bits with
/// the most significant bit first (word 0 holds the top bits). Supports
/// d*order <= 256, i.e. the full 16-bit grid at d = 16.
struct HilbertKey {
    std::array<uint64_t, 4> w{};

    friend bool operator<(const HilbertKey& a, const HilbertKey& b) { return a.w < b.w; }
    friend bool operator==(const HilbertKey& a, const HilbertKey& b) { return a.w == b.w; }
};

/// Axes-to-transpose conversion (Skilling's algorithm): X[i] holds `order`
/// bits of axis i on input and the transposed Hilbert integer on output.
inline void hilbert_transpose(std::span<uint32_t> x, uint32_t order) {
    const size_t n = x.size();
    uint32_t m = 1u << (order - 1);
    for (uint32_t q = m; q > 1; q >>= 1) {
        uint32_t p = q - 1;
        for (size_t i = 0; i < n; ++i) {
            if (x[i] & q) {
                x[0] ^= p;  // invert low bits of axis 0
            } else {
                uint32_t t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
    }
    for (size_t i = 1; i < n; ++i) x[i] ^= x[i - 1];
    uint32_t t = 0;
    for (uint32_t q = m; q > 1; q >>= 1)
        if (x[n - 1] & q) t ^= q - 1;
    for (size_t i = 0; i < n; ++i) x[i] ^= t;
}

inline HilbertKey hilbert_key_from_cell(std::span<const uint32_t> cell, uint32_t order) {
    std::array<uint32_t, kMaxDim> x{};
    const size_t d = cell.size();
    for (size_t i = 0; i < d; ++i) x[i] = cell[i];
    hilbert_transpose(std::span<uint32_t>(x.data(), d), order);
    HilbertKey key;
    size_t bit = 0;  // bit position from the most significant end
    for (uint32_t level = order; level-- > 0;) {
        for (size_t i = 0; i < d; ++i) {
            if ((x[i] >> level) & 1u) key.w[bit >> 6] |= 1ull << (63 - (bit & 63));
            ++bit;
        }
    }
    return key;
}

/// Quantize a point to the 2^order grid over `domain` and rank it.
inline HilbertKey hilbert_key(const Point& p, const Box& domain, uint32_t d,
                              uint32_t order = 16) {
    std::array<uint32_t, kMaxDim> cell{};
    const uint32_t cells = 1u << order;
    for (uint32_t i = 0; i < d; ++i) {
        double ext = domain.extent(i);
        double rel = ext > 0 ? (p.coords[i] - domain.lo[i]) / ext : 0.0;
        double scaled = rel * cells;
        uint32_t c = scaled <= 0 ? 0 : static_cast<uint32_t>(scaled);
        cell[i] = std::min(c, cells - 1);
    }
    return hilbert_key_from_cell(std::span<const uint32_t>(cell.data(), d), order);
}

}  // namespace mbi
