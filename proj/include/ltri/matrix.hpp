#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

namespace ltri {

/// Dense row-major float matrix. Deliberately minimal; everything in this
/// library is either a tile slice or a (tokens x dim) vector table.
struct MatF {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    MatF() = default;
    MatF(int r, int c, float fill = 0.0f) : rows(r), cols(c), data(std::size_t(r) * std::size_t(c), fill) {}

    float& at(int r, int c) { return data[std::size_t(r) * cols + c]; }
    float at(int r, int c) const { return data[std::size_t(r) * cols + c]; }

    float* row(int r) { return data.data() + std::size_t(r) * cols; }
    const float* row(int r) const { return data.data() + std::size_t(r) * cols; }

    bool empty() const { return data.empty(); }
};

// IEEE 754 binary16 conversion, round to nearest even. Used by the hot tier's
// 2-byte storage mode.
inline std::uint16_t f32_to_f16(float f) {
    std::uint32_t x;
    std::memcpy(&x, &f, 4);
    std::uint32_t sign = (x >> 16) & 0x8000u;
    std::int32_t exp = int((x >> 23) & 0xffu) - 127 + 15;
    std::uint32_t mant = x & 0x7fffffu;
    if (exp >= 31) return std::uint16_t(sign | 0x7c00u); // overflow -> inf
    if (exp <= 0) {
        if (exp < -10) return std::uint16_t(sign); // underflow -> zero
        mant |= 0x800000u;
        int shift = 14 - exp;
        std::uint32_t half = mant >> shift;
        std::uint32_t rem = mant & ((1u << shift) - 1u);
        std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
        return std::uint16_t(sign | half);
    }
    std::uint32_t half = std::uint32_t(exp << 10) | (mant >> 13);
    std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
    return std::uint16_t(sign | half);
}

inline float f16_to_f32(std::uint16_t h) {
    std::uint32_t sign = std::uint32_t(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            // subnormal half: renormalize
            int e = -1;
            do {
                mant <<= 1;
                ++e;
            } while (!(mant & 0x400u));
            x = sign | std::uint32_t(127 - 15 - e) << 23 | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 31) {
        x = sign | 0x7f800000u | (mant << 13);
    } else {
        x = sign | std::uint32_t(exp - 15 + 127) << 23 | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

} // namespace ltri
