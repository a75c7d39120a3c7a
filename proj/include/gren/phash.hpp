#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gren/image.hpp"

namespace gren {

/// 64-bit perceptual hash.
struct HashCode {
    std::uint64_t bits = 0;

    bool operator==(const HashCode&) const = default;
};

std::string hash_hex(HashCode h);          // 16 lowercase hex digits
HashCode hash_from_hex(const std::string& s);

// Bits that differ, 0..64.
unsigned hamming(HashCode a, HashCode b);

// Orthonormal type-II 2D DCT of a square image, via M * X * M^T with
// M[0][i] = sqrt(1/N), M[k][i] = sqrt(2/N) * cos(pi*(2i+1)*k / (2N)).
// Row u of the result indexes vertical frequency, column v horizontal.
std::vector<double> dct2(const std::vector<double>& img, std::size_t n);

// Resize to 32x32 (bilinear, half-pixel centers), min-max normalize
// (constant images flatten to 0.5), orthonormal 2D DCT, then take the 8x8
// low-frequency block minus the DC term, back-filled with coefficient
// (row 8, col 0) appended last to keep 64 entries, row-major order.
// Bit i of the hash (LSB-first over that order) is 1 iff the coefficient
// is strictly greater than the median of the 64.
HashCode phash64(const GrayImage& img);

// Hash of a masked region: crop to the mask bbox with off-mask pixels
// zeroed, then phash64. Throws if the mask is empty.
HashCode region_hash(const GrayImage& img, const std::vector<std::uint8_t>& mask);

}  // namespace gren
