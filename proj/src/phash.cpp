#include "gren/phash.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gren {

std::string hash_hex(HashCode h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) {
        s[15 - i] = digits[(h.bits >> (4 * i)) & 0xf];
    }
    return s;
}

HashCode hash_from_hex(const std::string& s) {
    if (s.size() != 16) throw std::invalid_argument("hash_from_hex: expected 16 hex digits");
    std::uint64_t bits = 0;
    for (char c : s) {
        std::uint64_t d;
        if (c >= '0' && c <= '9') d = static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') d = static_cast<std::uint64_t>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F') d = static_cast<std::uint64_t>(c - 'A' + 10);
        else throw std::invalid_argument("hash_from_hex: invalid digit");
        bits = (bits << 4) | d;
    }
    return {bits};
}

unsigned hamming(HashCode a, HashCode b) {
    return static_cast<unsigned>(std::popcount(a.bits ^ b.bits));
}

std::vector<double> dct2(const std::vector<double>& img, std::size_t n) {
    if (n == 0 || img.size() != n * n) throw std::invalid_argument("dct2: expected a square image");
    // M[k][i]
    std::vector<double> M(n * n);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) M[i] = std::sqrt(inv);
    for (std::size_t k = 1; k < n; ++k) {
        const double scale = std::sqrt(2.0 * inv);
        for (std::size_t i = 0; i < n; ++i) {
            M[k * n + i] = scale * std::cos(std::numbers::pi * (2.0 * i + 1.0) * k / (2.0 * n));
        }
    }
    // tmp = M * X
    std::vector<double> tmp(n * n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            const double m = M[k * n + i];
            const double* row = img.data() + i * n;
            double* trow = tmp.data() + k * n;
            for (std::size_t j = 0; j < n; ++j) trow[j] += m * row[j];
        }
    }
    // out = tmp * M^T
    std::vector<double> out(n * n, 0.0);
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = 0; v < n; ++v) {
            const double* trow = tmp.data() + u * n;
            const double* mrow = M.data() + v * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += trow[j] * mrow[j];
            out[u * n + v] = acc;
        }
    }
    return out;
}

HashCode phash64(const GrayImage& img) {
    validate_unit_range(img, "phash64");
    const GrayImage small = resize_bilinear(img, 32, 32);
    const GrayImage norm = normalize_minmax(small);
    const std::vector<double> coeffs = dct2(norm.pixels, 32);

    // 8x8 low-frequency block without the DC term, plus (8,0) to stay at 64.
    std::vector<double> band;
    band.reserve(64);
    for (std::size_t u = 0; u < 8; ++u) {
        for (std::size_t v = 0; v < 8; ++v) {
            if (u == 0 && v == 0) continue;
            band.push_back(coeffs[u * 32 + v]);
        }
    }
    band.push_back(coeffs[8 * 32 + 0]);

    std::vector<double> sorted = band;
    std::sort(sorted.begin(), sorted.end());
    const double median = 0.5 * (sorted[31] + sorted[32]);

    // The margin absorbs DCT rounding residue (~1e-16) so flat spectra hash
    // to all zeros; genuine coefficients sit orders of magnitude above it.
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        if (band[i] > median + 1e-12) bits |= (1ull << i);
    }
    return {bits};
}

HashCode region_hash(const GrayImage& img, const std::vector<std::uint8_t>& mask) {
    return phash64(crop_to_mask(img, mask));
}

}  // namespace gren
