#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace gren {

/// Row-major grayscale raster with values in [0,1].
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> pixels;  // height*width, row-major

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h, double fill = 0.0);

    double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
    std::size_t size() const { return pixels.size(); }
};

// Throws std::invalid_argument if any pixel falls outside [0,1] (NaN included).
void validate_unit_range(const GrayImage& img, const std::string& context);

// Binary 8-bit PGM (P5, maxval 255). Values are quantized with llround(p*255)/255,
// so an image already on the 1/255 grid round-trips bit-exactly.
void write_pgm(const GrayImage& img, const std::string& path);
GrayImage read_pgm(const std::string& path);

// Snap every pixel to the 1/255 grid (what write_pgm would store).
GrayImage quantize_8bit(const GrayImage& img);

// Bilinear resampling on half-pixel centers: source coordinate of output pixel
// (ox,oy) is ((ox+0.5)*sw/dw - 0.5, (oy+0.5)*sh/dh - 0.5), edge-clamped.
GrayImage resize_bilinear(const GrayImage& img, std::size_t dst_w, std::size_t dst_h);

// (p - min) / (max - min); constant images map to 0.5 everywhere.
GrayImage normalize_minmax(const GrayImage& img);

GrayImage hflip(const GrayImage& img);

struct BBox {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
    std::size_t width() const { return x1 - x0 + 1; }
    std::size_t height() const { return y1 - y0 + 1; }
};

// Tight bounding box of nonzero mask pixels. Throws if the mask is empty.
BBox mask_bbox(const std::vector<std::uint8_t>& mask, std::size_t width, std::size_t height);

// Crop image to the mask's bounding box, zeroing pixels where the mask is 0.
GrayImage crop_to_mask(const GrayImage& img, const std::vector<std::uint8_t>& mask);

}  // namespace gren
