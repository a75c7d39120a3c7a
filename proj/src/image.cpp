#include "gren/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace gren {

GrayImage::GrayImage(std::size_t w, std::size_t h, double fill)
    : width(w), height(h), pixels(w * h, fill) {}

void validate_unit_range(const GrayImage& img, const std::string& context) {
    for (double p : img.pixels) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument(context + ": pixel value " + std::to_string(p) +
                                        " outside [0,1]");
        }
    }
}

void write_pgm(const GrayImage& img, const std::string& path) {
    validate_unit_range(img, "write_pgm");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(img.width);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            row[x] = static_cast<unsigned char>(std::llround(img.at(x, y) * 255.0));
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

namespace {

int next_pgm_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {  // comment to end of line
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok.empty() ? EOF : 0;
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string tok;
    if (next_pgm_token(in, tok) == EOF || tok != "P5") {
        throw std::runtime_error("read_pgm: " + path + " is not a binary PGM (P5)");
    }
    auto parse_dim = [&](const char* what) {
        if (next_pgm_token(in, tok) == EOF) {
            throw std::runtime_error("read_pgm: " + path + ": truncated header (" + what + ")");
        }
        long v = 0;
        try {
            v = std::stol(tok);
        } catch (const std::exception&) {
            v = -1;
        }
        if (v <= 0) throw std::runtime_error("read_pgm: " + path + ": bad " + what + " '" + tok + "'");
        return static_cast<std::size_t>(v);
    };
    std::size_t w = parse_dim("width");
    std::size_t h = parse_dim("height");
    std::size_t maxval = parse_dim("maxval");
    if (maxval != 255) {
        throw std::runtime_error("read_pgm: " + path + ": unsupported maxval " + std::to_string(maxval));
    }
    // header ends with exactly one whitespace byte, already eaten by the tokenizer
    GrayImage img(w, h);
    std::vector<unsigned char> raw(w * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw std::runtime_error("read_pgm: " + path + ": truncated pixel data");
    }
    for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
    return img;
}

GrayImage quantize_8bit(const GrayImage& img) {
    validate_unit_range(img, "quantize_8bit");
    GrayImage out = img;
    for (double& p : out.pixels) p = std::llround(p * 255.0) / 255.0;
    return out;
}

GrayImage resize_bilinear(const GrayImage& img, std::size_t dst_w, std::size_t dst_h) {
    if (img.width == 0 || img.height == 0) throw std::invalid_argument("resize_bilinear: empty image");
    if (dst_w == 0 || dst_h == 0) throw std::invalid_argument("resize_bilinear: empty destination");
    GrayImage out(dst_w, dst_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(dst_w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(dst_h);
    for (std::size_t oy = 0; oy < dst_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < dst_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = img.at(x0, y0) * (1.0 - wx) + img.at(x1, y0) * wx;
            const double bot = img.at(x0, y1) * (1.0 - wx) + img.at(x1, y1) * wx;
            out.at(ox, oy) = top * (1.0 - wy) + bot * wy;
        }
    }
    return out;
}

GrayImage normalize_minmax(const GrayImage& img) {
    if (img.pixels.empty()) throw std::invalid_argument("normalize_minmax: empty image");
    auto [lo_it, hi_it] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const double lo = *lo_it, hi = *hi_it;
    GrayImage out(img.width, img.height);
    if (hi == lo) {
        std::fill(out.pixels.begin(), out.pixels.end(), 0.5);
        return out;
    }
    const double range = hi - lo;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        out.pixels[i] = (img.pixels[i] - lo) / range;
    }
    return out;
}

GrayImage hflip(const GrayImage& img) {
    GrayImage out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            out.at(x, y) = img.at(img.width - 1 - x, y);
        }
    }
    return out;
}

BBox mask_bbox(const std::vector<std::uint8_t>& mask, std::size_t width, std::size_t height) {
    if (mask.size() != width * height) throw std::invalid_argument("mask_bbox: size mismatch");
    std::size_t x0 = width, y0 = height, x1 = 0, y1 = 0;
    bool any = false;
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            if (mask[y * width + x]) {
                any = true;
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    }
    if (!any) throw std::invalid_argument("mask_bbox: empty mask");
    return {x0, y0, x1, y1};
}

GrayImage crop_to_mask(const GrayImage& img, const std::vector<std::uint8_t>& mask) {
    const BBox b = mask_bbox(mask, img.width, img.height);
    GrayImage out(b.width(), b.height());
    for (std::size_t y = b.y0; y <= b.y1; ++y) {
        for (std::size_t x = b.x0; x <= b.x1; ++x) {
            if (mask[y * img.width + x]) out.at(x - b.x0, y - b.y0) = img.at(x, y);
        }
    }
    return out;
}

}  // namespace gren
