#include "doctest.h"

#include "gren/image.hpp"
#include "support/tmpdir.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <vector>

using namespace gren;

namespace {

GrayImage random_quantized(std::size_t w, std::size_t h, std::uint64_t seed) {
    GrayImage img(w, h);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> level(0, 255);
    for (double& p : img.pixels) p = level(rng) / 255.0;
    return img;
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("validate_unit_range accepts [0,1] and rejects outliers and NaN") {
    GrayImage ok(3, 2, 0.0);
    ok.pixels = {0.0, 1.0, 0.5, 0.25, 0.999, 0.001};
    CHECK_NOTHROW(validate_unit_range(ok, "test"));

    for (double bad : {-0.001, 1.001, std::nan("")}) {
        GrayImage img = ok;
        img.pixels[3] = bad;
        CHECK_THROWS_WITH_AS(validate_unit_range(img, "ctx"),
                             doctest::Contains("ctx"), std::invalid_argument);
    }
}

TEST_CASE("pgm round-trip is bit-identical for 8-bit-aligned pixels") {
    testsup::TmpDir tmp("img");
    const GrayImage img = random_quantized(37, 21, 42);
    write_pgm(img, tmp.str("a.pgm"));
    const GrayImage back = read_pgm(tmp.str("a.pgm"));
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("pgm write quantizes like quantize_8bit") {
    testsup::TmpDir tmp("img");
    GrayImage img(8, 8);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& p : img.pixels) p = u(rng);
    write_pgm(img, tmp.str("q.pgm"));
    const GrayImage back = read_pgm(tmp.str("q.pgm"));
    CHECK(back.pixels == quantize_8bit(img).pixels);
}

TEST_CASE("quantize_8bit is idempotent and rounds to nearest level") {
    GrayImage img(5, 1);
    img.pixels = {0.0, 1.0, 0.4, 0.5 / 255.0, 1.49 / 255.0};
    const GrayImage q = quantize_8bit(img);
    CHECK(q.pixels[0] == 0.0);
    CHECK(q.pixels[1] == 1.0);
    CHECK(q.pixels[2] == 102.0 / 255.0);  // llround(0.4*255) = 102
    CHECK(q.pixels[3] == 1.0 / 255.0);    // exact half rounds away from zero
    CHECK(q.pixels[4] == 1.0 / 255.0);
    CHECK(quantize_8bit(q).pixels == q.pixels);

    GrayImage bad(1, 1, 1.5);
    CHECK_THROWS_AS(quantize_8bit(bad), std::invalid_argument);
}

TEST_CASE("read_pgm error paths name the offending file") {
    testsup::TmpDir tmp("img");
    CHECK_THROWS_WITH_AS(read_pgm(tmp.str("missing.pgm")),
                         doctest::Contains("missing.pgm"), std::runtime_error);

    write_bytes(tmp.str("ascii.pgm"), "P2\n2 2\n255\n0 0 0 0\n");
    CHECK_THROWS_WITH_AS(read_pgm(tmp.str("ascii.pgm")),
                         doctest::Contains("not a binary PGM"), std::runtime_error);

    write_bytes(tmp.str("short.pgm"), std::string("P5\n4 4\n255\n") + "abc");
    CHECK_THROWS_WITH_AS(read_pgm(tmp.str("short.pgm")),
                         doctest::Contains("truncated pixel data"), std::runtime_error);

    write_bytes(tmp.str("maxval.pgm"), std::string("P5\n2 2\n65535\n") + std::string(8, '\0'));
    CHECK_THROWS_WITH_AS(read_pgm(tmp.str("maxval.pgm")),
                         doctest::Contains("unsupported maxval"), std::runtime_error);

    write_bytes(tmp.str("dim.pgm"), "P5\n0 2\n255\n");
    CHECK_THROWS_AS(read_pgm(tmp.str("dim.pgm")), std::runtime_error);

    write_bytes(tmp.str("header.pgm"), "P5\n2");
    CHECK_THROWS_WITH_AS(read_pgm(tmp.str("header.pgm")),
                         doctest::Contains("truncated header"), std::runtime_error);
}

TEST_CASE("read_pgm skips comments in the header") {
    testsup::TmpDir tmp("img");
    std::string data = "P5\n# a comment line\n2 # trailing\n2\n255\n";
    data += std::string({'\x00', '\x7f', '\xff', '\x33'});
    write_bytes(tmp.str("c.pgm"), data);
    const GrayImage img = read_pgm(tmp.str("c.pgm"));
    REQUIRE(img.width == 2);
    REQUIRE(img.height == 2);
    CHECK(img.pixels[0] == 0.0);
    CHECK(img.pixels[1] == 127.0 / 255.0);
    CHECK(img.pixels[2] == 1.0);
    CHECK(img.pixels[3] == 51.0 / 255.0);
}

TEST_CASE("resize_bilinear: identity size copies exactly") {
    const GrayImage img = random_quantized(13, 9, 3);
    const GrayImage out = resize_bilinear(img, 13, 9);
    CHECK(out.pixels == img.pixels);
}

TEST_CASE("resize_bilinear: 2x downscale equals 2x2 block average") {
    const GrayImage img = random_quantized(16, 12, 5);
    const GrayImage out = resize_bilinear(img, 8, 6);
    // With half-pixel centers the source position for output (ox,oy) is
    // (2ox+0.5, 2oy+0.5): an exact 4-pixel average.
    for (std::size_t oy = 0; oy < 6; ++oy) {
        for (std::size_t ox = 0; ox < 8; ++ox) {
            const double want = (img.at(2 * ox, 2 * oy) + img.at(2 * ox + 1, 2 * oy) +
                                 img.at(2 * ox, 2 * oy + 1) + img.at(2 * ox + 1, 2 * oy + 1)) /
                                4.0;
            CHECK(out.at(ox, oy) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("resize_bilinear: reproduces affine ramps at mapped source coordinates") {
    // Bilinear interpolation is exact on a + b*x + c*y; edge clamping only
    // changes the coordinate it is evaluated at, which the oracle mirrors.
    const double a = 0.05, b = 0.01, c = 0.02;
    GrayImage img(24, 16);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            img.at(x, y) = a + b * static_cast<double>(x) + c * static_cast<double>(y);

    for (auto [dw, dh] : {std::pair<std::size_t, std::size_t>{48, 32}, {10, 7}, {24, 5}}) {
        const GrayImage out = resize_bilinear(img, dw, dh);
        const double sx = 24.0 / static_cast<double>(dw);
        const double sy = 16.0 / static_cast<double>(dh);
        for (std::size_t oy = 0; oy < dh; ++oy) {
            for (std::size_t ox = 0; ox < dw; ++ox) {
                const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, 23.0);
                const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, 15.0);
                CHECK(out.at(ox, oy) == doctest::Approx(a + b * fx + c * fy).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("resize_bilinear: output range stays inside the input range") {
    const GrayImage img = random_quantized(11, 17, 9);
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    for (auto [dw, dh] : {std::pair<std::size_t, std::size_t>{23, 5}, {3, 40}}) {
        const GrayImage out = resize_bilinear(img, dw, dh);
        for (double p : out.pixels) {
            CHECK(p >= *lo);
            CHECK(p <= *hi);
        }
    }
}

TEST_CASE("resize_bilinear rejects empty geometry") {
    GrayImage img(4, 4, 0.5);
    CHECK_THROWS_AS(resize_bilinear(img, 0, 4), std::invalid_argument);
    CHECK_THROWS_AS(resize_bilinear(img, 4, 0), std::invalid_argument);
    CHECK_THROWS_AS(resize_bilinear(GrayImage(0, 0), 4, 4), std::invalid_argument);
}

TEST_CASE("normalize_minmax maps extremes to 0 and 1, constant to 0.5") {
    GrayImage img(2, 2);
    img.pixels = {0.2, 0.6, 0.4, 0.2};
    const GrayImage n = normalize_minmax(img);
    CHECK(n.pixels[0] == 0.0);
    CHECK(n.pixels[1] == 1.0);
    CHECK(n.pixels[2] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(n.pixels[3] == 0.0);

    GrayImage flat(3, 3, 0.7);
    const GrayImage nf = normalize_minmax(flat);
    for (double p : nf.pixels) CHECK(p == 0.5);

    CHECK_THROWS_AS(normalize_minmax(GrayImage(0, 0)), std::invalid_argument);
}

TEST_CASE("normalize_minmax is invariant under positive affine rescaling") {
    const GrayImage img = random_quantized(9, 9, 11);
    GrayImage scaled = img;
    for (double& p : scaled.pixels) p = 0.3 * p + 0.2;
    const GrayImage a = normalize_minmax(img);
    const GrayImage b = normalize_minmax(scaled);
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        CHECK(a.pixels[i] == doctest::Approx(b.pixels[i]).epsilon(1e-9));
    }
}

TEST_CASE("hflip mirrors columns and is an involution") {
    GrayImage img(3, 2);
    img.pixels = {1.0, 2.0, 3.0,
                  4.0, 5.0, 6.0};
    const GrayImage f = hflip(img);
    CHECK(f.pixels == std::vector<double>{3.0, 2.0, 1.0, 6.0, 5.0, 4.0});
    CHECK(hflip(f).pixels == img.pixels);
}

TEST_CASE("mask_bbox finds the tight inclusive box") {
    const std::size_t w = 6, h = 5;
    std::vector<std::uint8_t> mask(w * h, 0);
    mask[1 * w + 2] = 1;
    mask[3 * w + 4] = 1;
    mask[2 * w + 3] = 1;
    const BBox b = mask_bbox(mask, w, h);
    CHECK(b.x0 == 2);
    CHECK(b.y0 == 1);
    CHECK(b.x1 == 4);
    CHECK(b.y1 == 3);
    CHECK(b.width() == 3);
    CHECK(b.height() == 3);

    CHECK_THROWS_WITH_AS(mask_bbox(std::vector<std::uint8_t>(w * h, 0), w, h),
                         doctest::Contains("empty mask"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(mask_bbox(mask, w, h + 1),
                         doctest::Contains("size mismatch"), std::invalid_argument);
}

TEST_CASE("crop_to_mask keeps masked pixels and zeroes the rest of the box") {
    GrayImage img(4, 4);
    for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = static_cast<double>(i + 1) / 16.0;
    std::vector<std::uint8_t> mask(16, 0);
    mask[1 * 4 + 1] = 1;  // (1,1)
    mask[2 * 4 + 2] = 1;  // (2,2)
    const GrayImage c = crop_to_mask(img, mask);
    REQUIRE(c.width == 2);
    REQUIRE(c.height == 2);
    CHECK(c.at(0, 0) == img.at(1, 1));
    CHECK(c.at(1, 1) == img.at(2, 2));
    CHECK(c.at(1, 0) == 0.0);
    CHECK(c.at(0, 1) == 0.0);

    CHECK_THROWS_AS(crop_to_mask(img, std::vector<std::uint8_t>(16, 0)), std::invalid_argument);
}
