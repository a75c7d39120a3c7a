#include "gren/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "gren/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gren {

namespace {

void check_spec(const SceneSpec& spec) {
    if (spec.image_side < 32) throw std::invalid_argument("SceneSpec: image_side too small");
    if (spec.num_classes == 0) throw std::invalid_argument("SceneSpec: num_classes must be positive");
    if (!(spec.lesion_radius_lo > 0.0) || spec.lesion_radius_hi < spec.lesion_radius_lo) {
        throw std::invalid_argument("SceneSpec: lesion_radius range must be positive and nonempty");
    }
    if (!(spec.lesion_contrast_lo > 0.0) || spec.lesion_contrast_hi < spec.lesion_contrast_lo) {
        throw std::invalid_argument("SceneSpec: lesion_contrast range must be positive and nonempty");
    }
    if (spec.rib_amplitude < 0.0 || spec.noise_sigma < 0.0) {
        throw std::invalid_argument("SceneSpec: rib_amplitude and noise_sigma must be nonnegative");
    }
    if (spec.annotated_fraction < 0.0 || spec.annotated_fraction > 1.0) {
        throw std::invalid_argument("SceneSpec: annotated_fraction must be in [0,1]");
    }
    if (spec.lesion_prob < 0.0 || spec.lesion_prob > 1.0) {
        throw std::invalid_argument("SceneSpec: lesion_prob must be in [0,1]");
    }
}

struct Ellipse {
    double cx, cy, ax, ay;  // center and semi-axes, pixel units

    bool contains(double x, double y) const {
        const double dx = (x - cx) / ax, dy = (y - cy) / ay;
        return dx * dx + dy * dy <= 1.0;
    }
};

std::vector<std::uint8_t> rasterize_ellipse(const Ellipse& e, std::size_t side) {
    std::vector<std::uint8_t> mask(side * side, 0);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            if (e.contains(static_cast<double>(x), static_cast<double>(y))) {
                mask[y * side + x] = 1;
            }
        }
    }
    return mask;
}

// Canonical parenchyma texture shared by every scene. It lives in lung-local
// coordinates (nx, ny) = ((x-cx)/ax, (y-cy)/ay), so cropping a lung to its
// bounding box and resizing samples the same field no matter where that lung
// sits or how large it is drawn. The right lung evaluates the field at -nx:
// the two lungs are anatomical mirrors, and a flipped healthy left crop
// matches the right crop pixel for pixel.
//
// The field carries one wave per low-frequency slot, with fixed pseudo-random
// phases (so no slot cancels by symmetry). A healthy crop therefore has real
// energy behind every hash bit, and the hash moves only when a lesion
// displaces that structure.
struct TextureField {
    static constexpr int kMaxFy = 9, kMaxFx = 8;
    double amp[kMaxFy][kMaxFx]{};
    double phase_x[kMaxFy][kMaxFx]{};
    double phase_y[kMaxFy][kMaxFx]{};

    TextureField() {
        for (int fy = 0; fy < kMaxFy; ++fy) {
            for (int fx = 0; fx < kMaxFx; ++fx) {
                if ((fx == 0 && fy == 0) || (fy == kMaxFy - 1 && fx > 0)) continue;
                amp[fy][fx] = 0.017 / (1.0 + 0.05 * (fx + fy));
                phase_x[fy][fx] = 2.0 * std::numbers::pi * fract(fx, fy, 12.9898, 78.233);
                phase_y[fy][fx] = 2.0 * std::numbers::pi * fract(fx, fy, 26.6510, 9.1270);
            }
        }
    }

    static double fract(int fx, int fy, double a, double b) {
        const double h = std::sin(a * (fx + 1) + b * (fy + 1)) * 43758.5453;
        return h - std::floor(h);
    }

    double at(double nx, double ny) const {
        double v = 0.0;
        for (int fy = 0; fy < kMaxFy; ++fy) {
            for (int fx = 0; fx < kMaxFx; ++fx) {
                if (amp[fy][fx] == 0.0) continue;
                v += amp[fy][fx] * std::cos(fx * std::numbers::pi * nx + phase_x[fy][fx]) *
                     std::cos(fy * std::numbers::pi * ny + phase_y[fy][fx]);
            }
        }
        return v;
    }
};

double lung_texture(double nx, double ny) {
    static const TextureField field;
    return field.at(nx, ny);
}

// Rib bands ride in the same lung-local frame. Frequency and base phase are
// anatomy constants; only a small phase jitter varies per scene so healthy
// crops stay near-identical across the dataset.
constexpr double kRibCycles = 7.0;
constexpr double kRibPhase = 0.6;

}  // namespace

Sample generate_sample(const SceneSpec& spec, std::uint64_t seed) {
    check_spec(spec);
    const std::size_t S = spec.image_side;
    const double Sd = static_cast<double>(S);
    Rng rng(seed);

    // Lung fields: two ellipses with jittered centers and axes, kept apart of
    // the vertical midline so the masks stay disjoint.
    const double lung_ax = Sd * (0.155 + 0.02 * rng.uniform());
    const double lung_ay = Sd * (0.30 + 0.04 * rng.uniform());
    const double cy = Sd * (0.50 + 0.04 * (rng.uniform() - 0.5));
    const double lcx = Sd * 0.28 + Sd * 0.03 * (rng.uniform() - 0.5);
    const double rcx = Sd * 0.72 + Sd * 0.03 * (rng.uniform() - 0.5);
    const Ellipse left{lcx, cy, lung_ax, lung_ay};
    const Ellipse right{rcx, cy, lung_ax, lung_ay};

    Sample s;
    s.left_mask = rasterize_ellipse(left, S);
    s.right_mask = rasterize_ellipse(right, S);

    // Background torso gradient + darker lung fields carrying the canonical
    // rib bands and parenchyma texture. Brightness varies per scene, but the
    // pattern inside each lung is anatomy: stable across scenes and mirrored
    // between the two lungs. A smooth pleural rim fades the lung content to
    // black at the mask boundary, so a mask-tight crop has no step between
    // its interior and the zeroed outside pixels; the crop's spectrum is the
    // texture itself rather than boundary rasterization.
    GrayImage img(S, S);
    const double body = 0.70 + 0.04 * rng.uniform();
    const double lung_drop = 0.32 + 0.04 * rng.uniform();
    const double rib_jitter = 0.3 * (rng.uniform() - 0.5);
    constexpr double kRimWidth = 0.12;  // fraction of the elliptical radius
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            double v = body - 0.05 * (static_cast<double>(y) / Sd);
            const bool in_left = s.left_mask[y * S + x] != 0;
            if (in_left || s.right_mask[y * S + x]) {
                const Ellipse& lung = in_left ? left : right;
                const double nx = (static_cast<double>(x) - lung.cx) / lung.ax;
                const double ny = (static_cast<double>(y) - lung.cy) / lung.ay;
                double shade = v - lung_drop;
                shade += spec.rib_amplitude *
                         std::sin(kRibCycles * std::numbers::pi * ny + kRibPhase + rib_jitter);
                shade += lung_texture(in_left ? nx : -nx, ny);
                const double r = std::sqrt(nx * nx + ny * ny);
                const double t = std::clamp((1.0 - r) / kRimWidth, 0.0, 1.0);
                v = t * t * (3.0 - 2.0 * t) * shade;
            }
            img.at(x, y) = v;
        }
    }

    // Per-class lesions. Class parity decides polarity (even: bright, odd:
    // dark); the side is drawn per class so lesions never appear bilaterally.
    s.labels.assign(spec.num_classes, 0);
    s.lambda.assign(spec.num_classes, 0);
    const bool annotated = rng.bernoulli(spec.annotated_fraction);
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        const bool present = rng.bernoulli(spec.lesion_prob);
        // Draws below stay aligned across samples whether or not the lesion
        // renders, keeping label prevalence exactly Bernoulli(lesion_prob).
        const bool use_left = rng.bernoulli(0.5);
        const double radius = rng.uniform(spec.lesion_radius_lo, spec.lesion_radius_hi);
        const double contrast = rng.uniform(spec.lesion_contrast_lo, spec.lesion_contrast_hi);
        const double ux = rng.uniform();
        const double uy = rng.uniform();
        if (!present) continue;

        const Ellipse& lung = use_left ? left : right;
        const std::size_t R = static_cast<std::size_t>(std::llround(radius));
        // Largest square centered in the ellipse has half-side ax*ay/hypot.
        const double half_max = lung.ax * lung.ay / std::hypot(lung.ax, lung.ay);
        if (static_cast<double>(R) + 1.0 > half_max) {
            throw std::invalid_argument("generate_sample: lesion radius " + std::to_string(R) +
                                        " exceeds lung extent");
        }
        // Place the center so the box [c-R, c+R] stays strictly inside.
        const double span_x = (half_max - static_cast<double>(R) - 1.0);
        const double cx = lung.cx + (2.0 * ux - 1.0) * span_x;
        const double cyl = lung.cy + (2.0 * uy - 1.0) * span_x;
        const long icx = std::llround(cx), icy = std::llround(cyl);

        // Even classes brighten, odd classes darken. A darkening lesion works
        // against a lung shade of only ~0.38, so it takes a reduced amplitude
        // to stay visibly distinct from the black pleural rim instead of
        // clipping to it.
        const double sign = (k % 2 == 0) ? 1.0 : -1.0;
        const double amp = (sign > 0.0 ? 1.0 : 0.62) * contrast;
        for (long y = icy - static_cast<long>(R); y <= icy + static_cast<long>(R); ++y) {
            for (long x = icx - static_cast<long>(R); x <= icx + static_cast<long>(R); ++x) {
                const double dx = static_cast<double>(x - icx), dy = static_cast<double>(y - icy);
                const double r = std::sqrt(dx * dx + dy * dy) / static_cast<double>(R);
                if (r > 1.0) continue;
                const double fall = 0.5 * (1.0 + std::cos(std::numbers::pi * r));
                img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) +=
                    sign * amp * fall;
            }
        }
        s.labels[k] = 1;
        Box b;
        b.cls = k;
        b.x0 = static_cast<std::size_t>(icx - static_cast<long>(R));
        b.x1 = static_cast<std::size_t>(icx + static_cast<long>(R));
        b.y0 = static_cast<std::size_t>(icy - static_cast<long>(R));
        b.y1 = static_cast<std::size_t>(icy + static_cast<long>(R));
        if (annotated) {
            s.lambda[k] = 1;
            s.boxes.push_back(b);
        }
    }

    if (spec.noise_sigma > 0.0) {
        for (double& p : img.pixels) p += spec.noise_sigma * rng.normal();
    }
    for (double& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
    s.image = quantize_8bit(img);
    validate_sample(s, spec);
    return s;
}

void validate_sample(const Sample& s, const SceneSpec& spec) {
    const std::size_t S = spec.image_side;
    if (s.image.width != S || s.image.height != S) {
        throw std::invalid_argument("sample " + s.id + ": image size mismatch");
    }
    if (s.left_mask.size() != S * S || s.right_mask.size() != S * S) {
        throw std::invalid_argument("sample " + s.id + ": mask size mismatch");
    }
    for (std::size_t i = 0; i < S * S; ++i) {
        if (s.left_mask[i] && s.right_mask[i]) {
            throw std::invalid_argument("sample " + s.id + ": overlapping lung masks");
        }
    }
    if (s.labels.size() != spec.num_classes || s.lambda.size() != spec.num_classes) {
        throw std::invalid_argument("sample " + s.id + ": label vector length mismatch");
    }
    std::vector<std::size_t> boxes_per_class(spec.num_classes, 0);
    const BBox lb = mask_bbox(s.left_mask, S, S);
    const BBox rb = mask_bbox(s.right_mask, S, S);
    for (const Box& b : s.boxes) {
        if (b.cls >= spec.num_classes) throw std::invalid_argument("sample " + s.id + ": box class out of range");
        if (b.x1 >= S || b.y1 >= S || b.x0 > b.x1 || b.y0 > b.y1) {
            throw std::invalid_argument("sample " + s.id + ": box out of bounds");
        }
        const bool in_left = b.x0 >= lb.x0 && b.x1 <= lb.x1 && b.y0 >= lb.y0 && b.y1 <= lb.y1;
        const bool in_right = b.x0 >= rb.x0 && b.x1 <= rb.x1 && b.y0 >= rb.y0 && b.y1 <= rb.y1;
        if (in_left == in_right) {
            throw std::invalid_argument("sample " + s.id + ": box not inside exactly one lung region");
        }
        ++boxes_per_class[b.cls];
    }
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        if (s.labels[k] != 0 && s.labels[k] != 1) throw std::invalid_argument("sample " + s.id + ": labels must be 0/1");
        if (s.lambda[k] != 0 && s.lambda[k] != 1) throw std::invalid_argument("sample " + s.id + ": lambda must be 0/1");
        if (s.lambda[k] == 1 && s.labels[k] == 0) {
            throw std::invalid_argument("sample " + s.id + ": lambda set for a negative label");
        }
        if ((boxes_per_class[k] > 0) != (s.lambda[k] == 1)) {
            throw std::invalid_argument("sample " + s.id + ": boxes must be present exactly for lambda=1");
        }
    }
}

// ---- manifest I/O ----------------------------------------------------------

namespace {

json spec_to_json(const SceneSpec& spec) {
    return json{{"image_side", spec.image_side},
                {"num_classes", spec.num_classes},
                {"lesion_radius_range", {spec.lesion_radius_lo, spec.lesion_radius_hi}},
                {"lesion_contrast_range", {spec.lesion_contrast_lo, spec.lesion_contrast_hi}},
                {"rib_amplitude", spec.rib_amplitude},
                {"noise_sigma", spec.noise_sigma},
                {"lesion_prob", spec.lesion_prob},
                {"annotated_fraction", spec.annotated_fraction}};
}

SceneSpec spec_from_json(const json& j) {
    SceneSpec spec;
    spec.image_side = j.at("image_side").get<std::size_t>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.lesion_radius_lo = j.at("lesion_radius_range").at(0).get<double>();
    spec.lesion_radius_hi = j.at("lesion_radius_range").at(1).get<double>();
    spec.lesion_contrast_lo = j.at("lesion_contrast_range").at(0).get<double>();
    spec.lesion_contrast_hi = j.at("lesion_contrast_range").at(1).get<double>();
    spec.rib_amplitude = j.at("rib_amplitude").get<double>();
    spec.noise_sigma = j.at("noise_sigma").get<double>();
    spec.lesion_prob = j.at("lesion_prob").get<double>();
    spec.annotated_fraction = j.at("annotated_fraction").get<double>();
    return spec;
}

std::vector<std::uint8_t> mask_from_pgm(const GrayImage& img, const std::string& what) {
    std::vector<std::uint8_t> mask(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (img.pixels[i] == 0.0) mask[i] = 0;
        else if (img.pixels[i] == 1.0) mask[i] = 1;
        else throw std::runtime_error(what + ": mask PGM has non-binary values");
    }
    return mask;
}

GrayImage mask_to_pgm(const std::vector<std::uint8_t>& mask, std::size_t side) {
    GrayImage img(side, side);
    for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 1.0 : 0.0;
    return img;
}

std::string sample_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%06zu", i);
    return buf;
}

}  // namespace

DatasetManifest generate_dataset(const SceneSpec& spec, std::size_t n,
                                 std::uint64_t seed, const std::string& out_dir) {
    check_spec(spec);
    if (n == 0) throw std::invalid_argument("generate_dataset: n must be positive");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("generate_dataset: cannot create " + out_dir + ": " + ec.message());

    DatasetManifest m;
    m.seed = seed;
    m.spec = spec;
    json samples = json::array();
    for (std::size_t i = 0; i < n; ++i) {
        Sample s = generate_sample(spec, seed + i);
        s.id = sample_name(i);
        const std::string img_name = s.id + "_image.pgm";
        const std::string left_name = s.id + "_left.pgm";
        const std::string right_name = s.id + "_right.pgm";
        write_pgm(s.image, (fs::path(out_dir) / img_name).string());
        write_pgm(mask_to_pgm(s.left_mask, spec.image_side), (fs::path(out_dir) / left_name).string());
        write_pgm(mask_to_pgm(s.right_mask, spec.image_side), (fs::path(out_dir) / right_name).string());
        json boxes = json::array();
        for (const Box& b : s.boxes) {
            boxes.push_back(json{{"class", b.cls}, {"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
        }
        samples.push_back(json{{"id", s.id},
                               {"image", img_name},
                               {"left_mask", left_name},
                               {"right_mask", right_name},
                               {"labels", s.labels},
                               {"lambda", s.lambda},
                               {"boxes", boxes}});
        m.samples.push_back(std::move(s));
    }
    json root{{"version", m.version}, {"seed", m.seed}, {"spec", spec_to_json(spec)}, {"samples", samples}};
    std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("generate_dataset: cannot write manifest under " + out_dir);
    out << root.dump(2) << "\n";
    if (!out) throw std::runtime_error("generate_dataset: manifest write failed under " + out_dir);
    return m;
}

DatasetManifest load_dataset(const std::string& manifest_path) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + manifest_path);
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw std::runtime_error("load_dataset: " + manifest_path + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.version = root.at("version").get<int>();
        if (m.version != 1) throw std::runtime_error("unsupported manifest version");
        m.seed = root.at("seed").get<std::uint64_t>();
        m.spec = spec_from_json(root.at("spec"));
    } catch (const json::exception& e) {
        throw std::runtime_error("load_dataset: " + manifest_path + ": " + e.what());
    }
    const fs::path dir = fs::path(manifest_path).parent_path();
    for (const json& js : root.at("samples")) {
        Sample s;
        s.id = js.at("id").get<std::string>();
        try {
            s.image = read_pgm((dir / js.at("image").get<std::string>()).string());
            s.left_mask = mask_from_pgm(read_pgm((dir / js.at("left_mask").get<std::string>()).string()),
                                        "sample " + s.id);
            s.right_mask = mask_from_pgm(read_pgm((dir / js.at("right_mask").get<std::string>()).string()),
                                         "sample " + s.id);
        } catch (const std::exception& e) {
            throw std::runtime_error("load_dataset: sample " + s.id + ": " + e.what());
        }
        s.labels = js.at("labels").get<std::vector<int>>();
        s.lambda = js.at("lambda").get<std::vector<int>>();
        for (const json& jb : js.at("boxes")) {
            Box b;
            b.cls = jb.at("class").get<std::size_t>();
            b.x0 = jb.at("x0").get<std::size_t>();
            b.y0 = jb.at("y0").get<std::size_t>();
            b.x1 = jb.at("x1").get<std::size_t>();
            b.y1 = jb.at("y1").get<std::size_t>();
            s.boxes.push_back(b);
        }
        validate_sample(s, m.spec);
        m.samples.push_back(std::move(s));
    }
    return m;
}

SampleHashes compute_sample_hashes(const Sample& s) {
    SampleHashes h;
    const GrayImage left_crop = crop_to_mask(s.image, s.left_mask);
    h.left = phash64(left_crop);
    h.left_flipped = phash64(hflip(left_crop));
    h.right = region_hash(s.image, s.right_mask);
    return h;
}

std::vector<Batch> make_batches(const std::vector<Sample>& samples,
                                std::size_t batch_size, std::uint64_t shuffle_seed) {
    if (batch_size < 2) {
        throw std::invalid_argument("make_batches: batch_size must be at least 2 "
                                    "(cross-image pairs need two samples)");
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(shuffle_seed);
    rng.shuffle(order);

    std::vector<Batch> batches;
    for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
        Batch b;
        for (std::size_t i = 0; i < batch_size; ++i) {
            const std::size_t idx = order[start + i];
            b.indices.push_back(idx);
            b.hashes.push_back(compute_sample_hashes(samples[idx]));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace gren
