#include "gren/model.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "gren/rng.hpp"

namespace gren {

namespace {

struct LayerSpec {
    std::size_t out_c, in_c, k, stride, pad;
};

// Three stride-2 blocks (128 -> 64 -> 32 -> 16, exact divisions), then a
// stride-1 context block on the 16x16 map.
constexpr LayerSpec kConvLayers[4] = {
    {8, 1, 2, 2, 0},
    {16, 8, 2, 2, 0},
    {32, 16, 2, 2, 0},
    {64, 32, 3, 1, 1},
};

Tensor kaiming_conv(Rng& rng, std::size_t out_c, std::size_t in_c, std::size_t k,
                    double gain = 1.0) {
    const std::size_t fan_in = in_c * k * k;
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> w(out_c * in_c * k * k);
    for (double& v : w) v = rng.uniform(-limit, limit);
    return Tensor::from_data({out_c, in_c, k, k}, std::move(w), true);
}

// The grid losses sum over all 256 cells, so the first optimizer steps carry
// gradients two orders of magnitude above steady state. A reduced gain on the
// head keeps that transient from blowing the weights into sigmoid saturation
// while the shared bias absorbs the initial probability drop.
constexpr double kHeadGain = 0.3;

constexpr double kNormEpsilon = 1e-8;

// Pixels arrive in [0,1]; centering them keeps the first-layer responses from
// collapsing onto the common all-positive direction.
Tensor input_tensor(const GrayImage& image, std::size_t S) {
    std::vector<double> centered(image.pixels.size());
    for (std::size_t i = 0; i < centered.size(); ++i) centered[i] = 2.0 * image.pixels[i] - 1.0;
    return Tensor::from_data({1, 1, S, S}, std::move(centered), false);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> BackboneParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
        out.emplace_back("conv" + std::to_string(i + 1) + ".weight", conv_w[i]);
        out.emplace_back("conv" + std::to_string(i + 1) + ".bias", conv_b[i]);
    }
    out.emplace_back("head1.weight", head1_w);
    out.emplace_back("head1.bias", head1_b);
    out.emplace_back("head2.weight", head2_w);
    out.emplace_back("head2.bias", head2_b);
    return out;
}

void BackboneParams::zero_grad() {
    for (auto& [name, t] : named()) {
        Tensor copy = t;
        copy.zero_grad();
    }
}

BackboneParams init_params(const ModelConfig& config, std::uint64_t seed) {
    if (config.image_side % 8 != 0) {
        throw std::invalid_argument("init_params: image_side must be divisible by 8");
    }
    if (config.num_classes == 0) {
        throw std::invalid_argument("init_params: num_classes must be positive");
    }
    Rng rng(seed);
    BackboneParams p;
    p.config = config;
    for (const LayerSpec& l : kConvLayers) {
        p.conv_w.push_back(kaiming_conv(rng, l.out_c, l.in_c, l.k));
        p.conv_b.push_back(Tensor::zeros({l.out_c}, true));
    }
    p.head1_w = kaiming_conv(rng, 32, 64, 1, kHeadGain);
    p.head1_b = Tensor::zeros({32}, true);
    p.head2_w = kaiming_conv(rng, config.num_classes, 32, 1, kHeadGain);
    p.head2_b = Tensor::zeros({config.num_classes}, true);
    return p;
}

ModelOutput forward(const BackboneParams& params, const GrayImage& image) {
    const std::size_t S = params.config.image_side;
    if (image.width != S || image.height != S) {
        throw std::invalid_argument("forward: expected a " + std::to_string(S) + "x" +
                                    std::to_string(S) + " image");
    }
    Tensor x = input_tensor(image, S);
    for (std::size_t i = 0; i < 4; ++i) {
        x = relu(conv2d(x, params.conv_w[i], params.conv_b[i], kConvLayers[i].stride,
                        kConvLayers[i].pad));
        // Per-sample RMS norm: keeps every stage at unit scale and makes the
        // block scale-invariant in its weights, so the fixed learning rate
        // stays a proportionate step as weights grow.
        x = rms_normalize(x, kNormEpsilon);
    }
    const std::size_t fs = params.config.feature_side();
    Tensor feature = reshape(x, {64, fs, fs});

    Tensor h = feature;
    if (params.config.upsample_head) h = upsample2x(h);
    const std::size_t g = params.config.grid();
    // Both grid losses sum over every cell, so their gradient carries a large
    // common-mode component; centering the head activations steers that
    // component into the biases and leaves the weights the per-cell signal.
    h = center_spatial(h);
    h = relu(conv2d(reshape(h, {1, 64, g, g}), params.head1_w, params.head1_b, 1, 0));
    h = center_spatial(reshape(h, {32, g, g}));
    h = conv2d(reshape(h, {1, 32, g, g}), params.head2_w, params.head2_b, 1, 0);
    Tensor probs = sigmoid(reshape(h, {params.config.num_classes, g, g}));
    return {feature, probs};
}

namespace {

// Shared stage walk for the gate inspectors below: hands every pre-relu
// tensor, then the final probability map, to the visitors.
void walk_gates(const BackboneParams& params, const GrayImage& image,
                const std::function<void(const Tensor&)>& on_pre,
                const std::function<void(const Tensor&)>& on_probs) {
    const std::size_t S = params.config.image_side;
    if (image.width != S || image.height != S) {
        throw std::invalid_argument("gate walk: expected a " + std::to_string(S) + "x" +
                                    std::to_string(S) + " image");
    }
    Tensor x = input_tensor(image, S);
    for (std::size_t i = 0; i < 4; ++i) {
        Tensor pre = conv2d(x, params.conv_w[i], params.conv_b[i], kConvLayers[i].stride,
                            kConvLayers[i].pad);
        on_pre(pre);
        x = rms_normalize(relu(pre), kNormEpsilon);
    }
    const std::size_t fs = params.config.feature_side();
    Tensor h = reshape(x, {64, fs, fs});
    if (params.config.upsample_head) h = upsample2x(h);
    const std::size_t g = params.config.grid();
    h = center_spatial(h);
    Tensor pre = conv2d(reshape(h, {1, 64, g, g}), params.head1_w, params.head1_b, 1, 0);
    on_pre(pre);
    h = center_spatial(reshape(relu(pre), {32, g, g}));
    h = conv2d(reshape(h, {1, 32, g, g}), params.head2_w, params.head2_b, 1, 0);
    Tensor probs = sigmoid(reshape(h, {params.config.num_classes, g, g}));
    on_probs(probs);
}

}  // namespace

double kink_margin(const BackboneParams& params, const GrayImage& image) {
    double margin = std::numeric_limits<double>::infinity();
    walk_gates(
        params, image,
        [&](const Tensor& pre) {
            for (double v : pre.data()) margin = std::min(margin, std::fabs(v));
        },
        [](const Tensor&) {});
    return margin;
}

std::uint64_t gate_signature(const BackboneParams& params, const GrayImage& image,
                             double prob_clamp) {
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) {
        throw std::invalid_argument("gate_signature: prob_clamp must be in (0, 0.5)");
    }
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the gate stream
    auto mix = [&h](std::uint64_t gate) { h = (h ^ gate) * 1099511628211ull; };
    walk_gates(
        params, image,
        [&](const Tensor& pre) {
            for (double v : pre.data()) mix(v > 0.0 ? 1 : 0);
        },
        [&](const Tensor& probs) {
            for (double p : probs.data()) mix(p < prob_clamp ? 1 : (p > 1.0 - prob_clamp ? 2 : 0));
        });
    return h;
}

std::vector<std::uint8_t> downsample_mask(const std::vector<std::uint8_t>& mask,
                                          std::size_t side, std::size_t grid) {
    if (mask.size() != side * side) throw std::invalid_argument("downsample_mask: size mismatch");
    if (grid == 0 || side % grid != 0) throw std::invalid_argument("downsample_mask: grid must divide side");
    const std::size_t cell = side / grid;
    std::vector<std::uint8_t> out(grid * grid, 0);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            if (mask[y * side + x]) out[(y / cell) * grid + (x / cell)] = 1;
        }
    }
    return out;
}

namespace {

Tensor mask_tensor(const std::vector<std::uint8_t>& mask_full, std::size_t image_side,
                   std::size_t feature_side) {
    const auto small = downsample_mask(mask_full, image_side, feature_side);
    std::vector<double> vals(small.size());
    bool any = false;
    for (std::size_t i = 0; i < small.size(); ++i) {
        vals[i] = small[i] ? 1.0 : 0.0;
        any = any || small[i];
    }
    if (!any) throw std::invalid_argument("region_embedding: mask downsamples to nothing");
    return Tensor::from_data({feature_side, feature_side}, std::move(vals), false);
}

}  // namespace

Tensor region_embedding(const Tensor& feature, const std::vector<std::uint8_t>& mask_full,
                        std::size_t image_side, double epsilon) {
    const std::size_t fs = feature.shape().at(1);
    Tensor m = mask_tensor(mask_full, image_side, fs);
    return l2_normalize(masked_avg_pool(feature, m), epsilon);
}

std::pair<Tensor, Tensor> region_embeddings(const ModelOutput& out,
                                            const std::vector<std::uint8_t>& left_mask,
                                            const std::vector<std::uint8_t>& right_mask,
                                            std::size_t image_side, double epsilon) {
    return {region_embedding(out.feature, left_mask, image_side, epsilon),
            region_embedding(out.feature, right_mask, image_side, epsilon)};
}

Tensor whole_embedding(const ModelOutput& out,
                       const std::vector<std::uint8_t>& left_mask,
                       const std::vector<std::uint8_t>& right_mask,
                       std::size_t image_side, double epsilon) {
    if (left_mask.size() != right_mask.size()) {
        throw std::invalid_argument("whole_embedding: mask size mismatch");
    }
    std::vector<std::uint8_t> joint(left_mask.size());
    for (std::size_t i = 0; i < joint.size(); ++i) {
        joint[i] = (left_mask[i] || right_mask[i]) ? 1 : 0;
    }
    return region_embedding(out.feature, joint, image_side, epsilon);
}

}  // namespace gren
