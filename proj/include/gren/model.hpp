#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gren/image.hpp"
#include "gren/tensor.hpp"

namespace gren {

struct ModelConfig {
    std::size_t image_side = 128;
    std::size_t num_classes = 2;
    bool upsample_head = false;  // run the head on a 2x-upsampled feature map

    std::size_t feature_side() const { return image_side / 8; }
    std::size_t grid() const { return feature_side() * (upsample_head ? 2 : 1); }
    std::size_t cell_px() const { return image_side / grid(); }
};

/// Small conv backbone: three 2x2/stride-2 blocks take the input from
/// image_side to image_side/8, a 3x3/stride-1 block mixes neighbour context,
/// then a 1x1 bottleneck and a 1x1 classifier head end in a per-cell sigmoid.
/// Channels 1 -> 8 -> 16 -> 32 -> 64 -> 32 -> num_classes.
struct BackboneParams {
    ModelConfig config;
    std::vector<Tensor> conv_w;  // 4 entries
    std::vector<Tensor> conv_b;
    Tensor head1_w, head1_b;     // 1x1, 64 -> 32
    Tensor head2_w, head2_b;     // 1x1, 32 -> num_classes

    // Stable (name, leaf) order shared by the optimizer and checkpoints.
    std::vector<std::pair<std::string, Tensor>> named() const;
    void zero_grad();
};

// Kaiming-uniform weights (limit sqrt(6/fan_in)), zero biases; pure in seed.
BackboneParams init_params(const ModelConfig& config, std::uint64_t seed);

struct ModelOutput {
    Tensor feature;  // [64, side/8, side/8], pre-upsample
    Tensor probs;    // [num_classes, grid, grid], strictly inside (0,1)
};

ModelOutput forward(const BackboneParams& params, const GrayImage& image);

// Smallest |pre-relu activation| across every relu in the forward pass.
// Finite differences on the parameters are only trustworthy when this is
// comfortably larger than the probe step (a step can flip a relu gate that
// sits closer to its kink than the induced pre-activation shift).
double kink_margin(const BackboneParams& params, const GrayImage& image);

// Hash of every discrete gate the forward pass applies at these parameters:
// one bit per relu unit (pre-activation > 0) and a trit per output
// probability (below/inside/above the [clamp, 1-clamp] band). Two parameter
// points with equal signatures lie in the same linear region of every gate,
// so a finite difference between them estimates a true derivative.
std::uint64_t gate_signature(const BackboneParams& params, const GrayImage& image,
                             double prob_clamp);

// Full-resolution {0,1} mask -> feature-resolution mask: a cell is on iff any
// pixel it covers is on (max-pooling, so thin regions never vanish).
std::vector<std::uint8_t> downsample_mask(const std::vector<std::uint8_t>& mask,
                                          std::size_t side, std::size_t grid);

// L2-normalized masked average pool of the feature map over the downsampled
// mask. Differentiable w.r.t. the feature; throws if the mask downsamples to
// nothing.
Tensor region_embedding(const Tensor& feature, const std::vector<std::uint8_t>& mask_full,
                        std::size_t image_side, double epsilon = 1e-12);

std::pair<Tensor, Tensor> region_embeddings(const ModelOutput& out,
                                            const std::vector<std::uint8_t>& left_mask,
                                            const std::vector<std::uint8_t>& right_mask,
                                            std::size_t image_side, double epsilon = 1e-12);

// Embedding over the union of both lung masks.
Tensor whole_embedding(const ModelOutput& out,
                       const std::vector<std::uint8_t>& left_mask,
                       const std::vector<std::uint8_t>& right_mask,
                       std::size_t image_side, double epsilon = 1e-12);

}  // namespace gren
