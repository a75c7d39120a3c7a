#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gren/model.hpp"
#include "gren/synthgen.hpp"
#include "gren/tensor.hpp"

namespace gren {

enum class EdgeMode { hash, cosine };

struct ObjectiveConfig {
    double beta = 4.0;           // weight of grid-supervised BCE
    double lambda1 = 0.11;       // intra-image (left/right) term
    double lambda2 = 0.15;       // inter-image term
    double lambda3 = 0.15;       // inter term, cosine edges
    double lambda4 = 0.15;       // intra term, cosine edges
    EdgeMode edge_mode = EdgeMode::hash;
    double prob_clamp = 1e-6;    // probabilities clamped to [eps, 1-eps]
    double embed_epsilon = 1e-12;
};

/// Per-cell binary targets for every class, grid x grid, row-major. valid[k]
/// records whether class k has any box; classes without boxes have all-zero
/// targets and must not be scored with grid_bce_loss.
struct GridLabels {
    std::size_t num_classes = 0;
    std::size_t grid = 0;
    std::vector<std::uint8_t> on;     // num_classes * grid * grid
    std::vector<std::uint8_t> valid;  // num_classes

    std::uint8_t at(std::size_t k, std::size_t row, std::size_t col) const {
        return on[(k * grid + row) * grid + col];
    }
};

// Cell (row, col) is positive for class k iff its cell_px x cell_px pixel
// block intersects any class-k box (partial coverage counts). Boxes must lie
// inside the grid * cell_px square.
GridLabels rasterize_box_labels(const std::vector<Box>& boxes, std::size_t num_classes,
                                std::size_t grid, std::size_t cell_px);

// -sum_cells [t*log(p) + (1-t)*log(1-p)] over channel k, p clamped.
Tensor grid_bce_loss(const Tensor& probs, const GridLabels& labels, std::size_t k,
                     double prob_clamp);

// Bag-level loss in log space: with S = sum_j log(1-p_j),
// positive bags contribute -log(1-exp(S)), negative bags -S.
Tensor mil_loss(const Tensor& probs, std::size_t k, int label, double prob_clamp);

// Full supervision term for one sample: per class, beta-weighted grid BCE when
// the sample carries boxes (lambda^k = 1), bag-level loss otherwise.
Tensor supervision_loss(const Tensor& probs, const Sample& sample,
                        const GridLabels& labels, const ObjectiveConfig& cfg);

/// Graph weights for one batch. Plain numbers in both modes: hash edges are
/// constants by construction, cosine edges are detached from the graph.
struct EdgeSet {
    EdgeMode mode = EdgeMode::hash;
    std::vector<double> intra;  // one per sample
    std::vector<double> inter;  // unordered pairs u<v, see pair_index
};

std::size_t pair_index(std::size_t u, std::size_t v, std::size_t n);

// Normalized hash distances: intra = hamming(left_flipped, right)/64,
// inter = (hamming of lefts + hamming of rights)/128.
double intra_edge(const SampleHashes& h);
double inter_edge(const SampleHashes& a, const SampleHashes& b);
EdgeSet hash_edges(const std::vector<SampleHashes>& hashes);

// Cosine variant: edges are cosine similarities (clamped to [0,1]) between
// the current region embeddings, read out as constants.
EdgeSet cosine_edges(const std::vector<Tensor>& left_emb,
                     const std::vector<Tensor>& right_emb, double epsilon);

// -sum_i e_i * ||f_i^l - f_i^r||2
Tensor intra_regularizer(const std::vector<double>& edges,
                         const std::vector<Tensor>& left_emb,
                         const std::vector<Tensor>& right_emb);

// -sum_{u<v} e_uv * ||f_u - f_v||2 over whole-lung embeddings.
Tensor inter_regularizer(const std::vector<double>& pair_edges,
                         const std::vector<Tensor>& whole_emb);

struct ObjectiveParts {
    Tensor total;        // the node backward() runs on
    Tensor supervision;  // L
    Tensor intra_term;   // D values are informational for lambda = 0 runs
    Tensor inter_term;
    EdgeSet edges;

    double L() const { return supervision.item(); }
    double D_intra() const { return intra_term.item(); }
    double D_inter() const { return inter_term.item(); }
    double Q() const { return total.item(); }
};

/// Forward pass + full objective for one batch. Weighted regularizer terms are
/// added to the total only for nonzero lambdas, so a lambda1 = lambda2 = 0 run
/// has total == supervision exactly (same node). When fixed_edges is given it
/// overrides edge computation (gradient checking freezes edges this way, since
/// the optimizer's own gradient treats them as constants).
ObjectiveParts total_objective(const BackboneParams& params,
                               const std::vector<const Sample*>& batch,
                               const std::vector<SampleHashes>& hashes,
                               const ObjectiveConfig& cfg,
                               const EdgeSet* fixed_edges = nullptr);

}  // namespace gren
