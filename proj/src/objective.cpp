#include "gren/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gren {

GridLabels rasterize_box_labels(const std::vector<Box>& boxes, std::size_t num_classes,
                                std::size_t grid, std::size_t cell_px) {
    if (grid == 0 || cell_px == 0) throw std::invalid_argument("rasterize_box_labels: bad geometry");
    const std::size_t side = grid * cell_px;
    GridLabels labels;
    labels.num_classes = num_classes;
    labels.grid = grid;
    labels.on.assign(num_classes * grid * grid, 0);
    labels.valid.assign(num_classes, 0);
    for (const Box& b : boxes) {
        if (b.cls >= num_classes) throw std::invalid_argument("rasterize_box_labels: class out of range");
        if (b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= side || b.y1 >= side) {
            throw std::invalid_argument("rasterize_box_labels: box outside the image");
        }
        labels.valid[b.cls] = 1;
        // Cells whose pixel block [c*cell, c*cell+cell-1] meets the box.
        const std::size_t col0 = b.x0 / cell_px, col1 = b.x1 / cell_px;
        const std::size_t row0 = b.y0 / cell_px, row1 = b.y1 / cell_px;
        for (std::size_t r = row0; r <= row1; ++r) {
            for (std::size_t c = col0; c <= col1; ++c) {
                labels.on[(b.cls * grid + r) * grid + c] = 1;
            }
        }
    }
    return labels;
}

namespace {

void check_probs(const Tensor& probs, std::size_t k, const char* op) {
    if (probs.shape().size() != 3) throw std::invalid_argument(std::string(op) + ": probs must be [K,G,G]");
    if (k >= probs.shape()[0]) throw std::invalid_argument(std::string(op) + ": class out of range");
}

}  // namespace

Tensor grid_bce_loss(const Tensor& probs, const GridLabels& labels, std::size_t k,
                     double prob_clamp) {
    check_probs(probs, k, "grid_bce_loss");
    if (labels.grid != probs.shape()[1] || labels.num_classes != probs.shape()[0]) {
        throw std::invalid_argument("grid_bce_loss: labels do not match the prob grid");
    }
    if (!labels.valid[k]) {
        throw std::invalid_argument("grid_bce_loss: class has no box supervision (gate on lambda)");
    }
    Tensor p = clamp(slice_channel(probs, k), prob_clamp, 1.0 - prob_clamp);
    const std::size_t g = labels.grid;
    std::vector<double> target(g * g), flip(g * g);
    for (std::size_t i = 0; i < g * g; ++i) {
        const bool on = labels.on[k * g * g + i] != 0;
        target[i] = on ? 1.0 : 0.0;
        flip[i] = on ? 0.0 : 1.0;
    }
    Tensor t = Tensor::from_data({g, g}, std::move(target), false);
    Tensor tf = Tensor::from_data({g, g}, std::move(flip), false);
    Tensor one_minus_p = offset(neg(p), 1.0);
    Tensor loss = neg(sum(t * log(p) + tf * log(one_minus_p)));
    return loss;
}

Tensor mil_loss(const Tensor& probs, std::size_t k, int label, double prob_clamp) {
    check_probs(probs, k, "mil_loss");
    if (label != 0 && label != 1) throw std::invalid_argument("mil_loss: label must be 0/1");
    Tensor p = clamp(slice_channel(probs, k), prob_clamp, 1.0 - prob_clamp);
    Tensor s = sum(log(offset(neg(p), 1.0)));  // sum_j log(1-p_j), < 0 after clamping
    if (label == 1) return neg(log1m_exp(s));
    return neg(s);
}

Tensor supervision_loss(const Tensor& probs, const Sample& sample,
                        const GridLabels& labels, const ObjectiveConfig& cfg) {
    const std::size_t K = probs.shape()[0];
    if (sample.labels.size() != K || sample.lambda.size() != K) {
        throw std::invalid_argument("supervision_loss: label vectors do not match K");
    }
    Tensor total;
    for (std::size_t k = 0; k < K; ++k) {
        Tensor term = sample.lambda[k] == 1
                          ? scale(grid_bce_loss(probs, labels, k, cfg.prob_clamp), cfg.beta)
                          : mil_loss(probs, k, sample.labels[k], cfg.prob_clamp);
        total = total.defined() ? total + term : term;
    }
    return total;
}

std::size_t pair_index(std::size_t u, std::size_t v, std::size_t n) {
    if (u >= v || v >= n) throw std::invalid_argument("pair_index: need u < v < n");
    return u * n - u * (u + 1) / 2 + (v - u - 1);
}

double intra_edge(const SampleHashes& h) {
    return hamming(h.left_flipped, h.right) / 64.0;
}

double inter_edge(const SampleHashes& a, const SampleHashes& b) {
    return (hamming(a.left, b.left) + hamming(a.right, b.right)) / 128.0;
}

EdgeSet hash_edges(const std::vector<SampleHashes>& hashes) {
    EdgeSet e;
    e.mode = EdgeMode::hash;
    const std::size_t n = hashes.size();
    for (const SampleHashes& h : hashes) e.intra.push_back(intra_edge(h));
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = u + 1; v < n; ++v) {
            e.inter.push_back(inter_edge(hashes[u], hashes[v]));
        }
    }
    return e;
}

EdgeSet cosine_edges(const std::vector<Tensor>& left_emb,
                     const std::vector<Tensor>& right_emb, double epsilon) {
    if (left_emb.size() != right_emb.size()) {
        throw std::invalid_argument("cosine_edges: left/right count mismatch");
    }
    EdgeSet e;
    e.mode = EdgeMode::cosine;
    const std::size_t n = left_emb.size();
    for (std::size_t i = 0; i < n; ++i) {
        e.intra.push_back(std::clamp(cosine_similarity(left_emb[i], right_emb[i], epsilon).item(), 0.0, 1.0));
    }
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = u + 1; v < n; ++v) {
            const double sl = cosine_similarity(left_emb[u], left_emb[v], epsilon).item();
            const double sr = cosine_similarity(right_emb[u], right_emb[v], epsilon).item();
            e.inter.push_back(std::clamp(0.5 * (sl + sr), 0.0, 1.0));
        }
    }
    return e;
}

Tensor intra_regularizer(const std::vector<double>& edges,
                         const std::vector<Tensor>& left_emb,
                         const std::vector<Tensor>& right_emb) {
    if (edges.size() != left_emb.size() || edges.size() != right_emb.size()) {
        throw std::invalid_argument("intra_regularizer: edge count must equal sample count");
    }
    Tensor acc;
    for (std::size_t i = 0; i < edges.size(); ++i) {
        Tensor term = scale(euclidean_distance(left_emb[i], right_emb[i]), -edges[i]);
        acc = acc.defined() ? acc + term : term;
    }
    if (!acc.defined()) throw std::invalid_argument("intra_regularizer: empty batch");
    return acc;
}

Tensor inter_regularizer(const std::vector<double>& pair_edges,
                         const std::vector<Tensor>& whole_emb) {
    const std::size_t n = whole_emb.size();
    if (pair_edges.size() != n * (n - 1) / 2) {
        throw std::invalid_argument("inter_regularizer: need one edge per unordered pair");
    }
    Tensor acc;
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = u + 1; v < n; ++v) {
            Tensor term = scale(euclidean_distance(whole_emb[u], whole_emb[v]),
                                -pair_edges[pair_index(u, v, n)]);
            acc = acc.defined() ? acc + term : term;
        }
    }
    if (!acc.defined()) throw std::invalid_argument("inter_regularizer: need at least two samples");
    return acc;
}

ObjectiveParts total_objective(const BackboneParams& params,
                               const std::vector<const Sample*>& batch,
                               const std::vector<SampleHashes>& hashes,
                               const ObjectiveConfig& cfg,
                               const EdgeSet* fixed_edges) {
    if (batch.size() < 2) throw std::invalid_argument("total_objective: batch size must be >= 2");
    if (cfg.edge_mode == EdgeMode::hash && hashes.size() != batch.size() && fixed_edges == nullptr) {
        throw std::invalid_argument("total_objective: need hashes for every batch sample");
    }

    const std::size_t side = params.config.image_side;
    ObjectiveParts parts;
    Tensor supervision;
    std::vector<Tensor> left_emb, right_emb, whole_emb;
    for (const Sample* s : batch) {
        ModelOutput out = forward(params, s->image);
        GridLabels labels = rasterize_box_labels(s->boxes, params.config.num_classes,
                                                 params.config.grid(), params.config.cell_px());
        Tensor l = supervision_loss(out.probs, *s, labels, cfg);
        supervision = supervision.defined() ? supervision + l : l;
        auto [fl, fr] = region_embeddings(out, s->left_mask, s->right_mask, side, cfg.embed_epsilon);
        left_emb.push_back(fl);
        right_emb.push_back(fr);
        whole_emb.push_back(whole_embedding(out, s->left_mask, s->right_mask, side, cfg.embed_epsilon));
    }

    if (fixed_edges != nullptr) {
        parts.edges = *fixed_edges;
    } else if (cfg.edge_mode == EdgeMode::hash) {
        parts.edges = hash_edges(hashes);
    } else {
        parts.edges = cosine_edges(left_emb, right_emb, cfg.embed_epsilon);
    }
    if (parts.edges.intra.size() != batch.size() ||
        parts.edges.inter.size() != batch.size() * (batch.size() - 1) / 2) {
        throw std::invalid_argument("total_objective: edge set does not match the batch");
    }

    parts.supervision = supervision;
    parts.intra_term = intra_regularizer(parts.edges.intra, left_emb, right_emb);
    parts.inter_term = inter_regularizer(parts.edges.inter, whole_emb);

    const double w_intra = cfg.edge_mode == EdgeMode::hash ? cfg.lambda1 : cfg.lambda4;
    const double w_inter = cfg.edge_mode == EdgeMode::hash ? cfg.lambda2 : cfg.lambda3;
    Tensor q = supervision;
    if (w_intra != 0.0) q = q + scale(parts.intra_term, w_intra);
    if (w_inter != 0.0) q = q + scale(parts.inter_term, w_inter);
    parts.total = q;
    return parts;
}

}  // namespace gren
