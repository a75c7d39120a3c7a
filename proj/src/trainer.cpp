#include "gren/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "gren/rng.hpp"
#include "json.hpp"

using nlohmann::json;

namespace gren {

namespace {

void check_config(const TrainConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (cfg.weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be nonnegative");
    if (cfg.epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be at least 1");
    if (cfg.decay_every == 0) throw std::invalid_argument("TrainConfig: decay_every must be positive");
    if (!(cfg.decay_factor > 0.0)) throw std::invalid_argument("TrainConfig: decay_factor must be positive");
    if (cfg.batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be at least 2");
    if (!(cfg.objective.beta > 0.0)) throw std::invalid_argument("TrainConfig: beta must be positive");
    if (cfg.objective.lambda1 < 0.0 || cfg.objective.lambda2 < 0.0 ||
        cfg.objective.lambda3 < 0.0 || cfg.objective.lambda4 < 0.0) {
        throw std::invalid_argument("TrainConfig: lambdas must be nonnegative");
    }
    if (!(cfg.objective.prob_clamp > 0.0) || cfg.objective.prob_clamp >= 0.5) {
        throw std::invalid_argument("TrainConfig: prob_clamp must be in (0,0.5)");
    }
}

}  // namespace

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    double f = 1.0;
    for (std::size_t i = 0; i < epoch / cfg.decay_every; ++i) f *= cfg.decay_factor;
    return cfg.lr * f;
}

void sgd_step(BackboneParams& params, OptimizerState& state, double lr,
              double momentum, double weight_decay) {
    auto named = params.named();
    if (state.velocity.size() != named.size()) {
        throw std::invalid_argument("sgd_step: velocity buffers do not match parameters");
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor& t = named[i].second;
        auto theta = t.mutable_data();
        std::vector<double>& v = state.velocity[i];
        if (v.size() != theta.size()) {
            throw std::invalid_argument("sgd_step: velocity shape mismatch for " + named[i].first);
        }
        const bool has_g = t.has_grad();
        std::span<const double> g;
        if (has_g) {
            g = t.grad();
            if (g.size() != theta.size()) {
                throw std::invalid_argument("sgd_step: gradient shape mismatch for " + named[i].first);
            }
        }
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double gj = (has_g ? g[j] : 0.0) + weight_decay * theta[j];
            v[j] = momentum * v[j] + gj;
            theta[j] -= lr * (gj + momentum * v[j]);
        }
    }
}

TrainState init_train_state(const TrainConfig& cfg) {
    check_config(cfg);
    TrainState state;
    state.config = cfg;
    state.params = init_params(cfg.model, cfg.seed);
    for (const auto& [name, t] : state.params.named()) {
        state.opt.velocity.emplace_back(t.size(), 0.0);
    }
    return state;
}

TrainResult train(const std::vector<Sample>& samples, TrainState state,
                  const StepCallback& on_step, const EpochCallback& on_epoch) {
    const TrainConfig& cfg = state.config;
    check_config(cfg);
    if (samples.empty()) throw std::invalid_argument("train: dataset is empty");
    if (samples.size() < cfg.batch_size) {
        throw std::invalid_argument("train: dataset smaller than one batch");
    }

    std::vector<SampleHashes> hashes;
    hashes.reserve(samples.size());
    for (const Sample& s : samples) hashes.push_back(compute_sample_hashes(s));

    TrainResult result;
    for (std::size_t epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(cfg.seed + epoch);
        rng.shuffle(order);

        for (std::size_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
            std::vector<const Sample*> batch;
            std::vector<SampleHashes> bh;
            for (std::size_t i = 0; i < cfg.batch_size; ++i) {
                batch.push_back(&samples[order[start + i]]);
                bh.push_back(hashes[order[start + i]]);
            }
            ObjectiveParts parts = total_objective(state.params, batch, bh, cfg.objective);
            StepRecord rec{state.steps_done + 1, epoch,    lr,
                           parts.L(),            parts.D_intra(), parts.D_inter(), parts.Q()};
            if (!std::isfinite(rec.Q)) {
                throw std::runtime_error(
                    "train: non-finite loss at step " + std::to_string(rec.step) +
                    " (L=" + std::to_string(rec.L) + ", D_intra=" + std::to_string(rec.D_intra) +
                    ", D_inter=" + std::to_string(rec.D_inter) + ")");
            }
            state.params.zero_grad();
            parts.total.backward();
            sgd_step(state.params, state.opt, lr, cfg.momentum, cfg.weight_decay);
            state.steps_done = rec.step;
            result.log.push_back(rec);
            if (on_step) on_step(rec);
        }
        state.epochs_done = epoch + 1;
        if (on_epoch) on_epoch(state);
    }
    result.state = std::move(state);
    return result;
}

// ---- checkpoint I/O --------------------------------------------------------

namespace json_cfg {

json objective_to_json(const ObjectiveConfig& o) {
    return json{{"beta", o.beta},
                {"lambda1", o.lambda1},
                {"lambda2", o.lambda2},
                {"lambda3", o.lambda3},
                {"lambda4", o.lambda4},
                {"edge_mode", o.edge_mode == EdgeMode::hash ? "hash" : "cosine"},
                {"prob_clamp", o.prob_clamp},
                {"embed_epsilon", o.embed_epsilon}};
}

ObjectiveConfig objective_from_json(const json& j) {
    ObjectiveConfig o;
    o.beta = j.at("beta").get<double>();
    o.lambda1 = j.at("lambda1").get<double>();
    o.lambda2 = j.at("lambda2").get<double>();
    o.lambda3 = j.at("lambda3").get<double>();
    o.lambda4 = j.at("lambda4").get<double>();
    const std::string mode = j.at("edge_mode").get<std::string>();
    if (mode == "hash") o.edge_mode = EdgeMode::hash;
    else if (mode == "cosine") o.edge_mode = EdgeMode::cosine;
    else throw std::runtime_error("edge_mode must be 'hash' or 'cosine'");
    o.prob_clamp = j.at("prob_clamp").get<double>();
    o.embed_epsilon = j.at("embed_epsilon").get<double>();
    return o;
}

json train_to_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"epochs", c.epochs},
                {"decay_every", c.decay_every},
                {"decay_factor", c.decay_factor},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"objective", objective_to_json(c.objective)},
                {"model", json{{"image_side", c.model.image_side},
                               {"num_classes", c.model.num_classes},
                               {"upsample_head", c.model.upsample_head}}}};
}

TrainConfig train_from_json(const json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.decay_every = j.at("decay_every").get<std::size_t>();
    c.decay_factor = j.at("decay_factor").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.objective = objective_from_json(j.at("objective"));
    const json& m = j.at("model");
    c.model.image_side = m.at("image_side").get<std::size_t>();
    c.model.num_classes = m.at("num_classes").get<std::size_t>();
    c.model.upsample_head = m.at("upsample_head").get<bool>();
    return c;
}

}  // namespace json_cfg

void save_checkpoint(const TrainState& state, const std::string& path) {
    json params = json::array();
    for (const auto& [name, t] : state.params.named()) {
        auto d = t.data();
        params.push_back(json{{"name", name},
                              {"shape", t.shape()},
                              {"data", std::vector<double>(d.begin(), d.end())}});
    }
    json root{{"version", 1},
              {"epochs_done", state.epochs_done},
              {"steps_done", state.steps_done},
              {"config", json_cfg::train_to_json(state.config)},
              {"params", params},
              {"velocity", state.opt.velocity}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << root.dump() << "\n";
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt checkpoint " + path + ": " + e.what());
    }
    try {
        if (root.at("version").get<int>() != 1) {
            throw std::runtime_error("checkpoint version mismatch");
        }
        TrainState state;
        state.config = json_cfg::train_from_json(root.at("config"));
        state.epochs_done = root.at("epochs_done").get<std::size_t>();
        state.steps_done = root.at("steps_done").get<std::size_t>();
        state.params = init_params(state.config.model, state.config.seed);
        auto named = state.params.named();
        const json& jp = root.at("params");
        if (jp.size() != named.size()) throw std::runtime_error("parameter count mismatch");
        for (std::size_t i = 0; i < named.size(); ++i) {
            const json& e = jp.at(i);
            if (e.at("name").get<std::string>() != named[i].first) {
                throw std::runtime_error("parameter name mismatch at index " + std::to_string(i));
            }
            if (e.at("shape").get<Shape>() != named[i].second.shape()) {
                throw std::runtime_error("parameter shape mismatch for " + named[i].first);
            }
            const auto vals = e.at("data").get<std::vector<double>>();
            auto dst = named[i].second.mutable_data();
            if (vals.size() != dst.size()) throw std::runtime_error("parameter size mismatch for " + named[i].first);
            std::copy(vals.begin(), vals.end(), dst.begin());
        }
        state.opt.velocity = root.at("velocity").get<std::vector<std::vector<double>>>();
        if (state.opt.velocity.size() != named.size()) throw std::runtime_error("velocity count mismatch");
        for (std::size_t i = 0; i < named.size(); ++i) {
            if (state.opt.velocity[i].size() != named[i].second.size()) {
                throw std::runtime_error("velocity shape mismatch for " + named[i].first);
            }
        }
        return state;
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt checkpoint " + path + ": " + e.what());
    }
}

}  // namespace gren
