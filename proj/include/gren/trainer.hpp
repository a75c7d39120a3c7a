#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gren/model.hpp"
#include "gren/objective.hpp"
#include "gren/synthgen.hpp"

namespace gren {

struct TrainConfig {
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t epochs = 9;
    std::size_t decay_every = 4;   // epochs between lr drops
    double decay_factor = 0.1;
    std::size_t batch_size = 4;
    std::uint64_t seed = 1;
    ObjectiveConfig objective;
    ModelConfig model;
};

// lr * decay_factor^floor(epoch / decay_every)
double lr_at(std::size_t epoch, const TrainConfig& cfg);

/// Momentum buffers, ordered like BackboneParams::named().
struct OptimizerState {
    std::vector<std::vector<double>> velocity;
};

// Nesterov SGD update, applied in the order of named():
//   g <- g + weight_decay * theta
//   v <- momentum * v + g
//   theta <- theta - lr * (g + momentum * v)
void sgd_step(BackboneParams& params, OptimizerState& state, double lr,
              double momentum, double weight_decay);

struct StepRecord {
    std::size_t step = 0;   // global, 1-based
    std::size_t epoch = 0;  // 0-based
    double lr = 0.0;
    double L = 0.0;
    double D_intra = 0.0;
    double D_inter = 0.0;
    double Q = 0.0;
};

struct TrainState {
    BackboneParams params;
    OptimizerState opt;
    std::size_t epochs_done = 0;
    std::size_t steps_done = 0;
    TrainConfig config;
};

// JSON checkpoint: config echo, epochs/steps done, parameter and velocity
// arrays. Round-trips bit-exactly (doubles print in shortest form).
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

struct TrainResult {
    TrainState state;
    std::vector<StepRecord> log;
};

using StepCallback = std::function<void(const StepRecord&)>;
using EpochCallback = std::function<void(const TrainState&)>;

// Runs (epochs - state.epochs_done) epochs from the given state. Each epoch
// shuffles with seed + epoch and walks fixed-size batches; region hashes are
// computed once up front. Aborts with the step index and loss breakdown if the
// objective turns non-finite. Resuming from a saved checkpoint reproduces the
// straight-through run bit for bit.
TrainResult train(const std::vector<Sample>& samples, TrainState state,
                  const StepCallback& on_step = nullptr,
                  const EpochCallback& on_epoch = nullptr);

// Fresh state from config (model init uses config.seed).
TrainState init_train_state(const TrainConfig& cfg);

}  // namespace gren
