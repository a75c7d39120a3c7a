#pragma once

#include <optional>
#include <string>

#include "gren/evalkit.hpp"
#include "gren/synthgen.hpp"
#include "gren/trainer.hpp"

namespace gren {

/// Everything a run needs, parsed from one JSON file. Unknown keys and
/// ill-typed values are rejected with the offending field's path in the
/// message. The ablation switch and explicit lambda1/lambda2 values are
/// mutually exclusive.
struct RunConfig {
    SceneSpec scene;
    std::size_t data_n = 600;              // training split size
    std::size_t eval_n = 200;              // evaluation split size (all boxes kept)
    std::uint64_t data_seed = 2024;
    std::uint64_t eval_seed = 502024;      // must not overlap [data_seed, data_seed+data_n)
    std::string manifest = "data/train/manifest.json";
    std::string eval_manifest = "data/eval/manifest.json";
    TrainConfig train;
    std::vector<double> iou_thresholds = {0.5, 0.7};
    double grid_threshold = 0.5;
    std::optional<std::string> ablation;  // baseline | intra | inter | both
};

// Maps the ablation name onto (lambda1, lambda2):
// baseline (0,0), intra (0.11,0), inter (0,0.15), both (0.11,0.15).
// The cosine-variant weights follow the same on/off pattern (lambda4 with
// intra, lambda3 with inter, 0.15 when on).
void apply_ablation(const std::string& name, ObjectiveConfig& cfg);

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

std::string default_run_config_json();  // documented template, parseable

}  // namespace gren
