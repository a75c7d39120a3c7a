#include "gren/runconfig.hpp"

#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include "json.hpp"

using nlohmann::json;

namespace gren {

namespace {

[[noreturn]] void bad_field(const std::string& path, const std::string& why) {
    throw std::invalid_argument("config field " + path + ": " + why);
}

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) bad_field(path.empty() ? "<root>" : path, "expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) bad_field(path.empty() ? key : path + "." + key, "unknown key");
    }
}

template <typename T>
void take(const json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        bad_field(path + key, "wrong type");
    }
}

void take_range(const json& obj, const std::string& path, const char* key,
                double& lo, double& hi) {
    if (!obj.contains(key)) return;
    std::vector<double> v;
    try {
        v = obj.at(key).get<std::vector<double>>();
    } catch (const json::exception&) {
        bad_field(path + key, "wrong type");
    }
    if (v.size() != 2) bad_field(path + key, "expected [lo, hi]");
    lo = v[0];
    hi = v[1];
}

void parse_scene(const json& j, SceneSpec& s) {
    check_keys(j, "scene",
               {"image_side", "num_classes", "lesion_radius_range", "lesion_contrast_range",
                "rib_amplitude", "noise_sigma", "lesion_prob", "annotated_fraction"});
    take(j, "scene.", "image_side", s.image_side);
    take(j, "scene.", "num_classes", s.num_classes);
    take_range(j, "scene.", "lesion_radius_range", s.lesion_radius_lo, s.lesion_radius_hi);
    take_range(j, "scene.", "lesion_contrast_range", s.lesion_contrast_lo, s.lesion_contrast_hi);
    take(j, "scene.", "rib_amplitude", s.rib_amplitude);
    take(j, "scene.", "noise_sigma", s.noise_sigma);
    take(j, "scene.", "lesion_prob", s.lesion_prob);
    take(j, "scene.", "annotated_fraction", s.annotated_fraction);
}

// Returns whether any lambda key was given explicitly (conflicts with ablation).
bool parse_objective(const json& j, ObjectiveConfig& o) {
    check_keys(j, "train.objective",
               {"beta", "lambda1", "lambda2", "lambda3", "lambda4", "edge_mode", "prob_clamp",
                "embed_epsilon"});
    const std::string path = "train.objective.";
    take(j, path, "beta", o.beta);
    take(j, path, "lambda1", o.lambda1);
    take(j, path, "lambda2", o.lambda2);
    take(j, path, "lambda3", o.lambda3);
    take(j, path, "lambda4", o.lambda4);
    if (j.contains("edge_mode")) {
        std::string mode;
        take(j, path, "edge_mode", mode);
        if (mode == "hash") o.edge_mode = EdgeMode::hash;
        else if (mode == "cosine") o.edge_mode = EdgeMode::cosine;
        else bad_field(path + "edge_mode", "must be \"hash\" or \"cosine\"");
    }
    take(j, path, "prob_clamp", o.prob_clamp);
    take(j, path, "embed_epsilon", o.embed_epsilon);
    return j.contains("lambda1") || j.contains("lambda2") || j.contains("lambda3") ||
           j.contains("lambda4");
}

bool parse_train(const json& j, TrainConfig& t) {
    check_keys(j, "train",
               {"lr", "momentum", "weight_decay", "epochs", "decay_every", "decay_factor",
                "batch_size", "seed", "objective", "upsample_head"});
    take(j, "train.", "lr", t.lr);
    take(j, "train.", "momentum", t.momentum);
    take(j, "train.", "weight_decay", t.weight_decay);
    take(j, "train.", "epochs", t.epochs);
    take(j, "train.", "decay_every", t.decay_every);
    take(j, "train.", "decay_factor", t.decay_factor);
    take(j, "train.", "batch_size", t.batch_size);
    take(j, "train.", "seed", t.seed);
    take(j, "train.", "upsample_head", t.model.upsample_head);
    bool explicit_lambda = false;
    if (j.contains("objective")) explicit_lambda = parse_objective(j.at("objective"), t.objective);
    return explicit_lambda;
}

}  // namespace

void apply_ablation(const std::string& name, ObjectiveConfig& cfg) {
    bool intra = false, inter = false;
    if (name == "baseline") {
    } else if (name == "intra") {
        intra = true;
    } else if (name == "inter") {
        inter = true;
    } else if (name == "both") {
        intra = inter = true;
    } else {
        throw std::invalid_argument(
            "ablation must be one of baseline, intra, inter, both (got \"" + name + "\")");
    }
    cfg.lambda1 = intra ? 0.11 : 0.0;
    cfg.lambda2 = inter ? 0.15 : 0.0;
    cfg.lambda4 = intra ? 0.15 : 0.0;
    cfg.lambda3 = inter ? 0.15 : 0.0;
}

RunConfig parse_run_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(root, "", {"scene", "data", "train", "eval", "ablation"});

    RunConfig rc;
    if (root.contains("scene")) parse_scene(root.at("scene"), rc.scene);
    if (root.contains("data")) {
        const json& d = root.at("data");
        check_keys(d, "data", {"n", "eval_n", "seed", "eval_seed", "manifest", "eval_manifest"});
        take(d, "data.", "n", rc.data_n);
        take(d, "data.", "eval_n", rc.eval_n);
        take(d, "data.", "seed", rc.data_seed);
        take(d, "data.", "eval_seed", rc.eval_seed);
        take(d, "data.", "manifest", rc.manifest);
        take(d, "data.", "eval_manifest", rc.eval_manifest);
    }
    bool explicit_lambda = false;
    if (root.contains("train")) explicit_lambda = parse_train(root.at("train"), rc.train);
    if (root.contains("eval")) {
        const json& e = root.at("eval");
        check_keys(e, "eval", {"iou_thresholds", "grid_threshold"});
        take(e, "eval.", "iou_thresholds", rc.iou_thresholds);
        take(e, "eval.", "grid_threshold", rc.grid_threshold);
    }
    if (root.contains("ablation")) {
        std::string name;
        take(root, "", "ablation", name);
        if (explicit_lambda) {
            bad_field("ablation", "conflicts with explicit train.objective.lambda* values");
        }
        apply_ablation(name, rc.train.objective);  // validates the name
        rc.ablation = name;
    }

    if (rc.scene.image_side == 0 || rc.scene.image_side % 8 != 0) {
        bad_field("scene.image_side", "must be a positive multiple of 8");
    }
    if (rc.scene.num_classes == 0) bad_field("scene.num_classes", "must be at least 1");
    if (rc.iou_thresholds.empty()) bad_field("eval.iou_thresholds", "must be nonempty");
    for (double t : rc.iou_thresholds) {
        if (!(t > 0.0 && t < 1.0)) bad_field("eval.iou_thresholds", "entries must be in (0,1)");
    }
    if (!(rc.grid_threshold > 0.0 && rc.grid_threshold < 1.0)) {
        bad_field("eval.grid_threshold", "must be in (0,1)");
    }
    rc.train.model.image_side = rc.scene.image_side;
    rc.train.model.num_classes = rc.scene.num_classes;
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

std::string default_run_config_json() {
    return R"({
  "scene": {
    "image_side": 128,
    "num_classes": 2,
    "lesion_radius_range": [8.0, 14.0],
    "lesion_contrast_range": [0.30, 0.45],
    "rib_amplitude": 0.05,
    "noise_sigma": 0.012,
    "lesion_prob": 0.5,
    "annotated_fraction": 0.2
  },
  "data": {
    "n": 600,
    "eval_n": 200,
    "seed": 2024,
    "eval_seed": 502024,
    "manifest": "data/train/manifest.json",
    "eval_manifest": "data/eval/manifest.json"
  },
  "train": {
    "lr": 0.001,
    "momentum": 0.9,
    "weight_decay": 0.0001,
    "epochs": 9,
    "decay_every": 4,
    "decay_factor": 0.1,
    "batch_size": 4,
    "seed": 1,
    "upsample_head": false,
    "objective": {
      "beta": 4.0,
      "lambda1": 0.11,
      "lambda2": 0.15,
      "lambda3": 0.15,
      "lambda4": 0.15,
      "edge_mode": "hash",
      "prob_clamp": 1e-06,
      "embed_epsilon": 1e-12
    }
  },
  "eval": {
    "iou_thresholds": [0.5, 0.7],
    "grid_threshold": 0.5
  }
}
)";
}

}  // namespace gren
