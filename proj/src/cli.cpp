#include "gren/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "gren/evalkit.hpp"
#include "gren/model.hpp"
#include "gren/objective.hpp"
#include "gren/phash.hpp"
#include "gren/runconfig.hpp"
#include "gren/synthgen.hpp"
#include "gren/tensor.hpp"
#include "gren/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gren::cli {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open config " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << bytes;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

fs::path resolve(const std::string& path, const fs::path& base) {
    fs::path p(path);
    return p.is_absolute() ? p : base / p;
}

struct CommonOpts {
    std::string config;
    std::string out = ".";
    std::uint64_t seed_raw = 0;
    std::string ablation_raw;
    std::string edge_raw;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> ablation;
    std::optional<std::string> edge_mode;

    // CLI11 binds the raw fields; pick up only the flags actually given.
    void finalize(const CLI::App* cmd) {
        const auto* s = cmd->get_option_no_throw("--seed");
        if (s && s->count()) seed = seed_raw;
        const auto* a = cmd->get_option_no_throw("--ablation");
        if (a && a->count()) ablation = ablation_raw;
        const auto* e = cmd->get_option_no_throw("--edge-mode");
        if (e && e->count()) edge_mode = edge_raw;
    }
};

// Loads the config (the built-in template when --config is absent) with CLI
// overrides applied, and echoes the verbatim config bytes into out_dir.
RunConfig load_effective_config(const CommonOpts& o, bool echo) {
    const std::string text = o.config.empty() ? default_run_config_json() : read_file(o.config);
    RunConfig rc = parse_run_config(text);
    if (o.seed) {
        rc.data_seed = *o.seed;
        rc.eval_seed = *o.seed + 500000;
        rc.train.seed = *o.seed;
    }
    if (o.ablation) {
        apply_ablation(*o.ablation, rc.train.objective);
        rc.ablation = *o.ablation;
    }
    if (o.edge_mode) {
        if (*o.edge_mode == "hash") rc.train.objective.edge_mode = EdgeMode::hash;
        else if (*o.edge_mode == "cosine") rc.train.objective.edge_mode = EdgeMode::cosine;
        else throw std::invalid_argument("--edge-mode must be hash or cosine");
    }
    if (echo) {
        fs::create_directories(o.out);
        write_file(fs::path(o.out) / "config.json", text);
    }
    return rc;
}

fs::path split_dir(const std::string& manifest, const char* field, const fs::path& out) {
    fs::path p(manifest);
    if (p.filename() != "manifest.json") {
        throw std::invalid_argument(std::string("config field data.") + field +
                                    ": must end in manifest.json");
    }
    return resolve(manifest, out).parent_path();
}

int cmd_gen_data(const CommonOpts& o) {
    RunConfig rc = load_effective_config(o, /*echo=*/true);
    const fs::path out(o.out);

    const fs::path train_dir = split_dir(rc.manifest, "manifest", out);
    fs::create_directories(train_dir);
    generate_dataset(rc.scene, rc.data_n, rc.data_seed, train_dir.string());
    std::cout << (train_dir / "manifest.json").string() << "\n";

    SceneSpec eval_scene = rc.scene;
    eval_scene.annotated_fraction = 1.0;  // evaluation needs every box
    const fs::path eval_dir = split_dir(rc.eval_manifest, "eval_manifest", out);
    fs::create_directories(eval_dir);
    generate_dataset(eval_scene, rc.eval_n, rc.eval_seed, eval_dir.string());
    std::cout << (eval_dir / "manifest.json").string() << "\n";
    return 0;
}

int cmd_hash(const std::string& image_path, const std::string& mask_path) {
    const GrayImage img = read_pgm(image_path);
    HashCode h;
    if (mask_path.empty()) {
        h = phash64(img);
    } else {
        const GrayImage m = read_pgm(mask_path);
        if (m.width != img.width || m.height != img.height) {
            throw std::runtime_error("mask geometry does not match image");
        }
        std::vector<std::uint8_t> mask(m.pixels.size());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = m.pixels[i] > 0.5 ? 1 : 0;
        h = region_hash(img, mask);
    }
    std::cout << hash_hex(h) << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o) {
    RunConfig rc = load_effective_config(o, /*echo=*/true);
    const fs::path out(o.out);
    const fs::path ckpt_dir = out / "checkpoints";
    fs::create_directories(ckpt_dir);

    DatasetManifest data = load_dataset(resolve(rc.manifest, out).string());
    rc.train.model.image_side = data.spec.image_side;
    rc.train.model.num_classes = data.spec.num_classes;

    const fs::path log_path = out / "train_log.jsonl";
    std::ofstream log(log_path, std::ios::binary);
    if (!log) throw std::runtime_error("cannot write " + log_path.string());

    TrainState state = init_train_state(rc.train);
    auto on_step = [&](const StepRecord& r) {
        log << json{{"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr},       {"L", r.L},
                    {"D_intra", r.D_intra},               {"D_inter", r.D_inter}, {"Q", r.Q}}
                   .dump()
            << "\n";
    };
    auto on_epoch = [&](const TrainState& s) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%02zu.json", s.epochs_done);
        save_checkpoint(s, (ckpt_dir / name).string());
    };
    TrainResult result = train(data.samples, std::move(state), on_step, on_epoch);
    log.flush();
    if (!log) throw std::runtime_error("write failed for " + log_path.string());

    char last[32];
    std::snprintf(last, sizeof(last), "epoch_%02zu.json", result.state.epochs_done);
    std::cout << "trained " << result.state.steps_done << " steps over "
              << result.state.epochs_done << " epochs\n"
              << "log:        " << log_path.string() << "\n"
              << "checkpoint: " << (ckpt_dir / last).string() << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint, const std::string& manifest) {
    RunConfig rc = load_effective_config(o, /*echo=*/true);
    const fs::path out(o.out);

    TrainState state = load_checkpoint(checkpoint);
    const std::string mpath = manifest.empty() ? rc.eval_manifest : manifest;
    DatasetManifest data = load_dataset(resolve(mpath, out).string());
    if (data.spec.image_side != state.config.model.image_side ||
        data.spec.num_classes != state.config.model.num_classes) {
        throw std::runtime_error("checkpoint geometry does not match dataset " + mpath);
    }

    MetricsReport rep = evaluate(state.params, data.samples, rc.iou_thresholds,
                                 rc.grid_threshold, rc.train.objective.prob_clamp);
    write_report_json(rep, (out / "report.json").string());
    write_report_csv(rep, (out / "report.csv").string());
    std::cout << format_report_table(rep);
    std::cout << "report: " << (out / "report.json").string() << "\n";
    return 0;
}

int cmd_gradcheck(const CommonOpts& o) {
    RunConfig rc = load_effective_config(o, /*echo=*/false);
    const std::uint64_t seed = o.seed ? *o.seed : rc.train.seed;

    const SceneSpec scene = gradcheck_scene();
    ModelConfig mc;
    mc.image_side = scene.image_side;
    mc.num_classes = scene.num_classes;
    mc.upsample_head = rc.train.model.upsample_head;
    BackboneParams params = init_params(mc, seed);

    GradCheckOptions opts;
    opts.coord_seed ^= seed;
    opts.certify_rel = 1e-4;  // matches the pass threshold below
    // A probe shifts pre-activations by roughly step times the incoming
    // activation scale (exactly step for a bias), so prefer samples with a
    // few steps of headroom; gates that still flip under an unusually
    // high-gain probe are caught per coordinate by the signature below.
    const std::vector<Sample> batch = gradcheck_batch(scene, seed, &params, 3.0 * opts.step);
    std::vector<const Sample*> ptrs;
    std::vector<SampleHashes> hashes;
    for (const Sample& s : batch) {
        ptrs.push_back(&s);
        hashes.push_back(compute_sample_hashes(s));
    }

    const ObjectiveConfig& oc = rc.train.objective;
    // Edges are constants to the optimizer (hash edges by construction, cosine
    // edges detached), so the finite-difference probe must hold them fixed too.
    const EdgeSet frozen = total_objective(params, ptrs, hashes, oc).edges;

    struct Row {
        const char* name;
        std::function<Tensor()> fn;
    };
    const Row rows[] = {
        {"L", [&] { return total_objective(params, ptrs, hashes, oc, &frozen).supervision; }},
        {"D_intra", [&] { return total_objective(params, ptrs, hashes, oc, &frozen).intra_term; }},
        {"D_inter", [&] { return total_objective(params, ptrs, hashes, oc, &frozen).inter_term; }},
        {"Q", [&] { return total_objective(params, ptrs, hashes, oc, &frozen).total; }},
    };

    double kink = std::numeric_limits<double>::infinity();
    for (const Sample& s : batch) kink = std::min(kink, kink_margin(params, s.image));
    std::printf("toy batch: %zux%zu, kink margin %.2e (probe step %.0e)\n", scene.image_side,
                scene.image_side, kink, opts.step);

    opts.gate_signature = [&] {
        std::uint64_t h = 1469598103934665603ull;
        for (const Sample& s : batch) {
            h = (h ^ gate_signature(params, s.image, oc.prob_clamp)) * 1099511628211ull;
        }
        return h;
    };

    double overall = 0.0;
    std::size_t skipped = 0;
    std::printf("component     max_rel_err   coords  skipped  worst\n");
    json breakdown = json::array();
    for (const Row& row : rows) {
        const GradCheckReport rep = grad_check(row.fn, params.named(), opts);
        overall = std::max(overall, rep.max_rel_error);
        skipped += rep.coords_skipped;
        std::printf("%-12s  %11.3e  %6zu  %7zu  %s[%zu] analytic=%.6e numeric=%.6e\n", row.name,
                    rep.max_rel_error, rep.coords_checked, rep.coords_skipped,
                    rep.worst_param.c_str(), rep.worst_coord, rep.worst_analytic,
                    rep.worst_numeric);
        breakdown.push_back(json{{"component", row.name},
                                 {"max_rel_error", rep.max_rel_error},
                                 {"coords_checked", rep.coords_checked},
                                 {"coords_skipped", rep.coords_skipped},
                                 {"worst_param", rep.worst_param},
                                 {"worst_coord", rep.worst_coord},
                                 {"worst_analytic", rep.worst_analytic},
                                 {"worst_numeric", rep.worst_numeric}});
    }
    if (skipped > 0) {
        std::printf("note: %zu probe(s) crossed a relu/clamp gate and were skipped; the central\n"
                    "difference is not a derivative estimate across a gate flip\n",
                    skipped);
    }
    const bool pass = overall < 1e-4;
    std::printf("max relative error %.3e (threshold 1e-4): %s\n", overall,
                pass ? "PASS" : "FAIL");
    if (!o.out.empty() && o.out != ".") {
        fs::create_directories(o.out);
        json root{{"components", breakdown},
                  {"max_rel_error", overall},
                  {"kink_margin", kink},
                  {"pass", pass}};
        write_file(fs::path(o.out) / "gradcheck.json", root.dump(2) + "\n");
    }
    return pass ? 0 : 2;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_lambda_flags = true) {
    cmd->add_option("--config", o.config, "run config JSON (built-in defaults when absent)");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--seed", o.seed_raw, "override the config seeds");
    if (with_lambda_flags) {
        cmd->add_option("--ablation", o.ablation_raw, "baseline | intra | inter | both")
            ->check(CLI::IsMember({"baseline", "intra", "inter", "both"}));
        cmd->add_option("--edge-mode", o.edge_raw, "hash | cosine")
            ->check(CLI::IsMember({"hash", "cosine"}));
    }
}

}  // namespace

SceneSpec gradcheck_scene() {
    SceneSpec scene;
    scene.image_side = 64;
    scene.num_classes = 2;
    scene.lesion_radius_lo = 3.0;  // scaled to the 64px lung fields
    scene.lesion_radius_hi = 6.0;
    return scene;
}

std::vector<Sample> gradcheck_batch(const SceneSpec& scene, std::uint64_t seed,
                                    const BackboneParams* params, double min_margin) {
    SceneSpec annotated = scene;
    annotated.annotated_fraction = 1.0;
    SceneSpec weak = scene;
    weak.annotated_fraction = 0.0;

    auto margin_ok = [&](const Sample& s) {
        return params == nullptr || kink_margin(*params, s.image) > min_margin;
    };

    std::optional<Sample> a, b;
    for (std::uint64_t s = seed; s < seed + 10000 && !a; ++s) {
        Sample c = generate_sample(annotated, s);
        if (c.labels == std::vector<int>{1, 0} && margin_ok(c)) a = std::move(c);
    }
    for (std::uint64_t s = seed + 10000; s < seed + 20000 && !b; ++s) {
        Sample c = generate_sample(weak, s);
        if (c.labels[1] == 1 && margin_ok(c)) b = std::move(c);
    }
    if (!a || !b) throw std::runtime_error("gradcheck_batch: no suitable samples near seed");
    return {std::move(*a), std::move(*b)};
}

int run(int argc, const char* const* argv) {
    CLI::App app{"weakly supervised lesion localization toolkit"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, grad_o;
    std::string hash_image, hash_mask, eval_checkpoint, eval_manifest;

    CLI::App* gen = app.add_subcommand("gen-data", "render both dataset splits");
    add_common(gen, gen_o, /*with_lambda_flags=*/false);

    CLI::App* hash = app.add_subcommand("hash", "print an image's 64-bit perceptual hash");
    hash->add_option("image", hash_image, "PGM image")->required();
    hash->add_option("--mask", hash_mask, "PGM mask; hash only the masked region");

    CLI::App* tr = app.add_subcommand("train", "train from a generated dataset");
    add_common(tr, train_o);

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev, eval_o);
    ev->add_option("--checkpoint", eval_checkpoint, "checkpoint JSON")->required();
    ev->add_option("--manifest", eval_manifest, "override the config's eval manifest");

    CLI::App* gc = app.add_subcommand(
        "gradcheck", "finite-difference audit of the gradients on a built-in toy batch");
    add_common(gc, grad_o);

    try {
        app.parse(argc, argv);
        gen_o.finalize(gen);
        train_o.finalize(tr);
        eval_o.finalize(ev);
        grad_o.finalize(gc);
        if (gen->parsed()) return cmd_gen_data(gen_o);
        if (hash->parsed()) return cmd_hash(hash_image, hash_mask);
        if (tr->parsed()) return cmd_train(train_o);
        if (ev->parsed()) return cmd_eval(eval_o, eval_checkpoint, eval_manifest);
        if (gc->parsed()) return cmd_gradcheck(grad_o);
        return 1;
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help and friends
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace gren::cli
