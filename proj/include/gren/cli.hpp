#pragma once

#include <cstdint>
#include <vector>

#include "gren/model.hpp"
#include "gren/synthgen.hpp"

namespace gren::cli {

// Entry point behind main(). Exit codes: 0 success, 1 usage or config
// error, 2 runtime failure (I/O errors, or a requested check not passing).
int run(int argc, const char* const* argv);

// Small scene the gradient audit runs on: fast to render and forward, and
// small enough that kink-safe samples (see below) are plentiful.
SceneSpec gradcheck_scene();

// Two-sample batch for the gradient check, scanned deterministically from
// `seed` so every supervision branch is exercised: the first sample is fully
// annotated with labels [1,0] (grid-supervised class plus a negative bag),
// the second unannotated with class 1 present (positive bag).
//
// When `params` is given, candidates are additionally required to keep every
// relu pre-activation at least `min_margin` away from its kink — central
// differences silently go wrong on inputs that park a gate within a probe
// step of zero, so the audit must run at a point where the objective is
// locally smooth.
std::vector<Sample> gradcheck_batch(const SceneSpec& scene, std::uint64_t seed,
                                    const BackboneParams* params = nullptr,
                                    double min_margin = 0.0);

}  // namespace gren::cli
