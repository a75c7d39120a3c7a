#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gren/image.hpp"
#include "gren/phash.hpp"

namespace gren {

/// Knobs for the synthetic chest-like scene generator.
struct SceneSpec {
    std::size_t image_side = 128;
    std::size_t num_classes = 2;
    double lesion_radius_lo = 8.0;   // pixels
    double lesion_radius_hi = 14.0;
    double lesion_contrast_lo = 0.30;
    double lesion_contrast_hi = 0.45;
    double rib_amplitude = 0.05;
    double noise_sigma = 0.012;
    double lesion_prob = 0.5;        // per-class presence probability
    double annotated_fraction = 0.2; // per-sample box-annotation probability
};

struct Box {
    std::size_t cls = 0;
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel coords

    bool operator==(const Box&) const = default;
};

struct Sample {
    std::string id;
    GrayImage image;                       // 8-bit-quantized values
    std::vector<std::uint8_t> left_mask;   // side*side, {0,1}
    std::vector<std::uint8_t> right_mask;
    std::vector<int> labels;               // y^k, length num_classes
    std::vector<int> lambda;               // annotation flags, lambda^k <= y^k
    std::vector<Box> boxes;                // present exactly for lambda^k == 1
};

// Pure function of (spec, seed): renders lungs, ribs, optional per-class
// lesions, additive noise, quantizes to the 1/255 grid, and derives labels,
// boxes and the annotation flags. Class 0 lesions are bright blobs, class 1
// dark; each lands fully inside one lung. Throws std::invalid_argument if the
// spec cannot place a lesion (radius exceeding lung extent) or is malformed.
Sample generate_sample(const SceneSpec& spec, std::uint64_t seed);

// Structural checks: disjoint masks, labels/lambda coherent with boxes, boxes
// inside exactly one lung bbox and within bounds. Throws on violation.
void validate_sample(const Sample& s, const SceneSpec& spec);

struct DatasetManifest {
    int version = 1;
    std::uint64_t seed = 0;
    SceneSpec spec;
    std::vector<Sample> samples;
};

// Generates n samples (sample i uses seed + i), writes PGMs plus
// manifest.json under out_dir, and returns the manifest. Two calls with the
// same arguments produce byte-identical trees.
DatasetManifest generate_dataset(const SceneSpec& spec, std::size_t n,
                                 std::uint64_t seed, const std::string& out_dir);

// Reads manifest.json + referenced PGMs back; validates every sample.
DatasetManifest load_dataset(const std::string& manifest_path);

// Region hashes consumed by the objective's graph terms: left lung hashed
// after horizontal flip (for left/right comparison), plus unflipped left and
// right hashes (for cross-image comparison).
struct SampleHashes {
    HashCode left_flipped;
    HashCode left;
    HashCode right;
};

SampleHashes compute_sample_hashes(const Sample& s);

struct Batch {
    std::vector<std::size_t> indices;   // into the dataset's sample vector
    std::vector<SampleHashes> hashes;   // aligned with indices
};

// Deterministic shuffle, then fixed-size batches; a short tail is dropped.
// batch_size < 2 is rejected (the cross-image term needs pairs).
std::vector<Batch> make_batches(const std::vector<Sample>& samples,
                                std::size_t batch_size, std::uint64_t shuffle_seed);

}  // namespace gren
