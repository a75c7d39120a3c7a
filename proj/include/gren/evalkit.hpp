#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gren/model.hpp"
#include "gren/objective.hpp"
#include "gren/synthgen.hpp"

namespace gren {

// Union of the pixel blocks of all grid cells with p > threshold (strict),
// as a full-resolution {0,1} mask of side grid*cell_px.
std::vector<std::uint8_t> grid_to_region(const std::vector<double>& prob_grid,
                                         std::size_t grid, std::size_t cell_px,
                                         double threshold);

// {0,1} mask of all pixels covered by any box (inclusive coords).
std::vector<std::uint8_t> rasterize_boxes(const std::vector<Box>& boxes,
                                          std::size_t side);

// Pixel IoU. Both masks empty leaves the ratio undefined; that case throws
// std::domain_error("no instance") and callers exclude it.
double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

struct LocalizationResult {
    std::string sample_id;
    std::size_t cls = 0;
    double iou = 0.0;
    bool correct_at(double threshold) const { return iou > threshold; }  // strict
};

struct AccuracySummary {
    std::vector<std::size_t> classes;            // classes with at least one result
    std::vector<std::vector<double>> per_class;  // [class index][threshold]
    std::vector<double> mean;                    // [threshold], unweighted over classes
};

// Fraction of results per class with iou strictly above each threshold.
// Order of `results` does not matter.
AccuracySummary localization_accuracy(const std::vector<LocalizationResult>& results,
                                      const std::vector<double>& thresholds);

// Image-level score from a class's prob grid: 1 - prod(1 - p_j), the bag
// probability the bag-level loss optimizes. Computed in log space.
double image_score(const std::vector<double>& prob_grid, double prob_clamp);

// Rank-based Mann-Whitney AUC with midrank tie handling. Throws
// std::invalid_argument("degenerate label set") if either class is absent.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ClassMetrics {
    std::size_t cls = 0;
    std::size_t annotated = 0;       // samples with boxes for this class
    std::size_t positives = 0;       // label-positive samples (AUC numerator side)
    std::size_t negatives = 0;
    std::vector<double> loc_acc;     // one per IoU threshold, over annotated samples
    std::optional<double> auc;       // absent when the labels are single-valued
};

struct MetricsReport {
    std::size_t num_samples = 0;
    std::vector<double> iou_thresholds;
    double grid_threshold = 0.5;
    std::vector<ClassMetrics> per_class;
    std::vector<double> mean_loc_acc;  // per threshold, mean over annotated classes
    std::optional<double> mean_auc;
};

// Localization is scored per (sample, class) with boxes: predicted region from
// the thresholded grid vs. the rasterized boxes, correct iff IoU strictly
// exceeds the threshold. Classification AUC uses bag scores on all samples.
// Classes with no annotated samples are excluded from mean_loc_acc (loc_acc
// left empty); classes whose labels are single-valued get no AUC.
MetricsReport evaluate(const BackboneParams& params, const std::vector<Sample>& samples,
                       const std::vector<double>& iou_thresholds, double grid_threshold,
                       double prob_clamp = 1e-6);

// JSON is nested and lossless. CSV is one row per class per threshold plus
// per-class "auc" rows and "mean" rows, with leading "#key=value" metadata
// lines; both formats round-trip bit-exactly.
void write_report_json(const MetricsReport& r, const std::string& path);
MetricsReport read_report_json(const std::string& path);
void write_report_csv(const MetricsReport& r, const std::string& path);
MetricsReport read_report_csv(const std::string& path);
std::string format_report_table(const MetricsReport& r);

}  // namespace gren
