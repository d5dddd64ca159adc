#pragma once

#include "uvx/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace uvx {

struct OverlapScores {
    double dsc = 0.0;
    double iou = 0.0;
};

/// Hard per-class DSC and IoU for label maps of equal shape. A class absent
/// from both maps scores 1 on both. Throws ContractError on labels >= c.
std::vector<OverlapScores> dsc_iou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes);

/// Foreground voxels with at least one background face-neighbor; voxels
/// outside the volume count as background.
std::vector<std::uint8_t> boundary_mask(const std::vector<std::uint8_t>& mask, const Shape& shape);

/// Exact squared Euclidean distance from every voxel to the nearest set voxel
/// of `seeds`, with per-axis spacing. Infinite when `seeds` is empty.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seeds, const Shape& shape,
                                               const std::vector<double>& spacing);

/// q-th quantile (q in [0,1]) with linear interpolation between order statistics.
double percentile_linear(std::vector<double> values, double q);

/// Symmetric 95th-percentile boundary distance. Both empty -> 0; exactly one
/// empty -> nullopt. Throws ConfigError if a spacing is not positive.
std::optional<double> hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, const Shape& shape,
                           const std::vector<double>& spacing);

struct ClassMetrics {
    double dsc = 0.0;
    double iou = 0.0;
    double hd95 = 0.0;         ///< image diagonal when undefined
    bool hd95_defined = true;
};

struct CaseMetrics {
    std::string case_id;
    std::vector<ClassMetrics> classes; ///< index = class id, background included
};

/// Per-class metrics for one case.
CaseMetrics evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& gt,
                          std::size_t num_classes, const std::vector<double>& spacing);

struct MetricReport {
    std::vector<CaseMetrics> cases;

    /// Means over cases and foreground classes (1..c-1).
    double mean_dsc() const;
    double mean_iou() const;
    double mean_hd95() const;
    std::size_t undefined_hd95_count() const;

    /// Rows "case_id,class_id,dsc,iou,hd95,hd95_defined", one per case and class.
    std::string to_csv() const;
    /// Rows "class,metric,mean,std" per class and metric; std is the sample
    /// standard deviation (0 for a single case).
    std::string dot_plot_csv() const;
};

} // namespace uvx
