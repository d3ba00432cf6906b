#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

struct ClassMetrics {
  double dsc = 0.0;
  double ji = 0.0;
  double nsd = 0.0;
};

/// Per-case evaluation record. per_class holds the binary metrics for each
/// foreground class (1 and 2); mean_foreground is their unweighted average.
struct MetricsReport {
  std::string case_id;
  std::map<int, ClassMetrics> per_class;
  ClassMetrics mean_foreground;
};

/// Dice coefficient 2|A∩B| / (|A|+|B|) on binary masks (nonzero = member).
/// Both masks empty -> 1.0.
double dsc(const Tensor& pred, const Tensor& gt);

/// Jaccard index |A∩B| / |A∪B|. Both masks empty -> 1.0.
double jaccard(const Tensor& pred, const Tensor& gt);

/// Boundary voxel centers of a binary [D,H,W] mask in millimetres. A
/// foreground voxel is boundary when at least one of its six face
/// neighbours is background; the volume border counts as background.
/// Coordinates are index * spacing per axis (D,H,W order).
std::vector<std::array<double, 3>> extract_surface(const Tensor& mask,
                                                   const std::array<double, 3>& spacing);

/// Normalized surface distance at tolerance tau (mm): the fraction of
/// boundary voxels of each mask lying within tau of the other mask's
/// boundary, symmetrized. Both surfaces empty -> 1.0; exactly one empty
/// -> 0.0. Exact: classifies by squared distance, so it agrees bitwise
/// with the all-pairs oracle.
double nsd(const Tensor& pred, const Tensor& gt, const std::array<double, 3>& spacing,
           double tolerance_mm = 4.0);

/// Binary metrics for classes 1 and 2 of two [D,H,W] label volumes
/// (labels must be exactly 0, 1 or 2), plus their unweighted mean.
MetricsReport evaluate_case(const Tensor& pred_labels, const Tensor& gt_labels,
                            const std::array<double, 3>& spacing,
                            const std::string& case_id = "");

}  // namespace voxseg
