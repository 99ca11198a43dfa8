#pragma once

#include <optional>
#include <string>
#include <vector>

#include "emma/normalization.hpp"

namespace emma {

// whole = {1,2,4}, core = {1,4}, enhancing = {4}.
struct RegionSet {
  Mask whole, core, enhancing;
  Spacing spacing{1.0, 1.0, 1.0};
};

RegionSet merge_regions(const LabelTensor& labels, const Spacing& spacing = {1.0, 1.0, 1.0});

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const Mask& pred, const Mask& ref);
// TP / (TP + FN); 1 when the reference is empty.
double sensitivity(const Mask& pred, const Mask& ref);

// Returned when exactly one mask is empty.
inline constexpr double kHausdorffSentinel = 373.13;

struct HausdorffResult {
  double value = 0.0;
  bool empty_mask = false;  // value is a convention, not a measurement
};

// Mask voxels with at least one face neighbour outside the mask (the volume
// border counts as outside).
Mask surface_voxels(const Mask& m);
// Exact Euclidean distance (mm) from every voxel to the nearest voxel of `m`;
// +inf everywhere when `m` is empty.
std::vector<double> distance_transform(const Mask& m, const Spacing& spacing);
// Max of the two directed nearest-rank 95th percentiles of surface-to-surface
// distances. Both masks empty -> 0 (flagged); one empty -> sentinel (flagged).
HausdorffResult hausdorff95(const Mask& pred, const Mask& ref, const Spacing& spacing = {1.0, 1.0, 1.0});

// Histograms of the winning-class confidence, per predicted class and split
// by whether the reference agrees.
struct ConfidenceDiagnostics {
  std::size_t bins = 10;
  std::vector<std::vector<std::size_t>> correct, incorrect;  // [class][bin]
  double mean_entropy = 0.0;       // per-voxel predictive entropy (nats)
  double histogram_entropy = 0.0;  // entropy of the pooled confidence histogram (nats)
  double mean_confidence = 0.0;
};

// `map` is [K,D,H,W]; `ref_classes` holds class ids [D,H,W].
ConfidenceDiagnostics confidence_diagnostics(const Tensor<double>& map, const LabelTensor& ref_classes,
                                             std::size_t bins = 10);

struct RegionScore {
  std::string region;
  double dice = 0.0;
  double sensitivity = 0.0;
  HausdorffResult hausdorff95;
};

struct EvaluationReport {
  std::string case_id;
  std::vector<RegionScore> regions;  // enhancing, whole, core
  std::optional<ConfidenceDiagnostics> diagnostics;

  const RegionScore& region(const std::string& name) const;
  std::string to_json() const;
  // Aligned columns: DSC, Sensitivity, Hausdorff95, each as Enh. Whole Core.
  std::string to_table() const;
};

// `pred` and `ref` hold label values {0,1,2,4}.
EvaluationReport evaluate(const LabelTensor& pred, const LabelTensor& ref, const Spacing& spacing = {1.0, 1.0, 1.0},
                          const Tensor<double>* confidence = nullptr, std::string case_id = {});

std::string reports_to_json(const std::vector<EvaluationReport>& reports);
std::string reports_to_table(const std::vector<EvaluationReport>& reports);

}  // namespace emma
