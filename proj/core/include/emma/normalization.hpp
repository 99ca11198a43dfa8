#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emma/volume.hpp"

namespace emma {

using Mask = Tensor<std::uint8_t>;  // [D,H,W] of 0/1

enum class NormalizationVersion { v1_zscore, v2_bfc_zscore, v3_bfc_pwl_zscore };
enum class BiasMode { external, polynomial, none };

std::string to_string(NormalizationVersion v);
NormalizationVersion parse_normalization(std::string_view name);
std::string to_string(BiasMode m);
BiasMode parse_bias_mode(std::string_view name);

// Voxels where any modality is non-zero. Empty mask -> DataError.
Mask brain_mask(const VolumeCase& c);
std::size_t mask_count(const Mask& m);

// Per modality: mean 0 / population std 1 inside the mask, 0 outside.
VolumeCase zscore_normalize(const VolumeCase& c, const Mask& mask);

inline const std::vector<double> kLandmarkPercentiles = {1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99};

// Percentile by linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

// Standard-scale landmarks per modality, in kModalityNames order.
struct LandmarkModel {
  std::vector<double> percentiles = kLandmarkPercentiles;
  std::array<std::vector<double>, kNumModalities> standard;

  bool trained() const { return !standard[0].empty(); }
  // {"percentiles": [...], "flair": [...], "t1": [...], ...}
  std::string to_json() const;
  static LandmarkModel from_json(std::string_view text);
};

// Raw-intensity landmarks of one modality inside the mask.
std::vector<double> case_landmarks(const VolumeCase& c, std::size_t modality, const Mask& mask,
                                   const std::vector<double>& percentiles = kLandmarkPercentiles);

// Needs at least two cases; masks default to brain_mask of each case.
LandmarkModel nyul_train(const std::vector<VolumeCase>& cases,
                         const std::vector<double>& percentiles = kLandmarkPercentiles,
                         const std::vector<Mask>* masks = nullptr);
// Piecewise-linear map of each modality's landmarks onto the standard scale,
// extended past the end knots by the terminal slopes. Outside-mask voxels
// are left as they are.
VolumeCase nyul_apply(const VolumeCase& c, const LandmarkModel& model, const Mask& mask);

// Robust least-squares fit of a degree-d polynomial in (z,y,x) scaled to
// [-1,1] to log-intensity inside the mask; divides by exp(field) and rescales
// so the in-mask mean of each modality is unchanged.
inline constexpr int kDefaultBiasDegree = 3;
VolumeCase polynomial_bias_correct(const VolumeCase& c, int degree, const Mask& mask);

struct NormalizationSpec {
  NormalizationVersion version = NormalizationVersion::v1_zscore;
  BiasMode bias_mode = BiasMode::polynomial;
  int bias_degree = kDefaultBiasDegree;
  std::optional<LandmarkModel> landmarks;  // required for v3
};

// v1 = zscore; v2 = zscore . bias; v3 = zscore . nyul_apply . bias.
// The mask is taken from the raw case.
VolumeCase normalize_case(const VolumeCase& raw, const NormalizationSpec& spec);
// Bias-corrects the training cases and trains landmarks when the version needs them.
NormalizationSpec fit_normalization(const std::vector<VolumeCase>& raw_cases, NormalizationSpec spec);

}  // namespace emma
