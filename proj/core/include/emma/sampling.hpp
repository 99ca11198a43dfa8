#pragma once

#include <array>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "emma/network_spec.hpp"
#include "emma/normalization.hpp"

namespace emma {

enum class SamplingStrategy { healthy_tumour_5050, uniform_per_label };

std::string to_string(SamplingStrategy s);
SamplingStrategy parse_sampling_strategy(std::string_view name);

using Offset3 = std::array<std::ptrdiff_t, 3>;

// Reads images[:, start : start + factor*extents] (full-resolution
// coordinates, zero outside the volume) and averages factor^3 blocks.
Tensor<float> extract_window(const Tensor<float>& images, const Offset3& start, const Extents3& extents,
                             std::size_t factor = 1);
// Same for a [D,H,W] label map; out-of-volume voxels get `fill`.
LabelTensor extract_labels(const LabelTensor& labels, const Offset3& start, const Extents3& extents,
                           std::uint8_t fill = 0);

// Network inputs for the output window starting at `out_start`.
std::vector<Tensor<float>> pathway_inputs(const NetworkSpec& spec, const Tensor<float>& images, const Offset3& out_start,
                                          const Extents3& out_extents);

struct PatchSample {
  std::vector<Tensor<float>> inputs;  // one per pathway
  LabelTensor target;                 // class ids on the output grid
  Index3 center;
  std::size_t center_class = 0;       // class id the centre was drawn for
  Offset3 out_start{};
};

// Per-case voxel pools by class id, restricted to the brain mask.
class PatchSampler {
 public:
  // `c` must be normalized, labelled and outlive the sampler. `out_extents` defaults to the spec's
  // training output grid. For uniform_per_label, `include_background`
  // decides whether class 0 is one of the equiprobable labels.
  PatchSampler(const VolumeCase& c, const NetworkSpec& spec, SamplingStrategy strategy,
               Extents3 out_extents = {}, bool include_background = true);

  PatchSample sample(std::mt19937_64& rng) const;
  // Centre choice only (no patch extraction).
  std::pair<Index3, std::size_t> draw_center(std::mt19937_64& rng) const;
  PatchSample patch_at(const Index3& center, std::size_t center_class) const;

  // Probability of each centre group after redistributing missing classes.
  // healthy_tumour_5050: groups {healthy, tumour}; uniform_per_label: class ids.
  const std::vector<double>& group_probabilities() const { return probs_; }
  const std::vector<std::string>& notes() const { return notes_; }
  Extents3 output_extents() const { return out_; }

 private:
  const VolumeCase* case_;
  NetworkSpec spec_;
  SamplingStrategy strategy_;
  Extents3 out_;
  LabelTensor classes_;
  std::vector<std::vector<std::size_t>> pools_;  // per group, linear voxel indices
  std::vector<std::size_t> group_class_;         // representative class id per group
  std::vector<double> probs_;
  std::vector<std::string> notes_;
};

struct ReflectionFlags {
  bool z = true, y = true, x = true;
};

// Reverses one spatial axis (0 = z) of every input and the target.
void reflect(PatchSample& s, std::size_t axis);
// Each enabled axis is reflected with probability 1/2.
void augment(PatchSample& s, const ReflectionFlags& flags, std::mt19937_64& rng);

}  // namespace emma
