#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emma/network.hpp"
#include "emma/normalization.hpp"

namespace emma {

// Per-voxel class probabilities [K,D,H,W] from one member or the ensemble.
struct ConfidenceMap {
  Tensor<double> probs;
  std::string member_id;
  std::string normalization;
};

struct TilingOptions {
  // Output tile extents; zero picks 27^3 for valid-convolution networks and
  // the training output grid for same-padded ones.
  Extents3 tile{0, 0, 0};
};

// Assembles a dense [K,D,H,W] map over the whole volume. Valid-convolution
// networks use abutting output tiles. Same-padded networks predict the
// zero-padded volume in one pass when it fits a tile, otherwise overlapping
// tiles whose borders (margin min(rf/2, tile/4)) are discarded. `coverage`,
// when given, receives how many tiles wrote each voxel.
template <typename T>
Tensor<double> predict_full_volume(const Network<T>& net, const Tensor<float>& images, const TilingOptions& tiling = {},
                                   Tensor<std::uint32_t>* coverage = nullptr);

// Voxelwise mean with weights 1/|E|, accumulated in manifest order as a
// running mean in 64-bit (identical maps average to themselves exactly).
Tensor<double> average_confidences(const std::vector<const Tensor<double>*>& maps);
Tensor<double> average_confidences(const std::vector<ConfidenceMap>& maps);

// Argmax over classes mapped to `label_values`; ties go to the lower class.
LabelTensor argmax_segment(const Tensor<double>& map, const std::vector<std::uint8_t>& label_values = {0, 1, 2, 4});

struct ManifestEntry {
  std::filesystem::path checkpoint;
  std::string spec_id;
  std::string normalization;
};

struct EnsembleManifest {
  std::vector<ManifestEntry> members;

  // JSON array of {"checkpoint", "spec_id", "normalization"}; relative
  // checkpoint paths resolve against the manifest's directory.
  static EnsembleManifest from_json(const std::string& text, const std::filesystem::path& base_dir = {});
  static EnsembleManifest load(const std::filesystem::path& path);
  std::string to_json() const;
};

struct EmmaResult {
  ConfidenceMap confidence;
  LabelTensor labels;  // values {0,1,2,4}
  std::vector<ConfidenceMap> members;
};

enum class Precision { f32, f64 };

// Normalizes the raw case per member (landmarks for v3 come from the
// checkpoint), predicts, averages and labels. Any member failure aborts.
// With threads > 1 members are predicted concurrently; the average is still
// taken in manifest order.
EmmaResult run_emma(const EnsembleManifest& manifest, const VolumeCase& raw, Precision precision = Precision::f32,
                    const TilingOptions& tiling = {}, bool keep_member_maps = false, std::size_t threads = 1);

// Normalization recorded in a network's metadata.
NormalizationSpec normalization_from_metadata(const NetworkMetadata& m);

}  // namespace emma
