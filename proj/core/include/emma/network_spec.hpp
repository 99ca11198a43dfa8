#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "emma/ops.hpp"
#include "emma/tensor.hpp"

namespace emma {

enum class Family { deepmedic, fcn, unet };

std::string to_string(Family f);

enum class LayerKind { input, conv, batch_norm, relu, max_pool, downsample, upsample, concat, add, crop, dropout, softmax };

// One node of the architecture DAG. Which fields matter depends on `kind`.
struct LayerSpec {
  LayerKind kind = LayerKind::input;
  std::string name;                 // parameter prefix for conv / batch_norm
  std::vector<std::size_t> inputs;  // indices of earlier layers
  std::size_t channels = 0;         // output channel count (filled by the builder)
  Extents3 kernel{1, 1, 1};
  Extents3 stride{1, 1, 1};
  Padding padding = Padding::valid;
  std::size_t factor = 1;
  UpsampleMode upsample_mode = UpsampleMode::repeat;
  double rate = 0.0;
  std::size_t pathway = 0;  // input layers only
};

// An input stream. `factor` is the downsampling applied to the image before
// it enters the pathway; `train_extents` is its patch size during training.
struct PathwaySpec {
  std::string name;
  std::size_t factor = 1;
  Extents3 train_extents;
};

struct NetworkSpec {
  Family family = Family::unet;
  std::string variant;
  std::size_t num_classes = 4;
  std::size_t in_channels = 4;
  double width_scale = 1.0;
  std::vector<PathwaySpec> pathways;
  std::vector<LayerSpec> layers;
  std::size_t output = 0;  // index of the softmax layer
  Extents3 train_output_extents;

  // "<family>_<variant>", e.g. "unet_sum_skip".
  std::string id() const;
};

// Builders for the seven ensemble members. `width_scale` multiplies every
// hidden width (rounded, at least 1) for desk-scale runs.
NetworkSpec build_deepmedic(std::string_view variant, std::size_t num_classes, double width_scale = 1.0);
NetworkSpec build_fcn(std::string_view variant, std::size_t num_classes, double width_scale = 1.0);
NetworkSpec build_unet(std::string_view variant, std::size_t num_classes, double width_scale = 1.0);
// Dispatch on an id such as "deepmedic_wide" or "fcn_residual_shallow".
NetworkSpec build_network(std::string_view spec_id, std::size_t num_classes, double width_scale = 1.0);
std::vector<std::string> network_ids();

// Shape of every layer output, given spatial extents per pathway input.
// Throws DimensionError describing the first inconsistency.
std::vector<Shape> infer_shapes(const NetworkSpec& spec, const std::vector<Extents3>& pathway_extents);
Extents3 output_extents(const NetworkSpec& spec, const std::vector<Extents3>& pathway_extents);
// Checks shape consistency at the training extents.
void validate(const NetworkSpec& spec);

struct ParameterShape {
  std::string name;
  Shape shape;
};
// Trainable tensors in deterministic order: conv weight/bias, norm gamma/beta.
std::vector<ParameterShape> parameter_shapes(const NetworkSpec& spec);
std::size_t parameter_count(const NetworkSpec& spec);

// Input extent of one output voxel per pathway, in full-resolution voxels,
// and the output stride (full-resolution voxels per output voxel).
struct ReceptiveField {
  std::vector<std::size_t> extent;
  double output_stride = 1.0;
};
ReceptiveField receptive_field(const NetworkSpec& spec);

// Same-padded families need extents that are multiples of this value.
std::size_t extent_multiple(const NetworkSpec& spec);

// For an output window of extents `out`, the input extents of every pathway
// (and where each pathway window starts relative to the output window start, in
// full-resolution voxels). Only valid for shape-consistent `out`.
struct PathwayWindow {
  Extents3 extents;       // in pathway voxels
  std::ptrdiff_t offset;  // full-resolution voxels, same on every axis
};
std::vector<PathwayWindow> input_windows(const NetworkSpec& spec, const Extents3& out);

// Copy of `spec` trained on output patches of extents `out` (pathway inputs
// follow from input_windows). Validates the result.
NetworkSpec with_training_output(const NetworkSpec& spec, const Extents3& out);

}  // namespace emma
