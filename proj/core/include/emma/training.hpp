#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "emma/ensemble.hpp"
#include "emma/losses.hpp"
#include "emma/network_spec.hpp"
#include "emma/normalization.hpp"
#include "emma/optimizer.hpp"
#include "emma/sampling.hpp"

namespace emma {

// Training run description. Parsed from JSON with every key checked: unknown
// keys and wrong types are ConfigErrors raised before any work starts.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string architecture = "unet_sum_skip";
  std::size_t num_classes = 4;
  double width_scale = 1.0;
  Extents3 patch{0, 0, 0};  // output patch; zero keeps the architecture's own
  LossSpec loss;
  OptimizerConfig optimizer = OptimizerConfig::defaults(OptimizerKind::adam);
  SamplingStrategy sampling = SamplingStrategy::uniform_per_label;
  bool sampling_include_background = true;
  ReflectionFlags reflect;
  NormalizationSpec normalization;
  std::size_t batch_size = 1;
  std::uint64_t iterations = 100;
  std::uint64_t log_every = 10;
  std::uint64_t checkpoint_every = 0;  // 0: only at the end
  std::vector<std::filesystem::path> train_cases;
  std::filesystem::path checkpoint = "model.ckpt";
  std::filesystem::path log = "train.log";

  // Relative paths resolve against `base_dir`.
  static RunConfig from_json(const std::string& text, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  std::string to_json() const;
  // Network spec including any patch override.
  NetworkSpec network_spec() const;
};

struct TrainLogEntry {
  std::uint64_t iteration = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;  // every iteration
  std::filesystem::path checkpoint;
  double seconds = 0.0;
};

// Normalization -> sampling -> forward -> loss -> backward -> optimizer.
// Deterministic for a given config, seed and input cases. On a non-finite
// loss or gradient the parameters from before the failing step are written
// to the checkpoint path and a NumericError is thrown.
template <typename T>
TrainResult train(const RunConfig& config, const std::vector<VolumeCase>& raw_cases, std::ostream* progress = nullptr);

// Loads config.train_cases and dispatches on precision.
TrainResult train_from_config(const RunConfig& config, Precision precision, std::ostream* progress = nullptr);

}  // namespace emma
