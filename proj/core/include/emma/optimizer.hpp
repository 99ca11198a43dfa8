#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "emma/autodiff.hpp"

namespace emma {

enum class OptimizerKind { sgd_momentum, rmsprop, adam, adadelta };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // sgd_momentum
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;   // adam
  double rho = 0.95;      // rmsprop / adadelta decay
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 penalty added to the gradient

  // Published defaults for each algorithm.
  static OptimizerConfig defaults(OptimizerKind kind);
  void validate() const;
};

template <typename T>
using ParameterMap = std::map<std::string, Tensor<T>>;

template <typename T>
class OptimizerState {
 public:
  explicit OptimizerState(OptimizerConfig config);

  // Applies one update in place. Parameters without a gradient entry are
  // left untouched; a non-finite gradient aborts before anything changes.
  void step(ParameterMap<T>& params, const GradientMap<T>& grads);

  std::uint64_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  // Per-parameter accumulators (first/second moments, squared-update average).
  std::map<std::string, std::vector<std::vector<double>>> slots_;
};

extern template class OptimizerState<float>;
extern template class OptimizerState<double>;

}  // namespace emma
