#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emma/autodiff.hpp"
#include "emma/network_spec.hpp"
#include "emma/optimizer.hpp"

namespace emma {

// How an instance was trained; persisted with its checkpoint.
struct NetworkMetadata {
  std::string loss = "cross_entropy";
  std::string optimizer = "adam";
  std::string normalization = "v1_zscore";
  std::string bias_mode = "polynomial";
  int bias_degree = 3;
  std::uint64_t seed = 0;
  std::uint64_t iterations = 0;
  // Serialized landmark model, present for v3 normalization.
  std::string landmarks_json;
};

// A NetworkSpec plus its parameter set: one P(y | x; theta_m, m).
template <typename T>
class Network {
 public:
  explicit Network(NetworkSpec spec);

  // He-normal (fan-in) conv weights, zero biases, gamma 1, beta 0.
  void initialize(std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }
  ParameterMap<T>& parameters() { return params_; }
  const ParameterMap<T>& parameters() const { return params_; }
  std::map<std::string, BatchNormState<T>>& norm_states() { return norms_; }
  const std::map<std::string, BatchNormState<T>>& norm_states() const { return norms_; }

  // Records the forward pass on `tape`. `inputs` holds one [C,D,H,W] tensor
  // per pathway. Parameter leaves are reported through `bindings` when given;
  // `rng` drives dropout and is required when training.
  Var forward(Tape<T>& tape, std::span<const Tensor<T>> inputs, bool training, std::mt19937_64* rng,
              std::map<std::string, Var>* bindings);

  // Inference-mode confidence map [K, D', H', W'].
  Tensor<T> predict(std::span<const Tensor<T>> inputs) const;

  NetworkMetadata metadata;

 private:
  Var run(Tape<T>& tape, std::span<const Tensor<T>> inputs, bool training, std::mt19937_64* rng,
          std::map<std::string, Var>* bindings, std::map<std::string, BatchNormState<T>>& norms,
          bool params_require_grad) const;

  NetworkSpec spec_;
  ParameterMap<T> params_;
  std::map<std::string, BatchNormState<T>> norms_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace emma
