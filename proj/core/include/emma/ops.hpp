#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "emma/autodiff.hpp"

namespace emma {

enum class Padding { valid, zero_same };
enum class UpsampleMode { repeat, trilinear };

// Output extent of a strided window op along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding pad);

// Per-channel running statistics owned by a network and updated by
// batch_norm in training mode.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

// input [C_in,D,H,W], kernel [C_out,C_in,kd,kh,kw] -> [C_out,D',H',W'].
// zero_same follows the usual "SAME" rule: D' = ceil(D / stride).
template <typename T>
Var conv3d(Tape<T>& tape, Var input, Var kernel, Extents3 stride = {1, 1, 1}, Padding padding = Padding::valid);

// Adds a per-channel bias [C] to [C,D,H,W].
template <typename T>
Var bias_add(Tape<T>& tape, Var input, Var bias);

// Valid-mode pooling. Gradient goes to the first maximum in scan order.
template <typename T>
Var max_pool3d(Tape<T>& tape, Var input, Extents3 window, Extents3 stride);

template <typename T>
Var downsample_average(Tape<T>& tape, Var input, std::size_t factor);

template <typename T>
Var upsample(Tape<T>& tape, Var input, std::size_t factor, UpsampleMode mode = UpsampleMode::repeat);

// Normalises each channel over its spatial extent (one sample), then applies
// gamma/beta. Training mode updates `stats`; inference mode reads it.
template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormState<T>& stats, bool training);

template <typename T>
Var relu(Tape<T>& tape, Var input);

// Softmax across axis 0 (classes) independently at every voxel.
template <typename T>
Var softmax_channels(Tape<T>& tape, Var input);

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

// Centre crop of [C,D,H,W] to the given spatial extents (offset floor((in-out)/2)).
template <typename T>
Var crop_center(Tape<T>& tape, Var input, Extents3 target);

// Inverted dropout; identity when not training.
template <typename T>
Var dropout(Tape<T>& tape, Var input, double rate, std::mt19937_64& rng, bool training);

template <typename T>
Var sum(Tape<T>& tape, Var input);

template <typename T>
Var mean(Tape<T>& tape, Var input);

}  // namespace emma
