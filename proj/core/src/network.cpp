#include "emma/network.hpp"

#include <cmath>

namespace emma {

template <typename T>
Network<T>::Network(NetworkSpec spec) : spec_(std::move(spec)) {
  for (const auto& p : parameter_shapes(spec_)) params_.emplace(p.name, Tensor<T>::zeros(p.shape));
  for (const auto& l : spec_.layers) {
    if (l.kind == LayerKind::batch_norm) norms_.emplace(l.name, BatchNormState<T>(l.channels));
  }
  initialize(0);
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : params_) {
    auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".weight")) {
      const double fan_in = static_cast<double>(t.numel() / t.dim(0));
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
    } else if (ends_with(".gamma")) {
      t.fill(T{1});
    } else {
      t.fill(T{0});
    }
  }
  for (auto& [name, st] : norms_) st = BatchNormState<T>(st.running_mean.size());
}

template <typename T>
Var Network<T>::forward(Tape<T>& tape, std::span<const Tensor<T>> inputs, bool training, std::mt19937_64* rng,
                        std::map<std::string, Var>* bindings) {
  return run(tape, inputs, training, rng, bindings, norms_, true);
}

template <typename T>
Tensor<T> Network<T>::predict(std::span<const Tensor<T>> inputs) const {
  Tape<T> tape;
  auto norms = norms_;
  const Var out = run(tape, inputs, false, nullptr, nullptr, norms, false);
  return tape.value(out);
}

template <typename T>
Var Network<T>::run(Tape<T>& tape, std::span<const Tensor<T>> inputs, bool training, std::mt19937_64* rng,
                    std::map<std::string, Var>* bindings, std::map<std::string, BatchNormState<T>>& norms,
                    bool params_require_grad) const {
  if (inputs.size() != spec_.pathways.size()) {
    throw DimensionError(spec_.id() + ": expected " + std::to_string(spec_.pathways.size()) + " pathway inputs, got " +
                         std::to_string(inputs.size()));
  }
  std::vector<Extents3> ext;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    if (inputs[p].rank() != 4 || inputs[p].dim(0) != spec_.in_channels) {
      throw DimensionError(spec_.id() + ": pathway '" + spec_.pathways[p].name + "' expects [" +
                           std::to_string(spec_.in_channels) + ",D,H,W], got " + shape_str(inputs[p].shape()));
    }
    ext.push_back(inputs[p].spatial());
  }
  try {
    infer_shapes(spec_, ext);
  } catch (const DimensionError& e) {
    std::string names;
    for (std::size_t p = 0; p < ext.size(); ++p) {
      names += (p ? ", " : "") + spec_.pathways[p].name + " " + extents_str(ext[p]);
    }
    throw DimensionError("pathway inputs " + names + " are inconsistent: " + e.what());
  }
  if (training && !rng) throw UsageError("forward: training mode needs an RNG");

  auto param = [&](const std::string& name) {
    const Var v = tape.leaf(params_.at(name), params_require_grad);
    if (bindings) (*bindings)[name] = v;
    return v;
  };

  std::vector<Var> vars(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    auto in = [&](std::size_t k) { return vars[l.inputs.at(k)]; };
    switch (l.kind) {
      case LayerKind::input:
        vars[i] = tape.leaf(inputs[l.pathway], false);
        break;
      case LayerKind::conv: {
        const Var y = conv3d(tape, in(0), param(l.name + ".weight"), l.stride, l.padding);
        vars[i] = bias_add(tape, y, param(l.name + ".bias"));
        break;
      }
      case LayerKind::batch_norm:
        vars[i] = batch_norm(tape, in(0), param(l.name + ".gamma"), param(l.name + ".beta"), norms.at(l.name), training);
        break;
      case LayerKind::relu: vars[i] = relu(tape, in(0)); break;
      case LayerKind::max_pool: vars[i] = max_pool3d(tape, in(0), l.kernel, l.stride); break;
      case LayerKind::downsample: vars[i] = downsample_average(tape, in(0), l.factor); break;
      case LayerKind::upsample: vars[i] = upsample(tape, in(0), l.factor, l.upsample_mode); break;
      case LayerKind::concat: vars[i] = concat_channels(tape, in(0), in(1)); break;
      case LayerKind::add: vars[i] = add(tape, in(0), in(1)); break;
      case LayerKind::crop: vars[i] = crop_center(tape, in(0), tape.value(in(1)).spatial()); break;
      case LayerKind::dropout: vars[i] = training ? dropout(tape, in(0), l.rate, *rng, true) : in(0); break;
      case LayerKind::softmax: vars[i] = softmax_channels(tape, in(0)); break;
    }
  }
  return vars[spec_.output];
}

template class Network<float>;
template class Network<double>;

}  // namespace emma
