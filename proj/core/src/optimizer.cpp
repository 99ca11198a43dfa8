#include "emma/optimizer.hpp"

#include <cmath>

namespace emma {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd_momentum: return "sgd_momentum";
    case OptimizerKind::rmsprop: return "rmsprop";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adadelta: return "adadelta";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (name == "rmsprop") return OptimizerKind::rmsprop;
  if (name == "adam") return OptimizerKind::adam;
  if (name == "adadelta") return OptimizerKind::adadelta;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

OptimizerConfig OptimizerConfig::defaults(OptimizerKind kind) {
  OptimizerConfig c;
  c.kind = kind;
  switch (kind) {
    case OptimizerKind::sgd_momentum:
      c.learning_rate = 1e-2;
      c.momentum = 0.9;
      break;
    case OptimizerKind::rmsprop:
      c.learning_rate = 1e-3;
      c.rho = 0.9;
      c.eps = 1e-8;
      break;
    case OptimizerKind::adam:
      c.learning_rate = 1e-3;
      c.eps = 1e-8;
      break;
    case OptimizerKind::adadelta:
      c.learning_rate = 1.0;
      c.rho = 0.95;
      c.eps = 1e-6;
      break;
  }
  return c;
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be > 0");
  if (!(eps > 0.0)) throw ParameterError("optimizer eps must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ParameterError("momentum must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ParameterError("adam betas must be in [0, 1)");
  if (rho < 0.0 || rho >= 1.0) throw ParameterError("rho must be in [0, 1)");
  if (weight_decay < 0.0) throw ParameterError("weight_decay must be >= 0");
}

template <typename T>
OptimizerState<T>::OptimizerState(OptimizerConfig config) : config_(config) {
  config_.validate();
}

template <typename T>
void OptimizerState<T>::step(ParameterMap<T>& params, const GradientMap<T>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw UsageError("optimizer: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw DimensionError("optimizer: gradient shape " + shape_str(g.shape()) + " does not match parameter '" +
                           name + "' " + shape_str(it->second.shape()));
    }
    for (auto v : g.storage()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError("optimizer: non-finite gradient in parameter '" + name + "'");
      }
    }
  }

  ++steps_;
  const auto& c = config_;
  const double t = static_cast<double>(steps_);
  const std::size_t nslots = c.kind == OptimizerKind::sgd_momentum || c.kind == OptimizerKind::rmsprop ? 1 : 2;

  for (const auto& [name, g] : grads) {
    Tensor<T>& p = params.at(name);
    auto& slot = slots_[name];
    if (slot.empty()) slot.assign(nslots, std::vector<double>(p.numel(), 0.0));
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double theta = p[i];
      const double grad = static_cast<double>(g[i]) + c.weight_decay * theta;
      double delta = 0.0;
      switch (c.kind) {
        case OptimizerKind::sgd_momentum: {
          double& v = slot[0][i];
          v = c.momentum * v + grad;
          delta = -c.learning_rate * v;
          break;
        }
        case OptimizerKind::rmsprop: {
          double& s = slot[0][i];
          s = c.rho * s + (1.0 - c.rho) * grad * grad;
          delta = -c.learning_rate * grad / (std::sqrt(s) + c.eps);
          break;
        }
        case OptimizerKind::adam: {
          double& m = slot[0][i];
          double& v = slot[1][i];
          m = c.beta1 * m + (1.0 - c.beta1) * grad;
          v = c.beta2 * v + (1.0 - c.beta2) * grad * grad;
          const double mhat = m / (1.0 - std::pow(c.beta1, t));
          const double vhat = v / (1.0 - std::pow(c.beta2, t));
          delta = -c.learning_rate * mhat / (std::sqrt(vhat) + c.eps);
          break;
        }
        case OptimizerKind::adadelta: {
          double& eg = slot[0][i];
          double& ex = slot[1][i];
          eg = c.rho * eg + (1.0 - c.rho) * grad * grad;
          const double update = -std::sqrt(ex + c.eps) / std::sqrt(eg + c.eps) * grad;
          ex = c.rho * ex + (1.0 - c.rho) * update * update;
          delta = c.learning_rate * update;
          break;
        }
      }
      p[i] = static_cast<T>(theta + delta);
    }
  }
}

template class OptimizerState<float>;
template class OptimizerState<double>;

}  // namespace emma
