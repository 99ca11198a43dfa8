#include "emma/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "emma/losses.hpp"
#include "emma/ops.hpp"

namespace emma {

double gradient_error(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs, double h) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, bool with_grad, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x, with_grad));
    const Var out = f(tape, vars);
    if (tape.value(out).numel() != 1) throw UsageError("gradient_error: function must return a scalar");
    if (grads) {
      tape.backward(out);
      for (const Var v : vars) grads->push_back(tape.grad(v));
    }
    return tape.value(out)[0];
  };

  std::vector<Tensor<double>> analytic;
  evaluate(inputs, true, &analytic);

  double worst = 0.0;
  std::vector<Tensor<double>> xs = inputs;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    for (std::size_t i = 0; i < xs[t].numel(); ++i) {
      const double x0 = xs[t][i];
      xs[t][i] = x0 + h;
      const double fp = evaluate(xs, false, nullptr);
      xs[t][i] = x0 - h;
      const double fm = evaluate(xs, false, nullptr);
      xs[t][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradcheckFloor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

namespace {

using Rng = std::mt19937_64;

Tensor<double> uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

// Values at least `gap` apart from each other, so no pooling window has a near tie.
Tensor<double> distinct(const Shape& shape, Rng& rng, double gap = 0.05) {
  Tensor<double> t(shape);
  std::vector<double> vals(t.numel());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = gap * static_cast<double>(i) - 0.5 * gap * vals.size();
  std::shuffle(vals.begin(), vals.end(), rng);
  t.storage() = vals;
  return t;
}

// Entries bounded away from zero so relu's kink is never straddled.
Tensor<double> off_zero(const Shape& shape, Rng& rng) {
  Tensor<double> t = uniform(shape, rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.storage()) v = sign(rng) ? v : -v;
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Extents3 random_extents(Rng& rng, std::size_t lo, std::size_t hi) {
  return {pick(rng, lo, hi), pick(rng, lo, hi), pick(rng, lo, hi)};
}

Shape vol(std::size_t c, Extents3 e) { return {c, e.d, e.h, e.w}; }

// Contracts an op output with fixed random weights to get a scalar with a
// generic upstream gradient.
Var project(Tape<double>& tape, Var out, const Tensor<double>& weights) {
  const Var w = tape.leaf(weights, false);
  return sum(tape, mul(tape, out, w));
}

LabelTensor random_labels(Extents3 e, std::size_t K, Rng& rng) {
  LabelTensor t({e.d, e.h, e.w});
  for (auto& v : t.storage()) v = static_cast<std::uint8_t>(pick(rng, 0, K - 1));
  return t;
}

struct Instance {
  ScalarFunction f;
  std::vector<Tensor<double>> inputs;
};

using Generator = std::function<Instance(Rng&)>;

// Wraps a unary op so that its output is projected onto random weights.
template <typename Op>
Instance unary(Tensor<double> x, Op op, Rng& rng) {
  Tape<double> probe;
  const Shape out_shape = probe.value(op(probe, probe.leaf(x))).shape();
  Tensor<double> w = uniform(out_shape, rng);
  return {[op, w](Tape<double>& t, const std::vector<Var>& v) { return project(t, op(t, v[0]), w); }, {std::move(x)}};
}

std::map<std::string, Generator> op_generators() {
  std::map<std::string, Generator> g;
  auto conv_case = [](Padding pad, std::size_t stride) {
    return [pad, stride](Rng& rng) {
      const std::size_t cin = pick(rng, 1, 2), cout = pick(rng, 1, 2);
      const Extents3 k = random_extents(rng, 1, 3);
      const Extents3 e = random_extents(rng, 3, 5);
      Tensor<double> x = uniform(vol(cin, e), rng);
      Tensor<double> kern = uniform({cout, cin, k.d, k.h, k.w}, rng);
      const Extents3 s{stride, stride, stride};
      Tape<double> probe;
      const Shape out = probe.value(conv3d(probe, probe.leaf(x), probe.leaf(kern), s, pad)).shape();
      Tensor<double> w = uniform(out, rng);
      return Instance{[s, pad, w](Tape<double>& t, const std::vector<Var>& v) {
                        return project(t, conv3d(t, v[0], v[1], s, pad), w);
                      },
                      {std::move(x), std::move(kern)}};
    };
  };
  g["conv3d_valid"] = conv_case(Padding::valid, 1);
  g["conv3d_same"] = conv_case(Padding::zero_same, 1);
  g["conv3d_same_stride2"] = conv_case(Padding::zero_same, 2);
  g["conv3d_valid_stride2"] = conv_case(Padding::valid, 2);
  g["bias_add"] = [](Rng& rng) {
    const std::size_t c = pick(rng, 1, 3);
    Tensor<double> x = uniform(vol(c, random_extents(rng, 1, 4)), rng);
    Tensor<double> b = uniform({c}, rng);
    Tensor<double> w = uniform(x.shape(), rng);
    return Instance{[w](Tape<double>& t, const std::vector<Var>& v) { return project(t, bias_add(t, v[0], v[1]), w); },
                    {std::move(x), std::move(b)}};
  };
  g["max_pool3d"] = [](Rng& rng) {
    const std::size_t win = pick(rng, 1, 2), stride = pick(rng, 1, 2);
    Tensor<double> x = distinct(vol(pick(rng, 1, 2), random_extents(rng, 2, 5)), rng);
    return unary(std::move(x),
                 [win, stride](Tape<double>& t, Var a) {
                   return max_pool3d(t, a, Extents3::cube(win), Extents3::cube(stride));
                 },
                 rng);
  };
  g["downsample_average"] = [](Rng& rng) {
    const std::size_t f = pick(rng, 1, 2);
    const Extents3 e{f * pick(rng, 1, 2), f * pick(rng, 1, 2), f * pick(rng, 1, 2)};
    return unary(uniform(vol(pick(rng, 1, 2), e), rng),
                 [f](Tape<double>& t, Var a) { return downsample_average(t, a, f); }, rng);
  };
  g["upsample_repeat"] = [](Rng& rng) {
    const std::size_t f = pick(rng, 1, 3);
    return unary(uniform(vol(pick(rng, 1, 2), random_extents(rng, 1, 2)), rng),
                 [f](Tape<double>& t, Var a) { return upsample(t, a, f, UpsampleMode::repeat); }, rng);
  };
  g["upsample_trilinear"] = [](Rng& rng) {
    const std::size_t f = pick(rng, 1, 3);
    return unary(uniform(vol(pick(rng, 1, 2), random_extents(rng, 1, 2)), rng),
                 [f](Tape<double>& t, Var a) { return upsample(t, a, f, UpsampleMode::trilinear); }, rng);
  };
  auto bn_case = [](bool training) {
    return [training](Rng& rng) {
      const std::size_t c = pick(rng, 1, 2);
      Tensor<double> x = uniform(vol(c, random_extents(rng, 2, 3)), rng);
      Tensor<double> gamma = uniform({c}, rng, 0.5, 1.5), beta = uniform({c}, rng);
      BatchNormState<double> stats(c);
      for (std::size_t i = 0; i < c; ++i) {
        stats.running_mean[i] = uniform({1}, rng)[0];
        stats.running_var[i] = uniform({1}, rng, 0.5, 2.0)[0];
      }
      Tensor<double> w = uniform(x.shape(), rng);
      return Instance{[w, stats, training](Tape<double>& t, const std::vector<Var>& v) {
                        auto s = stats;  // every evaluation starts from the same statistics
                        return project(t, batch_norm(t, v[0], v[1], v[2], s, training), w);
                      },
                      {std::move(x), std::move(gamma), std::move(beta)}};
    };
  };
  g["batch_norm_train"] = bn_case(true);
  g["batch_norm_infer"] = bn_case(false);
  g["relu"] = [](Rng& rng) {
    return unary(off_zero(vol(pick(rng, 1, 2), random_extents(rng, 1, 4)), rng),
                 [](Tape<double>& t, Var a) { return relu(t, a); }, rng);
  };
  g["softmax_channels"] = [](Rng& rng) {
    return unary(uniform(vol(pick(rng, 1, 4), random_extents(rng, 1, 3)), rng, -3.0, 3.0),
                 [](Tape<double>& t, Var a) { return softmax_channels(t, a); }, rng);
  };
  g["concat_channels"] = [](Rng& rng) {
    const Extents3 e = random_extents(rng, 1, 3);
    Tensor<double> a = uniform(vol(pick(rng, 1, 2), e), rng), b = uniform(vol(pick(rng, 1, 2), e), rng);
    Tensor<double> w = uniform(vol(a.dim(0) + b.dim(0), e), rng);
    return Instance{[w](Tape<double>& t, const std::vector<Var>& v) {
                      return project(t, concat_channels(t, v[0], v[1]), w);
                    },
                    {std::move(a), std::move(b)}};
  };
  auto binary = [](auto op) {
    return [op](Rng& rng) {
      const Shape s = vol(pick(rng, 1, 2), random_extents(rng, 1, 3));
      Tensor<double> a = uniform(s, rng), b = uniform(s, rng), w = uniform(s, rng);
      return Instance{[w, op](Tape<double>& t, const std::vector<Var>& v) { return project(t, op(t, v[0], v[1]), w); },
                      {std::move(a), std::move(b)}};
    };
  };
  g["add"] = binary([](Tape<double>& t, Var a, Var b) { return add(t, a, b); });
  g["mul"] = binary([](Tape<double>& t, Var a, Var b) { return mul(t, a, b); });
  g["crop_center"] = [](Rng& rng) {
    const Extents3 e = random_extents(rng, 2, 5);
    const Extents3 target{pick(rng, 1, e.d), pick(rng, 1, e.h), pick(rng, 1, e.w)};
    return unary(uniform(vol(pick(rng, 1, 2), e), rng),
                 [target](Tape<double>& t, Var a) { return crop_center(t, a, target); }, rng);
  };
  g["dropout"] = [](Rng& rng) {
    const std::uint64_t mask_seed = rng();
    return unary(uniform(vol(pick(rng, 1, 2), random_extents(rng, 1, 4)), rng),
                 [mask_seed](Tape<double>& t, Var a) {
                   Rng local(mask_seed);  // same mask on every evaluation
                   return dropout(t, a, 0.5, local, true);
                 },
                 rng);
  };
  g["mean"] = [](Rng& rng) {
    Tensor<double> x = uniform(vol(pick(rng, 1, 2), random_extents(rng, 1, 4)), rng);
    return Instance{[](Tape<double>& t, const std::vector<Var>& v) { return mean(t, v[0]); }, {std::move(x)}};
  };
  return g;
}

std::map<std::string, Generator> loss_generators() {
  std::map<std::string, Generator> g;
  // Losses are checked through a softmax so perturbed inputs stay valid.
  g["cross_entropy"] = [](Rng& rng) {
    const std::size_t K = pick(rng, 2, 4);
    const Extents3 e = random_extents(rng, 1, 4);
    Tensor<double> logits = uniform(vol(K, e), rng, -2.0, 2.0);
    LabelTensor target = random_labels(e, K, rng);
    return Instance{[target](Tape<double>& t, const std::vector<Var>& v) {
                      return cross_entropy_loss(t, softmax_channels(t, v[0]), target);
                    },
                    {std::move(logits)}};
  };
  g["cross_entropy_weighted"] = [](Rng& rng) {
    const std::size_t K = pick(rng, 2, 4);
    const Extents3 e = random_extents(rng, 1, 4);
    Tensor<double> logits = uniform(vol(K, e), rng, -2.0, 2.0);
    LabelTensor target = random_labels(e, K, rng);
    std::vector<double> weights(K);
    for (auto& w : weights) w = uniform({1}, rng, 0.0, 2.0)[0];
    return Instance{[target, weights](Tape<double>& t, const std::vector<Var>& v) {
                      return cross_entropy_loss(t, softmax_channels(t, v[0]), target, weights);
                    },
                    {std::move(logits)}};
  };
  auto overlap = [](LossKind kind, bool include_background) {
    return [kind, include_background](Rng& rng) {
      const std::size_t K = pick(rng, 2, 4);
      const Extents3 e = random_extents(rng, 1, 4);
      Tensor<double> logits = uniform(vol(K, e), rng, -2.0, 2.0);
      Tensor<double> target = one_hot<double>(random_labels(e, K, rng), K);
      return Instance{[target, kind, include_background](Tape<double>& t, const std::vector<Var>& v) {
                        const Var p = softmax_channels(t, v[0]);
                        return kind == LossKind::soft_dice ? soft_dice_loss(t, p, target, include_background)
                                                           : soft_iou_loss(t, p, target, include_background);
                      },
                      {std::move(logits)}};
    };
  };
  g["soft_dice"] = overlap(LossKind::soft_dice, true);
  g["soft_dice_foreground"] = overlap(LossKind::soft_dice, false);
  g["soft_iou"] = overlap(LossKind::soft_iou, true);
  g["soft_iou_foreground"] = overlap(LossKind::soft_iou, false);
  return g;
}

std::map<std::string, Generator> network_generators() {
  std::map<std::string, Generator> g;
  // conv -> batch norm -> relu -> conv -> softmax -> cross-entropy, all inputs differentiable.
  g["two_layer_net"] = [](Rng& rng) {
    const std::size_t cin = 2, hidden = 2, K = 3;
    const Extents3 e = Extents3::cube(4);
    Tensor<double> x = uniform(vol(cin, e), rng);
    Tensor<double> k1 = uniform({hidden, cin, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor<double> gamma = uniform({hidden}, rng, 0.5, 1.5), beta = uniform({hidden}, rng, 0.2, 0.6);
    Tensor<double> k2 = uniform({K, hidden, 1, 1, 1}, rng);
    Tensor<double> b2 = uniform({K}, rng);
    LabelTensor target = random_labels({2, 2, 2}, K, rng);
    return Instance{[target](Tape<double>& t, const std::vector<Var>& v) {
                      BatchNormState<double> s(2);
                      Var h = conv3d(t, v[0], v[1]);
                      h = relu(t, batch_norm(t, h, v[2], v[3], s, true));
                      const Var logits = bias_add(t, conv3d(t, h, v[4]), v[5]);
                      return cross_entropy_loss(t, softmax_channels(t, logits), target);
                    },
                    {std::move(x), std::move(k1), std::move(gamma), std::move(beta), std::move(k2), std::move(b2)}};
  };
  return g;
}

std::map<std::string, Generator> generators(std::string_view scope) {
  std::map<std::string, Generator> out;
  const bool all = scope == "all";
  if (all || scope == "ops") out.merge(op_generators());
  if (all || scope == "losses") out.merge(loss_generators());
  if (all || scope == "network") out.merge(network_generators());
  if (out.empty()) {
    throw UsageError("unknown gradcheck scope '" + std::string(scope) + "' (expected ops, losses, network or all)");
  }
  return out;
}

}  // namespace

std::vector<std::string> gradcheck_names(std::string_view scope) {
  std::vector<std::string> names;
  for (const auto& [name, gen] : generators(scope)) names.push_back(name);
  return names;
}

std::vector<GradcheckResult> run_gradcheck(std::string_view scope, const GradcheckOptions& options) {
  std::vector<GradcheckResult> results;
  std::uint64_t salt = 0;
  for (const auto& [name, gen] : generators(scope)) {
    Rng rng(options.seed * 1000003ULL + (++salt));
    GradcheckResult r{name, options.instances, 0, 0.0};
    for (std::size_t i = 0; i < options.instances; ++i) {
      const Instance inst = gen(rng);
      const double err = gradient_error(inst.f, inst.inputs, options.h);
      r.max_error = std::max(r.max_error, err);
      if (!(err <= options.tolerance)) ++r.failures;
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace emma
