#include "emma/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "emma/checkpoint.hpp"
#include "emma/phantom.hpp"

namespace emma {

namespace {

using nlohmann::json;

// Typed field access that names the offending key.
class Fields {
 public:
  Fields(const json& j, std::string where, std::set<std::string> allowed) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (!allowed.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }
  bool has(const std::string& key) const { return j_.contains(key); }
  const json& at(const std::string& key) const { return j_.at(key); }

  template <typename V>
  void read(const std::string& key, V& out) const {
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer() || (std::is_unsigned_v<V> && v.get<long long>() < 0)) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<V>();
    } catch (const std::exception&) {
      throw ConfigError(where_ + ": key '" + key + "' has the wrong type (" + v.dump() + ")");
    }
  }
  std::string str(const std::string& key, std::string fallback) const {
    read(key, fallback);
    return fallback;
  }

 private:
  const json& j_;
  std::string where_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() && !base.empty() ? base / path : path;
}

Extents3 parse_patch(const json& v) {
  if (v.is_number_integer() && v.get<long long>() > 0) return Extents3::cube(v.get<std::size_t>());
  if (v.is_array() && v.size() == 3) {
    Extents3 e;
    for (std::size_t a = 0; a < 3; ++a) {
      if (!v[a].is_number_integer() || v[a].get<long long>() <= 0) throw ConfigError("patch extents must be positive integers");
      e[a] = v[a].get<std::size_t>();
    }
    return e;
  }
  throw ConfigError("patch must be a positive integer or an array of three");
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  const Fields top(j, "config",
                   {"seed", "architecture", "num_classes", "width_scale", "patch", "loss", "optimizer", "sampling",
                    "normalization", "batch_size", "iterations", "log_every", "checkpoint_every", "train_cases",
                    "output"});
  top.read("seed", c.seed);
  top.read("architecture", c.architecture);
  top.read("num_classes", c.num_classes);
  top.read("width_scale", c.width_scale);
  if (top.has("patch")) c.patch = parse_patch(top.at("patch"));
  top.read("batch_size", c.batch_size);
  top.read("iterations", c.iterations);
  top.read("log_every", c.log_every);
  top.read("checkpoint_every", c.checkpoint_every);

  if (top.has("loss")) {
    const Fields f(top.at("loss"), "config.loss", {"kind", "class_weights", "include_background"});
    c.loss.kind = parse_loss_kind(f.str("kind", "cross_entropy"));
    f.read("class_weights", c.loss.class_weights);
    f.read("include_background", c.loss.include_background);
  }
  if (top.has("optimizer")) {
    const Fields f(top.at("optimizer"), "config.optimizer",
                   {"kind", "learning_rate", "momentum", "beta1", "beta2", "rho", "eps", "weight_decay"});
    c.optimizer = OptimizerConfig::defaults(parse_optimizer_kind(f.str("kind", "adam")));
    f.read("learning_rate", c.optimizer.learning_rate);
    f.read("momentum", c.optimizer.momentum);
    f.read("beta1", c.optimizer.beta1);
    f.read("beta2", c.optimizer.beta2);
    f.read("rho", c.optimizer.rho);
    f.read("eps", c.optimizer.eps);
    f.read("weight_decay", c.optimizer.weight_decay);
  }
  if (top.has("sampling")) {
    const Fields f(top.at("sampling"), "config.sampling", {"strategy", "include_background", "reflect"});
    c.sampling = parse_sampling_strategy(f.str("strategy", "uniform_per_label"));
    f.read("include_background", c.sampling_include_background);
    if (f.has("reflect")) {
      std::vector<bool> r;
      f.read("reflect", r);
      if (r.size() != 3) throw ConfigError("config.sampling.reflect must list three booleans (z, y, x)");
      c.reflect = {r[0], r[1], r[2]};
    }
  }
  if (top.has("normalization")) {
    const Fields f(top.at("normalization"), "config.normalization", {"version", "bias_mode", "bias_degree"});
    c.normalization.version = parse_normalization(f.str("version", "v1_zscore"));
    c.normalization.bias_mode = parse_bias_mode(f.str("bias_mode", "polynomial"));
    f.read("bias_degree", c.normalization.bias_degree);
  }
  if (top.has("train_cases")) {
    std::vector<std::string> paths;
    top.read("train_cases", paths);
    for (const auto& p : paths) c.train_cases.push_back(resolve(base_dir, p));
  }
  if (top.has("output")) {
    const Fields f(top.at("output"), "config.output", {"checkpoint", "log"});
    c.checkpoint = resolve(base_dir, f.str("checkpoint", c.checkpoint.string()));
    c.log = resolve(base_dir, f.str("log", c.log.string()));
  } else {
    c.checkpoint = resolve(base_dir, c.checkpoint.string());
    c.log = resolve(base_dir, c.log.string());
  }

  // Semantic checks, still before any compute.
  if (c.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (!(c.width_scale > 0.0)) throw ConfigError("width_scale must be > 0");
  if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (c.iterations == 0) throw ConfigError("iterations must be >= 1");
  if (c.normalization.bias_degree != 2 && c.normalization.bias_degree != 3) {
    throw ConfigError("normalization.bias_degree must be 2 or 3");
  }
  c.loss.validate(c.num_classes);
  try {
    c.optimizer.validate();
    c.network_spec();
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid network or optimizer settings: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), path.parent_path());
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["architecture"] = architecture;
  j["num_classes"] = num_classes;
  j["width_scale"] = width_scale;
  if (patch.volume() > 0) j["patch"] = {patch.d, patch.h, patch.w};
  j["loss"] = {{"kind", emma::to_string(loss.kind)}, {"include_background", loss.include_background}};
  if (!loss.class_weights.empty()) j["loss"]["class_weights"] = loss.class_weights;
  j["optimizer"] = {{"kind", emma::to_string(optimizer.kind)}, {"learning_rate", optimizer.learning_rate},
                    {"momentum", optimizer.momentum},           {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},                 {"rho", optimizer.rho},
                    {"eps", optimizer.eps},                     {"weight_decay", optimizer.weight_decay}};
  j["sampling"] = {{"strategy", emma::to_string(sampling)},
                   {"include_background", sampling_include_background},
                   {"reflect", {reflect.z, reflect.y, reflect.x}}};
  j["normalization"] = {{"version", emma::to_string(normalization.version)},
                        {"bias_mode", emma::to_string(normalization.bias_mode)},
                        {"bias_degree", normalization.bias_degree}};
  j["batch_size"] = batch_size;
  j["iterations"] = iterations;
  j["log_every"] = log_every;
  j["checkpoint_every"] = checkpoint_every;
  j["train_cases"] = json::array();
  for (const auto& p : train_cases) j["train_cases"].push_back(p.string());
  j["output"] = {{"checkpoint", checkpoint.string()}, {"log", log.string()}};
  return j.dump(2);
}

NetworkSpec RunConfig::network_spec() const {
  NetworkSpec spec = build_network(architecture, num_classes, width_scale);
  if (patch.volume() > 0) spec = with_training_output(spec, patch);
  return spec;
}

namespace {

template <typename T>
Tensor<T> as(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

void write_log(const std::filesystem::path& path, const std::vector<TrainLogEntry>& log) {
  std::ostringstream os;
  os << "iteration\tloss\n" << std::setprecision(9);
  for (const auto& e : log) os << e.iteration << '\t' << e.loss << '\n';
  detail::write_text_atomic(path, os.str());
}

}  // namespace

template <typename T>
TrainResult train(const RunConfig& config, const std::vector<VolumeCase>& raw_cases, std::ostream* progress) {
  const auto t0 = std::chrono::steady_clock::now();
  if (raw_cases.empty()) throw DataError("train: no training cases");
  const NetworkSpec spec = config.network_spec();

  const NormalizationSpec norm = fit_normalization(raw_cases, config.normalization);
  std::vector<VolumeCase> cases;
  cases.reserve(raw_cases.size());
  for (const auto& c : raw_cases) cases.push_back(normalize_case(c, norm));
  std::vector<PatchSampler> samplers;
  for (const auto& c : cases) {
    samplers.emplace_back(c, spec, config.sampling, spec.train_output_extents, config.sampling_include_background);
    if (progress) {
      for (const auto& note : samplers.back().notes()) *progress << "note: " << note << '\n';
    }
  }

  Network<T> net(spec);
  net.initialize(derive_seed(config.seed, 101));
  auto& md = net.metadata;
  md.loss = to_string(config.loss.kind);
  md.optimizer = to_string(config.optimizer.kind);
  md.normalization = to_string(norm.version);
  md.bias_mode = to_string(norm.bias_mode);
  md.bias_degree = norm.bias_degree;
  md.seed = config.seed;
  md.landmarks_json = norm.landmarks ? norm.landmarks->to_json() : std::string();

  OptimizerState<T> optimizer(config.optimizer);
  std::mt19937_64 sample_rng(derive_seed(config.seed, 202));
  std::mt19937_64 dropout_rng(derive_seed(config.seed, 303));
  std::uniform_int_distribution<std::size_t> pick_case(0, cases.size() - 1);

  TrainResult result;
  result.checkpoint = config.checkpoint;
  auto save = [&](std::uint64_t done) {
    md.iterations = done;
    save_checkpoint(config.checkpoint, net);
    write_log(config.log, result.log);
  };

  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
  for (std::uint64_t it = 1; it <= config.iterations; ++it) {
    GradientMap<T> grads;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t k = pick_case(sample_rng);
      PatchSample s = samplers[k].sample(sample_rng);
      augment(s, config.reflect, sample_rng);
      std::vector<Tensor<T>> inputs;
      for (const auto& t : s.inputs) inputs.push_back(as<T>(t));

      Tape<T> tape;
      std::map<std::string, Var> bindings;
      const Var probs = net.forward(tape, inputs, true, &dropout_rng, &bindings);
      const Var loss = compute_loss(tape, probs, s.target, config.loss);
      const double value = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(value)) {
        save(it - 1);
        throw NumericError("non-finite loss at iteration " + std::to_string(it) + "; last good checkpoint kept at '" +
                           config.checkpoint.string() + "'");
      }
      loss_sum += value;
      tape.backward(loss);
      for (const auto& [name, v] : bindings) {
        Tensor<T> g = tape.grad(v);
        auto [pos, inserted] = grads.try_emplace(name, Tensor<T>::zeros(g.shape()));
        T* dst = pos->second.data();
        for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += static_cast<T>(g[i] * inv_batch);
      }
    }
    try {
      optimizer.step(net.parameters(), grads);
    } catch (const NumericError& e) {
      save(it - 1);
      throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(it) + "; last good checkpoint kept at '" +
                         config.checkpoint.string() + "'");
    }
    result.log.push_back({it, loss_sum * inv_batch});
    if (progress && config.log_every && (it % config.log_every == 0 || it == 1)) {
      *progress << "iter " << it << "/" << config.iterations << " loss " << std::setprecision(6)
                << result.log.back().loss << '\n';
    }
    if (config.checkpoint_every && it % config.checkpoint_every == 0 && it != config.iterations) save(it);
  }
  save(config.iterations);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

TrainResult train_from_config(const RunConfig& config, Precision precision, std::ostream* progress) {
  if (config.train_cases.empty()) throw ConfigError("config lists no train_cases");
  std::vector<VolumeCase> cases;
  for (const auto& p : config.train_cases) cases.push_back(read_case(p, true));
  return precision == Precision::f32 ? train<float>(config, cases, progress) : train<double>(config, cases, progress);
}

template TrainResult train<float>(const RunConfig&, const std::vector<VolumeCase>&, std::ostream*);
template TrainResult train<double>(const RunConfig&, const std::vector<VolumeCase>&, std::ostream*);

}  // namespace emma
