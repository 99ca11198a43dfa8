#include "emma/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "emma/checkpoint.hpp"
#include "emma/sampling.hpp"

namespace emma {

namespace {

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

template <typename T>
Tensor<T> to_precision(Tensor<float> t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

// Runs the network on the output window [start, start + out) and copies the
// part [start + keep_lo, start + keep_lo + keep) that lies inside the volume.
template <typename T>
void predict_tile(const Network<T>& net, const Tensor<float>& images, const Offset3& start, const Extents3& out,
                  const Offset3& keep_lo, const Extents3& keep, Tensor<double>& dst, Tensor<std::uint32_t>* coverage) {
  const auto raw = pathway_inputs(net.spec(), images, start, out);
  std::vector<Tensor<T>> inputs;
  for (const auto& t : raw) inputs.push_back(to_precision<T>(t));
  const Tensor<T> probs = net.predict(inputs);
  const Extents3 pe = probs.spatial();
  if (pe != out) {
    throw DimensionError(net.spec().id() + ": tile output " + extents_str(pe) + " differs from expected " +
                         extents_str(out));
  }
  const Extents3 v = images.spatial();
  const std::size_t K = probs.dim(0);
  for (std::size_t z = 0; z < keep.d; ++z) {
    const std::ptrdiff_t gz = start[0] + keep_lo[0] + static_cast<std::ptrdiff_t>(z);
    if (gz < 0 || gz >= static_cast<std::ptrdiff_t>(v.d)) continue;
    for (std::size_t y = 0; y < keep.h; ++y) {
      const std::ptrdiff_t gy = start[1] + keep_lo[1] + static_cast<std::ptrdiff_t>(y);
      if (gy < 0 || gy >= static_cast<std::ptrdiff_t>(v.h)) continue;
      for (std::size_t x = 0; x < keep.w; ++x) {
        const std::ptrdiff_t gx = start[2] + keep_lo[2] + static_cast<std::ptrdiff_t>(x);
        if (gx < 0 || gx >= static_cast<std::ptrdiff_t>(v.w)) continue;
        const auto uz = static_cast<std::size_t>(gz), uy = static_cast<std::size_t>(gy), ux = static_cast<std::size_t>(gx);
        for (std::size_t k = 0; k < K; ++k) {
          dst.at(k, uz, uy, ux) = static_cast<double>(
              probs.at(k, static_cast<std::size_t>(keep_lo[0]) + z, static_cast<std::size_t>(keep_lo[1]) + y,
                       static_cast<std::size_t>(keep_lo[2]) + x));
        }
        if (coverage) (*coverage)[(uz * v.h + uy) * v.w + ux] += 1;
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<double> predict_full_volume(const Network<T>& net, const Tensor<float>& images, const TilingOptions& tiling,
                                   Tensor<std::uint32_t>* coverage) {
  const NetworkSpec& spec = net.spec();
  if (images.rank() != 4 || images.dim(0) != spec.in_channels) {
    throw DimensionError(spec.id() + ": expected [" + std::to_string(spec.in_channels) + ",D,H,W] images, got " +
                         shape_str(images.shape()));
  }
  const Extents3 v = images.spatial();
  const std::size_t multiple = extent_multiple(spec);
  for (std::size_t a = 0; a < 3; ++a) {
    if (v[a] < multiple) {
      throw DimensionError(spec.id() + ": volume " + extents_str(v) + " is smaller than the minimum tile extent " +
                           std::to_string(multiple));
    }
  }
  Tensor<double> out({spec.num_classes, v.d, v.h, v.w}, 0.0);
  if (coverage) *coverage = Tensor<std::uint32_t>({v.d, v.h, v.w}, 0);

  const bool valid_family = spec.family == Family::deepmedic;
  Extents3 tile = tiling.tile;
  for (std::size_t a = 0; a < 3; ++a) {
    if (tile[a] == 0) tile[a] = valid_family ? 27 : spec.train_output_extents[a];
    tile[a] = round_up(tile[a], multiple);
  }

  if (valid_family) {
    // Output tiles abut; inputs outside the volume are zero.
    for (std::size_t z = 0; z < v.d; z += tile.d)
      for (std::size_t y = 0; y < v.h; y += tile.h)
        for (std::size_t x = 0; x < v.w; x += tile.w) {
          const Offset3 start{static_cast<std::ptrdiff_t>(z), static_cast<std::ptrdiff_t>(y), static_cast<std::ptrdiff_t>(x)};
          predict_tile(net, images, start, tile, {0, 0, 0}, tile, out, coverage);
        }
    return out;
  }

  bool fits = true;
  for (std::size_t a = 0; a < 3; ++a) fits &= v[a] <= tile[a];
  if (fits) {
    const Extents3 padded{round_up(v.d, multiple), round_up(v.h, multiple), round_up(v.w, multiple)};
    predict_tile(net, images, {0, 0, 0}, padded, {0, 0, 0}, padded, out, coverage);
    return out;
  }

  const ReceptiveField rf = receptive_field(spec);
  Extents3 margin, core;
  for (std::size_t a = 0; a < 3; ++a) {
    std::size_t m = std::min(rf.extent[0] / 2, tile[a] / 4);
    if (m >= multiple) m = m / multiple * multiple;
    margin[a] = m;
    core[a] = tile[a] - 2 * m;
  }
  for (std::size_t z = 0; z < v.d; z += core.d)
    for (std::size_t y = 0; y < v.h; y += core.h)
      for (std::size_t x = 0; x < v.w; x += core.w) {
        const Offset3 start{static_cast<std::ptrdiff_t>(z) - static_cast<std::ptrdiff_t>(margin.d),
                            static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(margin.h),
                            static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(margin.w)};
        const Offset3 keep_lo{static_cast<std::ptrdiff_t>(margin.d), static_cast<std::ptrdiff_t>(margin.h),
                              static_cast<std::ptrdiff_t>(margin.w)};
        predict_tile(net, images, start, tile, keep_lo, core, out, coverage);
      }
  return out;
}

Tensor<double> average_confidences(const std::vector<const Tensor<double>*>& maps) {
  if (maps.empty()) throw UsageError("average_confidences: no maps to average");
  const Shape& shape = maps.front()->shape();
  if (shape.size() != 4) throw DimensionError("average_confidences: expected [K,D,H,W] maps, got " + shape_str(shape));
  for (std::size_t m = 1; m < maps.size(); ++m) {
    if (maps[m]->shape() != shape) {
      throw DimensionError("average_confidences: map " + std::to_string(m) + " has shape " +
                           shape_str(maps[m]->shape()) + ", map 0 has " + shape_str(shape));
    }
  }
  Tensor<double> mean = *maps.front();
  for (std::size_t m = 1; m < maps.size(); ++m) {
    const double inv = 1.0 / static_cast<double>(m + 1);
    const double* src = maps[m]->data();
    double* dst = mean.data();
    for (std::size_t i = 0; i < mean.numel(); ++i) dst[i] += (src[i] - dst[i]) * inv;
  }
  return mean;
}

Tensor<double> average_confidences(const std::vector<ConfidenceMap>& maps) {
  std::vector<const Tensor<double>*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m.probs);
  try {
    return average_confidences(ptrs);
  } catch (const DimensionError& e) {
    std::string ids;
    for (const auto& m : maps) ids += (ids.empty() ? "" : ", ") + m.member_id + " " + shape_str(m.probs.shape());
    throw DimensionError(std::string(e.what()) + " [members: " + ids + "]");
  }
}

LabelTensor argmax_segment(const Tensor<double>& map, const std::vector<std::uint8_t>& label_values) {
  if (map.rank() != 4) throw DimensionError("argmax_segment: expected [K,D,H,W], got " + shape_str(map.shape()));
  const std::size_t K = map.dim(0), n = map.numel() / K;
  if (label_values.size() != K) {
    throw DimensionError("argmax_segment: " + std::to_string(label_values.size()) + " label values for " +
                         std::to_string(K) + " classes");
  }
  LabelTensor out({map.dim(1), map.dim(2), map.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (map[k * n + i] > map[best * n + i]) best = k;
    }
    out[i] = label_values[best];
  }
  return out;
}

EnsembleManifest EnsembleManifest::from_json(const std::string& text, const std::filesystem::path& base_dir) {
  EnsembleManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_array()) throw ConfigError("manifest must be a JSON array");
    for (const auto& e : j) {
      if (!e.is_object()) throw ConfigError("manifest entries must be objects");
      for (const auto& [key, value] : e.items()) {
        if (key != "checkpoint" && key != "spec_id" && key != "normalization") {
          throw ConfigError("manifest entry has unknown key '" + key + "'");
        }
      }
      ManifestEntry entry;
      entry.checkpoint = e.at("checkpoint").get<std::string>();
      if (entry.checkpoint.is_relative() && !base_dir.empty()) entry.checkpoint = base_dir / entry.checkpoint;
      entry.spec_id = e.at("spec_id").get<std::string>();
      entry.normalization = to_string(parse_normalization(e.at("normalization").get<std::string>()));
      m.members.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  if (m.members.empty()) throw ConfigError("manifest lists no members");
  return m;
}

EnsembleManifest EnsembleManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), path.parent_path());
}

std::string EnsembleManifest::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : members) {
    j.push_back({{"checkpoint", e.checkpoint.string()}, {"spec_id", e.spec_id}, {"normalization", e.normalization}});
  }
  return j.dump(2);
}

NormalizationSpec normalization_from_metadata(const NetworkMetadata& m) {
  NormalizationSpec spec;
  spec.version = parse_normalization(m.normalization);
  spec.bias_mode = parse_bias_mode(m.bias_mode);
  spec.bias_degree = m.bias_degree;
  if (!m.landmarks_json.empty()) spec.landmarks = LandmarkModel::from_json(m.landmarks_json);
  return spec;
}

namespace {

std::string normalization_key(const NetworkMetadata& m) {
  return m.normalization + "|" + m.bias_mode + "|" + std::to_string(m.bias_degree) + "|" + m.landmarks_json;
}

template <typename T>
ConfidenceMap predict_member(const ManifestEntry& entry, const VolumeCase& normalized, const TilingOptions& tiling) {
  const Network<T> net = load_checkpoint<T>(entry.checkpoint);
  ConfidenceMap map;
  map.probs = predict_full_volume(net, normalized.images, tiling);
  map.member_id = entry.checkpoint.filename().string();
  map.normalization = entry.normalization;
  return map;
}

}  // namespace

EmmaResult run_emma(const EnsembleManifest& manifest, const VolumeCase& raw, Precision precision,
                    const TilingOptions& tiling, bool keep_member_maps, std::size_t threads) {
  if (manifest.members.empty()) throw ConfigError("manifest lists no members");
  const std::size_t n = manifest.members.size();

  // Check every member and normalize once per distinct normalization.
  std::map<std::string, VolumeCase> normalized;
  std::vector<std::string> keys;
  for (const auto& entry : manifest.members) {
    const CheckpointInfo info = read_checkpoint_info(entry.checkpoint);
    if (info.spec_id != entry.spec_id) {
      throw CheckpointMismatchError("manifest lists '" + entry.checkpoint.string() + "' as " + entry.spec_id +
                                    " but the checkpoint holds " + info.spec_id);
    }
    if (info.metadata.normalization != entry.normalization) {
      throw CheckpointMismatchError("manifest lists '" + entry.checkpoint.string() + "' with normalization " +
                                    entry.normalization + " but it was trained with " + info.metadata.normalization);
    }
    if (info.num_classes != kLabelValues.size()) {
      throw CheckpointMismatchError("member '" + entry.checkpoint.string() + "' predicts " +
                                    std::to_string(info.num_classes) + " classes; labels {0,1,2,4} need 4");
    }
    keys.push_back(normalization_key(info.metadata));
    if (!normalized.count(keys.back())) {
      normalized.emplace(keys.back(), normalize_case(raw, normalization_from_metadata(info.metadata)));
    }
  }

  std::vector<ConfidenceMap> maps(n);
  auto work = [&](std::size_t i) {
    const auto& c = normalized.at(keys[i]);
    maps[i] = precision == Precision::f32 ? predict_member<float>(manifest.members[i], c, tiling)
                                          : predict_member<double>(manifest.members[i], c, tiling);
  };
  if (threads <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    // Members are independent; results land in manifest order.
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n;) {
          try {
            work(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EmmaResult result;
  result.confidence.probs = average_confidences(maps);
  result.confidence.member_id = "emma";
  result.labels = argmax_segment(result.confidence.probs);
  if (keep_member_maps) result.members = std::move(maps);
  return result;
}

template Tensor<double> predict_full_volume<float>(const Network<float>&, const Tensor<float>&, const TilingOptions&,
                                                   Tensor<std::uint32_t>*);
template Tensor<double> predict_full_volume<double>(const Network<double>&, const Tensor<float>&, const TilingOptions&,
                                                    Tensor<std::uint32_t>*);

}  // namespace emma
