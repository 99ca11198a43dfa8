#include "emma/sampling.hpp"

#include <algorithm>

namespace emma {

std::string to_string(SamplingStrategy s) {
  return s == SamplingStrategy::healthy_tumour_5050 ? "healthy_tumour_5050" : "uniform_per_label";
}

SamplingStrategy parse_sampling_strategy(std::string_view name) {
  if (name == "healthy_tumour_5050") return SamplingStrategy::healthy_tumour_5050;
  if (name == "uniform_per_label") return SamplingStrategy::uniform_per_label;
  throw ConfigError("unknown sampling strategy '" + std::string(name) + "'");
}

Tensor<float> extract_window(const Tensor<float>& images, const Offset3& start, const Extents3& extents,
                             std::size_t factor) {
  const Extents3 e = images.spatial();
  const std::size_t C = images.dim(0);
  Tensor<float> out({C, extents.d, extents.h, extents.w}, 0.0f);
  const double inv = 1.0 / static_cast<double>(factor * factor * factor);
  auto inside = [&](std::ptrdiff_t v, std::size_t n) { return v >= 0 && v < static_cast<std::ptrdiff_t>(n); };
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t z = 0; z < extents.d; ++z) {
      for (std::size_t y = 0; y < extents.h; ++y) {
        for (std::size_t x = 0; x < extents.w; ++x) {
          double acc = 0.0;
          for (std::size_t dz = 0; dz < factor; ++dz) {
            const std::ptrdiff_t sz = start[0] + static_cast<std::ptrdiff_t>(z * factor + dz);
            if (!inside(sz, e.d)) continue;
            for (std::size_t dy = 0; dy < factor; ++dy) {
              const std::ptrdiff_t sy = start[1] + static_cast<std::ptrdiff_t>(y * factor + dy);
              if (!inside(sy, e.h)) continue;
              for (std::size_t dx = 0; dx < factor; ++dx) {
                const std::ptrdiff_t sx = start[2] + static_cast<std::ptrdiff_t>(x * factor + dx);
                if (!inside(sx, e.w)) continue;
                acc += images.at(c, static_cast<std::size_t>(sz), static_cast<std::size_t>(sy),
                                 static_cast<std::size_t>(sx));
              }
            }
          }
          out.at(c, z, y, x) = static_cast<float>(factor == 1 ? acc : acc * inv);
        }
      }
    }
  }
  return out;
}

LabelTensor extract_labels(const LabelTensor& labels, const Offset3& start, const Extents3& extents,
                           std::uint8_t fill) {
  LabelTensor out({extents.d, extents.h, extents.w}, fill);
  const auto D = static_cast<std::ptrdiff_t>(labels.dim(0)), H = static_cast<std::ptrdiff_t>(labels.dim(1)),
             W = static_cast<std::ptrdiff_t>(labels.dim(2));
  std::size_t i = 0;
  for (std::size_t z = 0; z < extents.d; ++z) {
    for (std::size_t y = 0; y < extents.h; ++y) {
      for (std::size_t x = 0; x < extents.w; ++x, ++i) {
        const std::ptrdiff_t sz = start[0] + static_cast<std::ptrdiff_t>(z), sy = start[1] + static_cast<std::ptrdiff_t>(y),
                             sx = start[2] + static_cast<std::ptrdiff_t>(x);
        if (sz < 0 || sy < 0 || sx < 0 || sz >= D || sy >= H || sx >= W) continue;
        out[i] = labels[(static_cast<std::size_t>(sz) * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
      }
    }
  }
  return out;
}

std::vector<Tensor<float>> pathway_inputs(const NetworkSpec& spec, const Tensor<float>& images, const Offset3& out_start,
                                          const Extents3& out_extents) {
  std::vector<Tensor<float>> inputs;
  const auto windows = input_windows(spec, out_extents);
  for (std::size_t p = 0; p < windows.size(); ++p) {
    Offset3 s = out_start;
    for (auto& v : s) v += windows[p].offset;
    inputs.push_back(extract_window(images, s, windows[p].extents, spec.pathways[p].factor));
  }
  return inputs;
}

PatchSampler::PatchSampler(const VolumeCase& c, const NetworkSpec& spec, SamplingStrategy strategy,
                           Extents3 out_extents, bool include_background)
    : case_(&c), spec_(spec), strategy_(strategy), out_(out_extents) {
  if (!c.has_labels()) throw DataError("case '" + c.id + "' has no labels to sample from");
  if (out_.volume() == 0) out_ = spec.train_output_extents;
  classes_ = labels_to_classes(c.labels);
  const Mask mask = brain_mask(c);

  std::vector<std::vector<std::size_t>> by_class(kLabelValues.size());
  for (std::size_t i = 0; i < classes_.numel(); ++i) {
    // Tumour voxels always count; background only inside the brain.
    if (classes_[i] != 0 || mask[i]) by_class[classes_[i]].push_back(i);
  }

  std::vector<double> target;
  if (strategy == SamplingStrategy::healthy_tumour_5050) {
    std::vector<std::size_t> tumour;
    for (std::size_t k = 1; k < by_class.size(); ++k) tumour.insert(tumour.end(), by_class[k].begin(), by_class[k].end());
    std::sort(tumour.begin(), tumour.end());
    pools_ = {by_class[0], tumour};
    group_class_ = {0, 1};
    target = {0.5, 0.5};
  } else {
    for (std::size_t k = include_background ? 0 : 1; k < by_class.size(); ++k) {
      pools_.push_back(by_class[k]);
      group_class_.push_back(k);
    }
    target.assign(pools_.size(), 1.0 / static_cast<double>(pools_.size()));
  }

  double present = 0.0;
  for (std::size_t g = 0; g < pools_.size(); ++g) {
    if (pools_[g].empty()) {
      notes_.push_back("case '" + c.id + "': no voxels for sampling group " + std::to_string(g) +
                       "; probability redistributed");
    } else {
      present += target[g];
    }
  }
  if (present == 0.0) throw DataError("case '" + c.id + "': no voxels available for any sampling group");
  probs_.resize(pools_.size());
  for (std::size_t g = 0; g < pools_.size(); ++g) probs_[g] = pools_[g].empty() ? 0.0 : target[g] / present;
}

std::pair<Index3, std::size_t> PatchSampler::draw_center(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  std::size_t g = probs_.size();
  double acc = 0.0;
  for (std::size_t k = 0; k < probs_.size(); ++k) {
    acc += probs_[k];
    if (r < acc) {
      g = k;
      break;
    }
  }
  if (g == probs_.size()) {  // rounding left r just above the total
    g = probs_.size() - 1;
    while (pools_[g].empty()) --g;
  }
  const auto& pool = pools_[g];
  const std::size_t i = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  const Extents3 e = case_->extents();
  const Index3 center{static_cast<std::ptrdiff_t>(i / (e.h * e.w)), static_cast<std::ptrdiff_t>((i / e.w) % e.h),
                      static_cast<std::ptrdiff_t>(i % e.w)};
  const std::size_t cls = strategy_ == SamplingStrategy::healthy_tumour_5050 ? (g == 0 ? 0 : classes_[i]) : group_class_[g];
  return {center, cls};
}

PatchSample PatchSampler::patch_at(const Index3& center, std::size_t center_class) const {
  PatchSample s;
  s.center = center;
  s.center_class = center_class;
  const std::ptrdiff_t cc[3] = {center.z, center.y, center.x};
  for (std::size_t a = 0; a < 3; ++a) s.out_start[a] = cc[a] - static_cast<std::ptrdiff_t>(out_[a] / 2);
  s.inputs = pathway_inputs(spec_, case_->images, s.out_start, out_);
  s.target = extract_labels(classes_, s.out_start, out_, 0);
  return s;
}

PatchSample PatchSampler::sample(std::mt19937_64& rng) const {
  const auto [center, cls] = draw_center(rng);
  return patch_at(center, cls);
}

namespace {

template <typename T>
void flip_axis(Tensor<T>& t, std::size_t axis) {
  // Works on [C,D,H,W] and [D,H,W] by treating leading dims as channels.
  const std::size_t r = t.rank();
  const std::size_t D = t.dim(r - 3), H = t.dim(r - 2), W = t.dim(r - 1);
  const std::size_t C = t.numel() / (D * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    T* base = t.data() + c * D * H * W;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          std::size_t zz = z, yy = y, xx = x;
          if (axis == 0) zz = D - 1 - z;
          if (axis == 1) yy = H - 1 - y;
          if (axis == 2) xx = W - 1 - x;
          const std::size_t a = (z * H + y) * W + x, b = (zz * H + yy) * W + xx;
          if (a < b) std::swap(base[a], base[b]);
        }
  }
}

}  // namespace

void reflect(PatchSample& s, std::size_t axis) {
  if (axis > 2) throw UsageError("reflect: axis must be 0, 1 or 2");
  for (auto& t : s.inputs) flip_axis(t, axis);
  flip_axis(s.target, axis);
}

void augment(PatchSample& s, const ReflectionFlags& flags, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  const bool enabled[3] = {flags.z, flags.y, flags.x};
  for (std::size_t a = 0; a < 3; ++a) {
    if (enabled[a] && coin(rng)) reflect(s, a);
  }
}

}  // namespace emma
