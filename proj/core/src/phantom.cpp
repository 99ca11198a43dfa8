#include "emma/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace emma {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

bool Ellipsoid::contains(double z, double y, double x) const {
  const double dz = (z - center[0]) / radii[0];
  const double dy = (y - center[1]) / radii[1];
  const double dx = (x - center[2]) / radii[2];
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

namespace {

// Tissue intensities per modality (flair, t1, t1ce, t2).
using Intensity = std::array<double, kNumModalities>;
constexpr Intensity kBrain = {100, 120, 110, 90};
constexpr Intensity kVentricle = {40, 50, 50, 180};
constexpr Intensity kOedema = {180, 95, 100, 170};
constexpr Intensity kRim = {150, 100, 200, 140};
constexpr Intensity kCore = {115, 70, 80, 195};

void check_extents(const PhantomOptions& o) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (o.extents[a] < kMinPhantomExtent) {
      throw ParameterError("phantom extents " + extents_str(o.extents) + " too small for the tumour model (minimum " +
                           std::to_string(kMinPhantomExtent) + " per axis)");
    }
  }
  if (!(o.noise_sd >= 0.0)) throw ParameterError("phantom noise_sd must be non-negative");
}

}  // namespace

PhantomGeometry phantom_geometry(std::uint64_t seed, std::size_t index, const PhantomOptions& options) {
  check_extents(options);
  std::mt19937_64 rng(derive_seed(seed, index, 1));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  PhantomGeometry g;
  const Extents3 e = options.extents;
  for (std::size_t a = 0; a < 3; ++a) {
    g.head.center[a] = (static_cast<double>(e[a]) - 1.0) / 2.0 + between(-1.5, 1.5);
    g.head.radii[a] = static_cast<double>(e[a]) * between(0.40, 0.45);
  }
  g.ventricles.center = g.head.center;
  for (std::size_t a = 0; a < 3; ++a) g.ventricles.radii[a] = g.head.radii[a] * between(0.12, 0.18);

  const double m = static_cast<double>(std::min({e.d, e.h, e.w}));
  for (std::size_t a = 0; a < 3; ++a) g.oedema.radii[a] = m * between(0.14, 0.19);
  const double rim_scale = between(0.55, 0.65);
  const double core_scale = between(0.45, 0.55);
  for (std::size_t a = 0; a < 3; ++a) {
    g.rim.radii[a] = g.oedema.radii[a] * rim_scale;
    g.core.radii[a] = g.rim.radii[a] * core_scale;
  }
  // Tumour centre: oedema fully inside the head, clear of the ventricles.
  for (int attempt = 0;; ++attempt) {
    std::array<double, 3> c{};
    for (std::size_t a = 0; a < 3; ++a) c[a] = g.head.center[a] + g.head.radii[a] * between(-0.5, 0.5);
    double head_r = 0.0, vent_gap = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
      const double d = std::abs(c[a] - g.head.center[a]) + g.oedema.radii[a];
      head_r += (d / g.head.radii[a]) * (d / g.head.radii[a]);
      const double v = (c[a] - g.ventricles.center[a]) / (g.oedema.radii[a] + g.ventricles.radii[a]);
      vent_gap += v * v;
    }
    if ((head_r <= 0.9 && vent_gap >= 1.0) || attempt > 1000) {
      g.oedema.center = g.rim.center = g.core.center = c;
      break;
    }
  }
  return g;
}

Tensor<std::uint8_t> phantom_head_mask(const PhantomGeometry& g, Extents3 e) {
  Tensor<std::uint8_t> mask({e.d, e.h, e.w});
  std::size_t i = 0;
  for (std::size_t z = 0; z < e.d; ++z)
    for (std::size_t y = 0; y < e.h; ++y)
      for (std::size_t x = 0; x < e.w; ++x, ++i) mask[i] = g.head.contains(z, y, x) ? 1 : 0;
  return mask;
}

VolumeCase phantom_case(std::uint64_t seed, std::size_t index, const PhantomOptions& options) {
  const PhantomGeometry g = phantom_geometry(seed, index, options);
  const Extents3 e = options.extents;
  std::mt19937_64 rng(derive_seed(seed, index, 2));
  std::normal_distribution<double> noise(0.0, options.noise_sd);

  // Quadratic log-field coefficients; constant, linear and square terms per axis.
  std::array<double, 7> field{};
  if (options.bias_field) {
    std::mt19937_64 field_rng(derive_seed(seed, index, 3));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& c : field) c = u(field_rng);
    field[0] = 0.0;
    double corner = 0.0;
    for (std::size_t k = 1; k < 7; ++k) corner += std::abs(field[k]);
    for (auto& c : field) c *= options.field_strength / corner;
  }

  VolumeCase c;
  c.id = "phantom_" + std::to_string(seed) + "_" + std::to_string(index);
  c.images = Tensor<float>({kNumModalities, e.d, e.h, e.w}, 0.0f);
  c.labels = LabelTensor({e.d, e.h, e.w}, 0);
  const std::size_t plane = e.volume();
  std::size_t i = 0;
  for (std::size_t z = 0; z < e.d; ++z) {
    for (std::size_t y = 0; y < e.h; ++y) {
      for (std::size_t x = 0; x < e.w; ++x, ++i) {
        if (!g.head.contains(z, y, x)) continue;
        const Intensity* tissue = &kBrain;
        std::uint8_t label = 0;
        if (g.core.contains(z, y, x)) {
          tissue = &kCore, label = 1;
        } else if (g.rim.contains(z, y, x)) {
          tissue = &kRim, label = 4;
        } else if (g.oedema.contains(z, y, x)) {
          tissue = &kOedema, label = 2;
        } else if (g.ventricles.contains(z, y, x)) {
          tissue = &kVentricle;
        }
        c.labels[i] = label;
        double gain = 1.0;
        if (options.bias_field) {
          const double pz = 2.0 * z / (e.d - 1.0) - 1.0, py = 2.0 * y / (e.h - 1.0) - 1.0,
                       px = 2.0 * x / (e.w - 1.0) - 1.0;
          gain = std::exp(field[1] * pz + field[2] * py + field[3] * px + field[4] * pz * pz + field[5] * py * py +
                          field[6] * px * px);
        }
        for (std::size_t m = 0; m < kNumModalities; ++m) {
          const double v = ((*tissue)[m] + noise(rng)) * gain;
          c.images[m * plane + i] = static_cast<float>(std::max(1.0, v));
        }
      }
    }
  }
  return c;
}

std::vector<VolumeCase> phantom_generate(std::uint64_t seed, std::size_t count, const PhantomOptions& options) {
  check_extents(options);
  std::vector<VolumeCase> cases;
  cases.reserve(count);
  for (std::size_t i = 0; i < count; ++i) cases.push_back(phantom_case(seed, i, options));
  return cases;
}

}  // namespace emma
