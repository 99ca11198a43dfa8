#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "emma/volume.hpp"

namespace emma {

inline constexpr std::size_t kMinPhantomExtent = 48;

struct PhantomOptions {
  Extents3 extents{64, 64, 64};
  double noise_sd = 8.0;
  // Smooth multiplicative field exp(poly2(x,y,z)); strength is the largest
  // log-amplitude at the volume corners.
  bool bias_field = false;
  double field_strength = 0.25;
};

struct Ellipsoid {
  std::array<double, 3> center{};  // voxel coordinates (z, y, x)
  std::array<double, 3> radii{};

  bool contains(double z, double y, double x) const;
};

// Generated geometry: head, ventricles, and the nested tumour
// core (label 1) inside enhancing rim (label 4) inside oedema (label 2).
struct PhantomGeometry {
  Ellipsoid head, ventricles, oedema, rim, core;
};

// Per-case geometry and noise come from streams derived from (seed, index),
// so a case does not depend on how many others are generated alongside it.
PhantomGeometry phantom_geometry(std::uint64_t seed, std::size_t index, const PhantomOptions& options = {});
VolumeCase phantom_case(std::uint64_t seed, std::size_t index, const PhantomOptions& options = {});
std::vector<VolumeCase> phantom_generate(std::uint64_t seed, std::size_t count, const PhantomOptions& options = {});

// Head mask implied by the geometry, [D,H,W] of 0/1.
Tensor<std::uint8_t> phantom_head_mask(const PhantomGeometry& g, Extents3 extents);

// Mixes a seed with stream identifiers (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace emma
