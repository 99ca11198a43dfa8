#pragma once

// Reference implementations shared by the unit and acceptance tests. They are
// written for clarity, not speed, and use nothing from the library beyond
// its tensor types.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "emma/metrics.hpp"
#include "emma/normalization.hpp"

namespace emma::oracle {

// Mask voxels with a face neighbour outside the mask or outside the volume.
inline std::vector<std::array<std::ptrdiff_t, 3>> surface_points(const Mask& m) {
  const auto D = static_cast<std::ptrdiff_t>(m.dim(0)), H = static_cast<std::ptrdiff_t>(m.dim(1)),
             W = static_cast<std::ptrdiff_t>(m.dim(2));
  auto at = [&](std::ptrdiff_t z, std::ptrdiff_t y, std::ptrdiff_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= D || y >= H || x >= W) return false;
    return m[static_cast<std::size_t>((z * H + y) * W + x)] != 0;
  };
  std::vector<std::array<std::ptrdiff_t, 3>> pts;
  for (std::ptrdiff_t z = 0; z < D; ++z)
    for (std::ptrdiff_t y = 0; y < H; ++y)
      for (std::ptrdiff_t x = 0; x < W; ++x) {
        if (!at(z, y, x)) continue;
        if (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) || !at(z, y, x - 1) ||
            !at(z, y, x + 1)) {
          pts.push_back({z, y, x});
        }
      }
  return pts;
}

// All-pairs directed distances, nearest-rank 95th percentile, symmetric max.
inline double hausdorff95(const Mask& a, const Mask& b, const Spacing& s = {1.0, 1.0, 1.0}) {
  const auto pa = surface_points(a), pb = surface_points(b);
  auto directed = [&](const auto& from, const auto& to) {
    std::vector<double> d;
    for (const auto& p : from) {
      double best = INFINITY;
      for (const auto& q : to) {
        const double dz = (p[0] - q[0]) * s[0], dy = (p[1] - q[1]) * s[1], dx = (p[2] - q[2]) * s[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      d.push_back(std::sqrt(best));
    }
    std::sort(d.begin(), d.end());
    const std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size())));
    return d[std::max<std::size_t>(rank, 1) - 1];
  };
  return std::max(directed(pa, pb), directed(pb, pa));
}

// Random blobby mask: union of a few random boxes plus salt noise.
inline Mask random_mask(Extents3 e, std::mt19937_64& rng) {
  Mask m({e.d, e.h, e.w}, std::uint8_t{0});
  std::uniform_int_distribution<int> nboxes(1, 3);
  const int boxes = nboxes(rng);
  for (int b = 0; b < boxes; ++b) {
    std::size_t lo[3], hi[3];
    for (std::size_t a = 0; a < 3; ++a) {
      std::uniform_int_distribution<std::size_t> u(0, e[a] - 1);
      lo[a] = u(rng);
      hi[a] = std::min(e[a], lo[a] + 1 + u(rng) / 2);
    }
    for (std::size_t z = lo[0]; z < hi[0]; ++z)
      for (std::size_t y = lo[1]; y < hi[1]; ++y)
        for (std::size_t x = lo[2]; x < hi[2]; ++x) m[(z * e.h + y) * e.w + x] = 1;
  }
  std::bernoulli_distribution salt(0.05);
  for (auto& v : m.storage()) {
    if (salt(rng)) v = 1;
  }
  return m;
}

inline Extents3 random_extents(std::mt19937_64& rng, std::size_t max_extent = 8) {
  std::uniform_int_distribution<std::size_t> u(2, max_extent);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace emma::oracle

namespace emma::oracle {

// Piecewise-linear interpolation through (xs, ys), extended past both ends
// with the terminal slopes. xs must be strictly increasing.
inline double piecewise_linear(const std::vector<double>& xs, const std::vector<double>& ys, double v) {
  std::size_t seg = 0;
  while (seg + 2 < xs.size() && v > xs[seg + 1]) ++seg;
  return ys[seg] + (ys[seg + 1] - ys[seg]) / (xs[seg + 1] - xs[seg]) * (v - xs[seg]);
}

// 11^3 case whose 1001 in-mask voxels hold a permutation of a*1..a*1001 + b in
// every modality, so each landmark percentile falls exactly on a voxel value.
inline VolumeCase ladder_case(std::uint64_t seed, double a = 1.0, double b = 0.0) {
  VolumeCase c;
  c.id = "ladder";
  c.images = Tensor<float>({4, 11, 11, 11}, 0.0f);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> slots(1331);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  std::shuffle(slots.begin(), slots.end(), std::mt19937_64(7));
  slots.resize(1001);
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<std::size_t> order = slots;
    std::shuffle(order.begin(), order.end(), rng);
    auto ch = c.images.channel(m);
    for (std::size_t k = 0; k < order.size(); ++k) ch[order[k]] = static_cast<float>(a * (k + 1.0) + b);
  }
  return c;
}

}  // namespace emma::oracle
