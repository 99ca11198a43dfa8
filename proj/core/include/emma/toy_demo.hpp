#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace emma {

// One sigmoid unit p(y=1|x) = sigmoid(w x + b) trained on two 1-D clusters.
struct ToyMember {
  std::string name;
  std::string loss;           // "logistic" or "squared"
  double weight_decay = 0.0;  // L2 on w
  double flip_0_to_1 = 0.0;   // label-noise rate applied to class 0
  double flip_1_to_0 = 0.0;   // label-noise rate applied to class 1
  double w = 0.0, b = 0.0;
  double crossing = 0.0;      // -b / w, or NaN for a flat posterior
};

struct ToyOptions {
  double center = 10.0;  // clusters at -center (class 0) and +center (class 1)
  double spread = 3.0;
  std::size_t points_per_cluster = 200;
  std::size_t steps = 2000;
  double learning_rate = 0.5;
  double grid_lo = -20.0, grid_hi = 20.0;
  std::size_t grid_points = 401;
};

struct ToyReport {
  std::uint64_t seed = 0;
  std::vector<ToyMember> members;
  std::vector<double> grid;
  std::vector<std::vector<double>> posteriors;  // [member][grid]
  std::vector<double> average;
  double average_crossing = 0.0;  // where the averaged posterior crosses 0.5

  std::string to_json() const;
  std::string to_text() const;
};

// The default set of diverse members: both losses, several decay strengths,
// label noise in both directions, and one heavily decayed near-flat unit.
std::vector<ToyMember> default_toy_members();

ToyReport toy_demo(std::uint64_t seed, const ToyOptions& options = {},
                   std::vector<ToyMember> members = default_toy_members());

// First 0.5 crossing of a sampled curve (linear interpolation), NaN if none.
double half_crossing(const std::vector<double>& grid, const std::vector<double>& curve);

}  // namespace emma
