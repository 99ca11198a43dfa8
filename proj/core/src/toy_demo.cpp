#include "emma/toy_demo.hpp"

#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <random>
#include <sstream>

#include "emma/error.hpp"
#include "emma/phantom.hpp"

namespace emma {

std::vector<ToyMember> default_toy_members() {
  return {
      {"logistic", "logistic", 0.0, 0.0, 0.0},
      {"squared", "squared", 0.0, 0.0, 0.0},
      {"logistic_decay_noise01", "logistic", 0.01, 0.2, 0.0},
      {"logistic_decay_noise10", "logistic", 0.01, 0.0, 0.2},
      {"squared_noise01", "squared", 0.001, 0.1, 0.0},
      {"squared_noise10", "squared", 0.001, 0.0, 0.1},
      {"logistic_heavy_decay", "logistic", 0.5, 0.0, 0.0},
  };
}

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

double half_crossing(const std::vector<double>& grid, const std::vector<double>& curve) {
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double a = curve[i - 1] - 0.5, b = curve[i] - 0.5;
    if (a == 0.0) return grid[i - 1];
    if ((a < 0.0) != (b < 0.0) || b == 0.0) return grid[i - 1] + (grid[i] - grid[i - 1]) * a / (a - b);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

ToyReport toy_demo(std::uint64_t seed, const ToyOptions& o, std::vector<ToyMember> members) {
  if (members.empty()) throw UsageError("toy_demo: no members");
  if (o.grid_points < 2 || !(o.grid_hi > o.grid_lo)) throw ParameterError("toy_demo: bad grid");
  ToyReport report;
  report.seed = seed;

  // Shared data set; each member draws its own label noise.
  std::mt19937_64 data_rng(derive_seed(seed, 7));
  std::normal_distribution<double> spread(0.0, o.spread);
  std::vector<double> xs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < o.points_per_cluster; ++i) {
    xs.push_back(-o.center + spread(data_rng));
    ys.push_back(0);
    xs.push_back(o.center + spread(data_rng));
    ys.push_back(1);
  }
  const double scale = 1.0 / o.center;  // inputs are fed as x / center
  const double n = static_cast<double>(xs.size());

  for (std::size_t m = 0; m < members.size(); ++m) {
    ToyMember& mem = members[m];
    if (mem.loss != "logistic" && mem.loss != "squared") {
      throw ParameterError("toy_demo: unknown loss '" + mem.loss + "'");
    }
    std::mt19937_64 noise_rng(derive_seed(seed, 8, m));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> t(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const double flip = ys[i] == 0 ? mem.flip_0_to_1 : mem.flip_1_to_0;
      t[i] = (u(noise_rng) < flip) ? 1.0 - ys[i] : ys[i];
    }
    double w = 0.0, b = 0.0;
    for (std::size_t step = 0; step < o.steps; ++step) {
      double gw = 0.0, gb = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double x = xs[i] * scale;
        const double p = sigmoid(w * x + b);
        // dL/dz for the two losses on z = w x + b.
        const double dz = mem.loss == "logistic" ? p - t[i] : 2.0 * (p - t[i]) * p * (1.0 - p);
        gw += dz * x;
        gb += dz;
      }
      gw = gw / n + 2.0 * mem.weight_decay * w;
      gb /= n;
      w -= o.learning_rate * gw;
      b -= o.learning_rate * gb;
    }
    mem.w = w * scale;
    mem.b = b;
    mem.crossing = std::abs(mem.w) > 1e-12 ? -mem.b / mem.w : std::numeric_limits<double>::quiet_NaN();
  }

  for (std::size_t g = 0; g < o.grid_points; ++g) {
    report.grid.push_back(o.grid_lo + (o.grid_hi - o.grid_lo) * static_cast<double>(g) / (o.grid_points - 1.0));
  }
  report.average.assign(report.grid.size(), 0.0);
  for (const auto& mem : members) {
    std::vector<double> curve;
    for (double x : report.grid) curve.push_back(sigmoid(mem.w * x + mem.b));
    for (std::size_t g = 0; g < curve.size(); ++g) report.average[g] += curve[g] / static_cast<double>(members.size());
    report.posteriors.push_back(std::move(curve));
  }
  report.average_crossing = half_crossing(report.grid, report.average);
  report.members = std::move(members);
  return report;
}

std::string ToyReport::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto& mem = members[m];
    j["members"].push_back({{"name", mem.name},
                            {"loss", mem.loss},
                            {"weight_decay", mem.weight_decay},
                            {"flip_0_to_1", mem.flip_0_to_1},
                            {"flip_1_to_0", mem.flip_1_to_0},
                            {"w", mem.w},
                            {"b", mem.b},
                            {"crossing", std::isfinite(mem.crossing) ? nlohmann::json(mem.crossing) : nlohmann::json()},
                            {"posterior", posteriors[m]}});
  }
  j["grid"] = grid;
  j["average"] = average;
  j["average_crossing"] = std::isfinite(average_crossing) ? nlohmann::json(average_crossing) : nlohmann::json();
  return j.dump(2);
}

std::string ToyReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "toy ensemble, seed " << seed << "\n";
  os << std::left << std::setw(26) << "member" << std::right << std::setw(10) << "w" << std::setw(10) << "b"
     << std::setw(12) << "crossing" << "\n";
  for (const auto& m : members) {
    os << std::left << std::setw(26) << m.name << std::right << std::setw(10) << m.w << std::setw(10) << m.b
       << std::setw(12) << m.crossing << "\n";
  }
  os << "averaged posterior crosses 0.5 at x = " << average_crossing << "\n";
  return os.str();
}

}  // namespace emma
