#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "emma/autodiff.hpp"

namespace emma {

// Builds a scalar from leaves bound to `inputs`, in the same order.
using ScalarFunction = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Largest relative error between the tape gradient and central differences
// over every entry of every input. Relative error is |a - n| / max(|a|, |n|,
// kGradcheckFloor) so entries with vanishing gradient are compared absolutely.
inline constexpr double kGradcheckFloor = 1e-3;
double gradient_error(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs, double h = 1e-4);

struct GradcheckOptions {
  std::size_t instances = 20;
  double h = 1e-4;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double max_error = 0.0;
};

// Scopes: "ops", "losses", "network" or "all".
std::vector<std::string> gradcheck_names(std::string_view scope);
std::vector<GradcheckResult> run_gradcheck(std::string_view scope, const GradcheckOptions& options = {});

}  // namespace emma
