#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace dermcbm {

// Objective callback: returns f(x) and writes the gradient into `grad`.
using Objective = std::function<double(const std::vector<double>& x, std::vector<double>& grad)>;

struct LbfgsOptions {
  int max_iterations = 1000;
  double gradient_tolerance = 1e-6;  // stop when ||grad||_2 < tolerance
  std::size_t history = 10;
};

struct LbfgsResult {
  std::vector<double> x;
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Limited-memory BFGS with a backtracking Armijo line search. Deterministic:
// no randomness and a fixed evaluation order.
LbfgsResult minimize_lbfgs(const Objective& objective, std::vector<double> x0,
                           const LbfgsOptions& options);

}  // namespace dermcbm
