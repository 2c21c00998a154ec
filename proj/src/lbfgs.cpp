#include "dermcbm/lbfgs.hpp"

#include <cmath>
#include <deque>

#include "dermcbm/errors.hpp"
#include "dermcbm/numerics.hpp"

namespace dermcbm {

namespace {

constexpr double kArmijo = 1e-4;
constexpr int kMaxBacktracks = 60;

struct Pair {
  std::vector<double> s;
  std::vector<double> y;
  double rho;
};

// Two-loop recursion: returns -H * grad.
std::vector<double> search_direction(const std::vector<double>& grad,
                                     const std::deque<Pair>& history) {
  std::vector<double> q = grad;
  std::vector<double> alpha(history.size());
  for (std::size_t i = history.size(); i-- > 0;) {
    alpha[i] = history[i].rho * dot(history[i].s, q);
    for (std::size_t j = 0; j < q.size(); ++j) q[j] -= alpha[i] * history[i].y[j];
  }
  if (!history.empty()) {
    const Pair& last = history.back();
    const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
    for (double& v : q) v *= gamma;
  }
  for (std::size_t i = 0; i < history.size(); ++i) {
    const double beta = history[i].rho * dot(history[i].y, q);
    for (std::size_t j = 0; j < q.size(); ++j) q[j] += (alpha[i] - beta) * history[i].s[j];
  }
  for (double& v : q) v = -v;
  return q;
}

}  // namespace

LbfgsResult minimize_lbfgs(const Objective& objective, std::vector<double> x0,
                           const LbfgsOptions& options) {
  LbfgsResult r;
  r.x = std::move(x0);
  std::vector<double> grad(r.x.size());
  r.value = objective(r.x, grad);
  if (!std::isfinite(r.value)) throw NumericalError("L-BFGS: non-finite objective at start");
  r.gradient_norm = norm(grad);

  std::deque<Pair> history;
  std::vector<double> x_new(r.x.size()), grad_new(r.x.size());
  while (r.iterations < options.max_iterations) {
    if (r.gradient_norm < options.gradient_tolerance) {
      r.converged = true;
      break;
    }
    std::vector<double> dir = search_direction(grad, history);
    double slope = dot(grad, dir);
    if (!(slope < 0.0)) {
      // Not a descent direction; restart from steepest descent.
      history.clear();
      dir = grad;
      for (double& v : dir) v = -v;
      slope = -r.gradient_norm * r.gradient_norm;
    }
    double step = history.empty() ? std::min(1.0, 1.0 / r.gradient_norm) : 1.0;

    double value_new = 0.0;
    bool accepted = false;
    for (int b = 0; b < kMaxBacktracks; ++b, step *= 0.5) {
      for (std::size_t j = 0; j < x_new.size(); ++j) x_new[j] = r.x[j] + step * dir[j];
      value_new = objective(x_new, grad_new);
      if (std::isfinite(value_new) && value_new <= r.value + kArmijo * step * slope) {
        accepted = true;
        break;
      }
    }
    ++r.iterations;
    if (!accepted) break;  // no further progress possible at this precision

    Pair p{std::vector<double>(x_new.size()), std::vector<double>(x_new.size()), 0.0};
    for (std::size_t j = 0; j < x_new.size(); ++j) {
      p.s[j] = x_new[j] - r.x[j];
      p.y[j] = grad_new[j] - grad[j];
    }
    const double sy = dot(p.s, p.y);
    if (sy > 1e-12 * norm(p.s) * norm(p.y)) {
      p.rho = 1.0 / sy;
      history.push_back(std::move(p));
      if (history.size() > options.history) history.pop_front();
    }
    r.x.swap(x_new);
    grad.swap(grad_new);
    r.value = value_new;
    r.gradient_norm = norm(grad);
  }
  if (r.gradient_norm < options.gradient_tolerance) r.converged = true;
  return r;
}

}  // namespace dermcbm
