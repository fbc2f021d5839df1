// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Limited-memory BFGS with a strong-Wolfe line search (Nocedal & Wright,
// Algorithms 3.5/3.6 and 7.4). Drives the full-sequence hand fitting.

#ifndef INHAND_LBFGS_HPP
#define INHAND_LBFGS_HPP

#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "inhand/core.hpp"

namespace inhand {

struct LbfgsOptions {
  int memory = 10;
  int max_iterations = 200;
  double grad_tolerance = 1e-10;
  double stall_rel_decrease = 1e-9;  // relative decrease considered a stall
  int stall_iterations = 10;
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
  int max_line_search_steps = 40;
};

struct LbfgsResult {
  VecX x;
  double f = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  int function_evals = 0;
  bool converged = false;
  std::string status;
  std::vector<double> energy_trace;  // accepted f per iteration, starting at init
};

/// Objective callback: value + gradient at x.
using LbfgsObjective = std::function<double(const VecX&, VecX*)>;

namespace detail {

inline double cubic_interp(double a, double fa, double ga, double b, double fb, double gb) {
  // Minimizer of the cubic through (a, fa, ga), (b, fb, gb); falls back to
  // bisection when the cubic is degenerate.
  double d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
  double disc = d1 * d1 - ga * gb;
  if (disc < 0.0) return 0.5 * (a + b);
  double d2 = std::sqrt(disc);
  if (b < a) d2 = -d2;
  double t = b - (b - a) * ((gb + d2 - d1) / (gb - ga + 2.0 * d2));
  double lo = std::min(a, b), hi = std::max(a, b);
  if (!(t > lo && t < hi)) t = 0.5 * (a + b);
  return t;
}

}  // namespace detail

/// Strong-Wolfe line search. phi(alpha) = f(x + alpha d). Returns the accepted
/// step (0 on failure) and leaves the evaluation at the accepted point in
/// f_out/g_out.
inline double wolfe_line_search(const LbfgsObjective& objective, const VecX& x,
                                const VecX& direction, double f0, const VecX& g0,
                                double alpha_init, const LbfgsOptions& opt, double* f_out,
                                VecX* g_out, int* evals) {
  const double dphi0 = g0.dot(direction);
  if (dphi0 >= 0.0) return 0.0;  // not a descent direction

  auto eval = [&](double alpha, double* f, VecX* g) {
    *f = objective(x + alpha * direction, g);
    ++(*evals);
    return g->dot(direction);
  };

  double alpha_prev = 0.0, f_prev = f0, dphi_prev = dphi0;
  double alpha = alpha_init;
  double f = 0.0, dphi = 0.0;
  VecX g(x.size());

  double lo = 0.0, hi = 0.0, f_lo = 0.0, f_hi = 0.0, dphi_lo = 0.0, dphi_hi = 0.0;
  bool bracketed = false;

  for (int it = 0; it < opt.max_line_search_steps && !bracketed; ++it) {
    dphi = eval(alpha, &f, &g);
    if (!std::isfinite(f)) {
      alpha *= 0.5;  // step overshot into a non-finite region
      continue;
    }
    if (f > f0 + opt.wolfe_c1 * alpha * dphi0 || (it > 0 && f >= f_prev)) {
      lo = alpha_prev; f_lo = f_prev; dphi_lo = dphi_prev;
      hi = alpha; f_hi = f; dphi_hi = dphi;
      bracketed = true;
      break;
    }
    if (std::abs(dphi) <= -opt.wolfe_c2 * dphi0) {
      *f_out = f;
      *g_out = g;
      return alpha;
    }
    if (dphi >= 0.0) {
      lo = alpha; f_lo = f; dphi_lo = dphi;
      hi = alpha_prev; f_hi = f_prev; dphi_hi = dphi_prev;
      bracketed = true;
      break;
    }
    alpha_prev = alpha; f_prev = f; dphi_prev = dphi;
    alpha *= 2.0;
  }
  if (!bracketed) return 0.0;

  // Zoom.
  for (int it = 0; it < opt.max_line_search_steps; ++it) {
    alpha = detail::cubic_interp(lo, f_lo, dphi_lo, hi, f_hi, dphi_hi);
    double width = std::abs(hi - lo);
    if (width < 1e-16 * std::max(1.0, std::abs(lo))) break;
    // Keep the trial point strictly inside the bracket.
    double inner_lo = std::min(lo, hi) + 0.1 * width;
    double inner_hi = std::max(lo, hi) - 0.1 * width;
    alpha = std::min(std::max(alpha, inner_lo), inner_hi);

    dphi = eval(alpha, &f, &g);
    if (!std::isfinite(f) || f > f0 + opt.wolfe_c1 * alpha * dphi0 || f >= f_lo) {
      hi = alpha; f_hi = f; dphi_hi = dphi;
      continue;
    }
    if (std::abs(dphi) <= -opt.wolfe_c2 * dphi0) {
      *f_out = f;
      *g_out = g;
      return alpha;
    }
    if (dphi * (hi - lo) >= 0.0) {
      hi = lo; f_hi = f_lo; dphi_hi = dphi_lo;
    }
    lo = alpha; f_lo = f; dphi_lo = dphi;
  }
  // Fall back to the best point found if it at least decreases sufficiently.
  if (std::isfinite(f_lo) && lo > 0.0 && f_lo < f0) {
    dphi = eval(lo, &f, &g);
    *f_out = f;
    *g_out = g;
    return lo;
  }
  return 0.0;
}

inline LbfgsResult lbfgs_minimize(const LbfgsObjective& objective, VecX x0,
                                  const LbfgsOptions& opt = {},
                                  const std::function<void(int, double, const VecX&)>& per_iter = nullptr) {
  LbfgsResult res;
  const int n = static_cast<int>(x0.size());
  VecX x = std::move(x0);
  VecX g(n);
  double f = objective(x, &g);
  res.function_evals = 1;
  res.energy_trace.push_back(f);
  if (!std::isfinite(f)) {
    res.x = x;
    res.f = f;
    res.status = "non-finite objective at initial point";
    return res;
  }

  std::deque<VecX> s_hist, y_hist;
  std::deque<double> rho_hist;
  int stall_count = 0;

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    if (g.norm() <= opt.grad_tolerance * std::max(1.0, x.norm())) {
      res.converged = true;
      res.status = "gradient tolerance reached";
      break;
    }

    // Two-loop recursion.
    VecX q = g;
    const int m = static_cast<int>(s_hist.size());
    std::vector<double> alpha_coef(m);
    for (int i = m - 1; i >= 0; --i) {
      alpha_coef[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha_coef[i] * y_hist[i];
    }
    if (m > 0) {
      double gamma = s_hist[m - 1].dot(y_hist[m - 1]) / y_hist[m - 1].squaredNorm();
      q *= gamma;
    }
    for (int i = 0; i < m; ++i) {
      double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha_coef[i] - beta) * s_hist[i];
    }
    VecX direction = -q;

    double alpha_init = (iter == 0 && m == 0) ? std::min(1.0, 1.0 / std::max(1e-12, g.norm()))
                                              : 1.0;
    double f_new = 0.0;
    VecX g_new(n);
    double alpha = wolfe_line_search(objective, x, direction, f, g, alpha_init, opt, &f_new,
                                     &g_new, &res.function_evals);
    if (alpha <= 0.0) {
      // Retry once with steepest descent before giving up.
      direction = -g;
      alpha = wolfe_line_search(objective, x, direction, f, g,
                                1.0 / std::max(1e-12, g.norm()), opt, &f_new, &g_new,
                                &res.function_evals);
      if (alpha <= 0.0) {
        res.status = "line search failed";
        break;
      }
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    VecX s = alpha * direction;
    VecX y = g_new - g;
    double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }

    double rel_decrease = (f - f_new) / std::max(1.0, std::abs(f));
    x += alpha * direction;
    f = f_new;
    g.swap(g_new);
    res.iterations = iter + 1;
    res.energy_trace.push_back(f);
    if (per_iter) per_iter(iter, f, x);

    if (rel_decrease < opt.stall_rel_decrease) {
      if (++stall_count >= opt.stall_iterations) {
        res.converged = true;
        res.status = "converged (relative decrease stalled)";
        break;
      }
    } else {
      stall_count = 0;
    }
  }
  if (res.status.empty()) {
    res.status = res.converged ? "converged" : "iteration limit reached";
  }
  res.x = std::move(x);
  res.f = f;
  return res;
}

}  // namespace inhand

#endif  // INHAND_LBFGS_HPP
