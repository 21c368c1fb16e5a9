#pragma once

// Independent oracles for the L2 ball-and-box projection on 3-pixel inputs.

#include "owb/attacks.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace owb::testing {

/// Nearest point of box-and-ball to `x` by grid pattern search: a 33^3 grid
/// spanning +-w around the incumbent; recentre on improvement, else halve w.
inline Tensor grid_project(const Tensor& x, const Tensor& x0, double eps) {
  using P = std::array<double, 3>;
  auto dist2 = [&](const P& p) {
    double d = 0;
    for (int i = 0; i < 3; ++i) d += (p[i] - x[i]) * (p[i] - x[i]);
    return d;
  };
  auto feasible = [&](const P& p) {
    double d = 0;
    for (int i = 0; i < 3; ++i) {
      if (p[i] < 0 || p[i] > 1) return false;
      d += (p[i] - x0[i]) * (p[i] - x0[i]);
    }
    return d <= eps * eps;
  };
  P best{x0[0], x0[1], x0[2]};
  double best_d = dist2(best);
  for (double w = eps; w > 1e-10;) {
    const double res = w / 16;
    const P centre = best;
    for (int i = -16; i <= 16; ++i)
      for (int j = -16; j <= 16; ++j)
        for (int k = -16; k <= 16; ++k) {
          const P p{centre[0] + i * res, centre[1] + j * res, centre[2] + k * res};
          if (!feasible(p)) continue;
          const double d = dist2(p);
          if (d < best_d) {
            best_d = d;
            best = p;
          }
        }
    if (best == centre) w /= 2;
  }
  return Tensor({3}, {best[0], best[1], best[2]});
}

/// Exact nearest point of box-and-ball by enumerating active sets: every
/// coordinate is free or pinned to 0 or 1, and the ball is active or not.
inline Tensor enumerate_project(const Tensor& x, const Tensor& x0, double eps) {
  Tensor best;
  double best_d = std::numeric_limits<double>::infinity();
  for (int code = 0; code < 27; ++code) {
    std::array<int, 3> pin{code % 3, code / 3 % 3, code / 9};  // 0 free, 1 -> 0.0, 2 -> 1.0
    for (bool ball : {false, true}) {
      Tensor p = x;
      double pinned = 0, free_norm = 0;
      for (Index i = 0; i < 3; ++i) {
        if (pin[static_cast<std::size_t>(i)] == 0) {
          free_norm += (x[i] - x0[i]) * (x[i] - x0[i]);
          continue;
        }
        p[i] = pin[static_cast<std::size_t>(i)] == 1 ? 0.0 : 1.0;
        pinned += (p[i] - x0[i]) * (p[i] - x0[i]);
      }
      if (ball) {
        if (pinned > eps * eps || free_norm == 0) continue;
        const double r = std::sqrt(eps * eps - pinned) / std::sqrt(free_norm);
        for (Index i = 0; i < 3; ++i) {
          if (pin[static_cast<std::size_t>(i)] == 0) p[i] = x0[i] + r * (x[i] - x0[i]);
        }
      }
      if (!is_feasible(p, x0, {Norm::l2, eps}, 1e-12)) continue;
      const double d = l2_distance(p, x);
      if (d < best_d) {
        best_d = d;
        best = p;
      }
    }
  }
  return best;
}

}  // namespace owb::testing
