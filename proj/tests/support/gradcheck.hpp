#pragma once

// Central finite-difference gradient checks for graph-built scalar losses.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "nbisect/tensornet/graph.hpp"

namespace nbisect::testing {

// Builds a scalar loss from the bound parameters.
using LossBuilder = std::function<tn::Var(tn::Graph&, const tn::ParameterSet&)>;

inline double eval_loss(const LossBuilder& build, const tn::ParameterSet& ps) {
  tn::Graph g;
  return g.value(build(g, ps)).item();
}

struct GradCheckResult {
  double worst_relative_error = 0;
  std::string worst_parameter;
};

// Relative error per parameter slice: max |analytic - numeric| divided by
// max(max|analytic|, max|numeric|, floor). The floor only matters when a
// whole slice is (numerically) zero.
inline GradCheckResult gradcheck(const LossBuilder& build, tn::ParameterSet ps, double h = 1e-5,
                                 double floor = 1e-10) {
  tn::Graph g;
  g.backward(build(g, ps));
  const tn::Gradients analytic = g.parameter_grads(ps);
  GradCheckResult res;
  for (std::size_t p = 0; p < ps.size(); ++p) {
    double diff = 0, scale = floor;
    tn::Tensor& t = ps[p].value;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = eval_loss(build, ps);
      t[i] = orig - h;
      const double down = eval_loss(build, ps);
      t[i] = orig;
      const double numeric = (up - down) / (2 * h);
      diff = std::max(diff, std::abs(numeric - analytic[p][i]));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic[p][i])});
    }
    const double rel = diff / scale;
    if (rel > res.worst_relative_error) {
      res.worst_relative_error = rel;
      res.worst_parameter = ps[p].name;
    }
  }
  return res;
}

inline tn::Tensor random_tensor(tn::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  tn::Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Scalar projection sum(y * weights) with fixed random weights, so every
// output element contributes a distinct gradient.
inline tn::Var project(tn::Graph& g, tn::Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  tn::Tensor w = random_tensor(g.value(y).shape(), rng);
  tn::Var wv = g.input(std::move(w));
  // y * w via (y + w)^2 - y^2 - w^2 = 2 y w.
  tn::Var s = tn::ops::square(g, tn::ops::add(g, y, wv));
  tn::Var total = tn::ops::sum(g, s);
  tn::Var ysq = tn::ops::sum(g, tn::ops::square(g, y));
  tn::Var neg = tn::ops::scale(g, ysq, -1.0);
  return tn::ops::scale(g, tn::ops::add(g, total, neg), 0.5);
}

}  // namespace nbisect::testing
