#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "rcalign/autodiff.hpp"
#include "rcalign/ops.hpp"
#include "rcalign/prng.hpp"

namespace rcalign::testing {

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& x : t.data()) x = rng.uniform(lo, hi);
  return t;
}

// Random point on the probability simplex (strictly positive entries).
inline std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  double s = 0.0;
  for (double& x : p) s += (x = -std::log(1.0 - rng.uniform()) + 1e-12);
  for (double& x : p) x /= s;
  return p;
}

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

// Worst elementwise relative error |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-8) over all input entries (central differences). The op output is reduced to a scalar through a fixed random
// projection so every output element contributes to the check.
inline double gradcheck(const GraphFn& f, const std::vector<Tensor>& inputs, double eps = 1e-5,
                        std::uint64_t seed = 99) {
  Tensor weights;
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<std::vector<double>>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.leaf(x, grads != nullptr));
    Var out = f(tape, vars);
    if (weights.size() != out.size()) {
      Rng rng = Rng::stream(seed, 1);
      weights = random_tensor(out.shape(), rng, 0.5, 1.5);
    }
    Var loss = ops::sum(ops::mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const Var& v : vars) {
        auto g = tape.grad(v);
        grads->emplace_back(g.begin(), g.end());
        if (grads->back().empty()) grads->back().assign(v.size(), 0.0);
      }
    }
    return loss.value()[0];
  };

  std::vector<std::vector<double>> analytic;
  evaluate(inputs, &analytic);
  double worst = 0.0;
  std::vector<Tensor> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t k = 0; k < xs[i].size(); ++k) {
      const double orig = xs[i][k];
      xs[i][k] = orig + eps;
      const double up = evaluate(xs, nullptr);
      xs[i][k] = orig - eps;
      const double down = evaluate(xs, nullptr);
      xs[i][k] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i][k];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
    }
  }
  return worst;
}

}  // namespace rcalign::testing
