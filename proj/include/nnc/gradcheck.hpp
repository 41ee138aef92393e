#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nnc/tape.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

struct GradCheckOptions {
  double eps = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded sample of this many per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  /// When x+eps or x-eps lands on another ReLU branch than x, the step is
  /// divided by 10 up to this many times; a coordinate still straddling a
  /// branch boundary is counted in `kinks_skipped` and not compared.
  int kink_retries = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
  std::size_t kinks_skipped = 0;
};

/// Builds a scalar on a fresh tape from leaves holding `inputs`.
using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Compares tape gradients of `f` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps at every (or a sampled) coordinate.
/// Relative error is |a - n| / (max(|a|, |n|) + 1e-8). ReLU inputs at or
/// within eps of zero are not differentiable points, so those differences are
/// retaken with a smaller step (see GradCheckOptions::kink_retries).
inline GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opt = {}) {
  struct Eval {
    double value;
    std::uint64_t branches;
  };
  auto evaluate = [&](const std::vector<Tensor<double>>& pt, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(pt.size());
    for (const auto& t : pt) leaves.push_back(tape.leaf(t, true));
    Var<double> y = f(tape, leaves);
    if (y.value().size() != 1) shape_fail("grad_check", "function must return a scalar");
    const double v = y.value()[0];
    if (!std::isfinite(v)) throw std::domain_error("grad_check: function value is not finite");
    if (grads != nullptr) {
      tape.backward(y);
      for (const auto& l : leaves) grads->push_back(tape.grad(l));
    }
    return Eval{v, tape.branch_signature()};
  };

  std::vector<Tensor<double>> analytic;
  const std::uint64_t base_branches = evaluate(inputs, &analytic).branches;

  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<std::size_t> coords(inputs[k].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_input > 0 && coords.size() > opt.max_coords_per_input) {
      std::vector<std::size_t> picked;
      std::sample(coords.begin(), coords.end(), std::back_inserter(picked), opt.max_coords_per_input, rng);
      coords = std::move(picked);
    }
    for (std::size_t c : coords) {
      const double orig = inputs[k][c];
      double eps = opt.eps, num = 0;
      bool smooth = false;
      for (int attempt = 0; attempt <= opt.kink_retries && !smooth; ++attempt, eps /= 10) {
        inputs[k][c] = orig + eps;
        const Eval fp = evaluate(inputs, nullptr);
        inputs[k][c] = orig - eps;
        const Eval fm = evaluate(inputs, nullptr);
        inputs[k][c] = orig;
        smooth = fp.branches == base_branches && fm.branches == base_branches;
        num = (fp.value - fm.value) / (2.0 * eps);
      }
      if (!smooth) {
        ++res.kinks_skipped;
        continue;
      }
      const double an = analytic[k][c];
      const double rel = std::abs(an - num) / (std::max(std::abs(an), std::abs(num)) + 1e-8);
      ++res.coords_checked;
      if (rel > res.max_rel_error || !std::isfinite(rel)) {
        res.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        res.worst_input = k;
        res.worst_coord = c;
        res.analytic = an;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace nnc
