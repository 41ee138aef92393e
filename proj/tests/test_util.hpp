#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "nnc/gradcheck.hpp"
#include "nnc/ops.hpp"

namespace nnc::test {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(u(rng));
  return t;
}

/// sum(y * R) for a fixed random R, so every output coordinate carries a
/// distinct weight (plain sum() hides errors for ops like softmax).
inline Var<double> weighted_sum(Var<double> y, std::uint64_t seed) {
  Tape<double>& t = *y.tape;
  Var<double> r = t.constant(random_tensor(y.shape(), seed ^ 0x9e3779b97f4a7c15ULL));
  return sum(mul(y, r));
}

constexpr double kGradTol = 1e-4;

}  // namespace nnc::test
