#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "nnc/tensor.hpp"

namespace nnc {

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
};

/// Per-parameter moments keyed by parameter name, plus a shared step counter.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::map<std::string, AdamMoments<T>> moments;
};

namespace detail {

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based step.
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamMoments<T>& mom, const AdamHyper& h, std::uint64_t t) {
  if (grad.shape() != param.shape()) {
    shape_fail("adam_step", "gradient " + to_string(grad.shape()) + " does not match parameter " + to_string(param.shape()));
  }
  if (mom.m.empty()) {
    mom.m = Tensor<T>(param.shape());
    mom.v = Tensor<T>(param.shape());
  }
  if (mom.m.shape() != param.shape()) shape_fail("adam_step", "moment shape does not match parameter");
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T c1 = T(1) - static_cast<T>(std::pow(h.beta1, static_cast<double>(t)));
  const T c2 = T(1) - static_cast<T>(std::pow(h.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(h.lr), eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
    mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
    const T mhat = mom.m[i] / c1;
    const T vhat = mom.v[i] / c2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace detail

/// Advances the step counter once and updates every parameter that has a
/// gradient entry. Parameters missing from `grads` are left alone.
template <typename T>
void adam_step(std::map<std::string, Tensor<T>>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name + "'");
    if (g.shape() != it->second.shape()) {
      shape_fail("adam_step", "parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                                  " but gradient has " + to_string(g.shape()));
    }
  }
  ++state.step;
  for (const auto& [name, g] : grads) {
    detail::adam_update(params.at(name), g, state.moments[name], state.hyper, state.step);
  }
}

}  // namespace nnc
