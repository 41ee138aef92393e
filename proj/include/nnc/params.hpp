#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nnc/rng.hpp"
#include "nnc/tape.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename T>
using VarMap = std::map<std::string, Var<T>>;

/// Ordered list of (name, shape); the order fixes initialization draws.
using ParamShapes = std::vector<std::pair<std::string, Shape>>;

enum class InitKind { KaimingUniform, Zeros, Ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::KaimingUniform;
  std::size_t fan_in = 1;
};

inline std::size_t count_params(const std::vector<ParamSpec>& specs) {
  std::size_t n = 0;
  for (const auto& s : specs) n += numel(s.shape);
  return n;
}

/// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) for weights; zeros/ones otherwise.
template <typename T>
ParamMap<T> init_params(const std::vector<ParamSpec>& specs, Rng& rng) {
  ParamMap<T> out;
  for (const auto& s : specs) {
    Tensor<T> t(s.shape);
    switch (s.init) {
      case InitKind::Zeros:
        break;
      case InitKind::Ones:
        t.fill(T{1});
        break;
      case InitKind::KaimingUniform: {
        const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(rng, -bound, bound));
        break;
      }
    }
    if (!out.emplace(s.name, std::move(t)).second) throw std::logic_error("duplicate parameter " + s.name);
  }
  return out;
}

/// Puts every parameter on the tape. With `trainable` given, only names in
/// that set require gradients.
template <typename T>
VarMap<T> bind_params(Tape<T>& tape, const ParamMap<T>& params, bool requires_grad,
               const std::set<std::string>* trainable = nullptr) {
  VarMap<T> out;
  for (const auto& [name, value] : params) {
    const bool g = requires_grad && (trainable == nullptr || trainable->count(name) > 0);
    out.emplace(name, tape.leaf(value, g));
  }
  return out;
}

template <typename T>
Var<T> param(const VarMap<T>& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

template <typename T>
ParamMap<T> grads_of(const Tape<T>& tape, const VarMap<T>& vars) {
  ParamMap<T> out;
  for (const auto& [name, v] : vars) {
    if (v.requires_grad()) out.emplace(name, tape.grad(v));
  }
  return out;
}

template <typename U, typename T>
ParamMap<U> cast_params(const ParamMap<T>& p) {
  ParamMap<U> out;
  for (const auto& [name, t] : p) out.emplace(name, t.template cast<U>());
  return out;
}

}  // namespace nnc
