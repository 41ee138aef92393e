#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "nnc/gradcheck.hpp"
#include "nnc/model.hpp"

namespace nnc {

/// Scalar built from a bound model and input batch on a double tape.
using ModelScalarFn =
    std::function<Var<double>(Tape<double>&, const VarMap<double>&, Var<double> hsi, Var<double> lidar)>;

/// Random tensor in [lo, hi) from a named stream.
inline Tensor<double> random_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(rng, lo, hi);
  return t;
}

/// sum(y * R) for a fixed random R drawn from `seed`.
inline Var<double> weighted_sum(Var<double> y, std::uint64_t seed) {
  Rng rng(seed);
  Var<double> r = y.tape->constant(random_uniform(y.shape(), rng));
  return sum(mul(y, r));
}

struct ModelCheckOptions {
  std::size_t batch = 4;
  std::uint64_t seed = 1;
  std::size_t max_coords_per_input = 12;
  bool include_inputs = false;
  double eps = 1e-4;
};

/// Conv biases that feed batch norm directly. Train-mode BN subtracts the
/// batch mean, so their gradient is identically zero and a relative
/// finite-difference comparison would only measure roundoff.
inline std::set<std::string> bn_shadowed_biases(const ModelConfig& cfg) {
  std::set<std::string> out;
  for (const auto& [layer, c] : bn_layers(cfg)) out.insert(layer + ".bias");
  return out;
}

/// Gradient check of `f` w.r.t. every parameter whose name starts with one of
/// `prefixes`; other parameters enter as constants. Non-trivial values are
/// drawn for biases and batch-norm affine terms so no path is degenerate.
inline GradCheckResult model_grad_check(const ModelConfig& cfg, const std::vector<std::string>& prefixes,
                                        const ModelScalarFn& f, const ModelCheckOptions& opt = {}) {
  Rng rng = make_stream(opt.seed, "init");
  ParamMap<double> params = init_params<double>(model_param_specs(cfg), rng);
  for (auto& [name, t] : params) {
    const bool affine = name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".gamma");
    if (!affine) continue;
    const double base = name.ends_with(".gamma") ? 1.0 : 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = base + uniform(rng, -0.3, 0.3);
  }
  Rng data = make_stream(opt.seed, "data");
  Tensor<double> hsi = random_uniform({opt.batch, cfg.bands, cfg.patch, cfg.patch}, data);
  Tensor<double> lidar = random_uniform({opt.batch, 1, cfg.patch, cfg.patch}, data);

  const auto shadowed = bn_shadowed_biases(cfg);
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs;
  for (const auto& [name, t] : params) {
    if (shadowed.count(name)) continue;
    for (const auto& p : prefixes) {
      if (name.starts_with(p)) {
        names.push_back(name);
        inputs.push_back(t);
        break;
      }
    }
  }
  if (names.empty() && !opt.include_inputs) throw std::invalid_argument("model_grad_check: no parameter matches");
  const std::size_t n_params = names.size();
  if (opt.include_inputs) {
    inputs.push_back(hsi);
    inputs.push_back(lidar);
  }
  ScalarFn fn = [&](Tape<double>& tape, std::span<const Var<double>> leaves) {
    VarMap<double> vars;
    for (const auto& [name, t] : params) vars.emplace(name, tape.constant(t));
    for (std::size_t i = 0; i < n_params; ++i) vars.insert_or_assign(names[i], leaves[i]);
    Var<double> h = opt.include_inputs ? leaves[n_params] : tape.constant(hsi);
    Var<double> l = opt.include_inputs ? leaves[n_params + 1] : tape.constant(lidar);
    return f(tape, vars, h, l);
  };
  GradCheckOptions go;
  go.max_coords_per_input = opt.max_coords_per_input;
  go.seed = opt.seed;
  go.eps = opt.eps;
  return grad_check(fn, std::move(inputs), go);
}

}  // namespace nnc
