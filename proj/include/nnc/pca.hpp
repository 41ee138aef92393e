#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "nnc/scene.hpp"

namespace nnc {

struct PcaResult {
  SceneCube cube;                      // bands == n_components
  std::vector<std::vector<double>> components;  // n x B, orthonormal rows
  std::vector<double> eigenvalues;     // descending
  std::vector<double> explained_ratio;
};

/// Projects every pixel onto the leading eigenvectors of the band covariance.
/// Each component's largest-magnitude entry is made positive.
inline PcaResult pca_reduce(const SceneCube& cube, std::size_t n_components = 30) {
  const std::size_t nb = cube.bands;
  if (n_components == 0 || n_components > nb) {
    throw std::invalid_argument("pca_reduce: cannot keep " + std::to_string(n_components) + " components of " +
                                std::to_string(nb) + " bands");
  }
  const std::size_t px = cube.height * cube.width;
  std::vector<double> mean(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b) {
    const float* v = cube.values.ptr() + b * px;
    double s = 0.0;
    for (std::size_t i = 0; i < px; ++i) s += v[i];
    mean[b] = s / static_cast<double>(px);
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(nb));
  std::vector<double> centered(nb);
  for (std::size_t i = 0; i < px; ++i) {
    for (std::size_t b = 0; b < nb; ++b) centered[b] = cube.values[b * px + i] - mean[b];
    for (std::size_t a = 0; a < nb; ++a)
      for (std::size_t b = a; b < nb; ++b) cov(a, b) += centered[a] * centered[b];
  }
  for (std::size_t a = 0; a < nb; ++a)
    for (std::size_t b = a; b < nb; ++b) {
      cov(a, b) /= static_cast<double>(px);
      cov(b, a) = cov(a, b);
    }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("pca_reduce: eigendecomposition failed");
  const Eigen::VectorXd& evals = es.eigenvalues();  // ascending
  const Eigen::MatrixXd& evecs = es.eigenvectors();
  double total = 0.0;
  for (Eigen::Index i = 0; i < evals.size(); ++i) total += std::max(evals(i), 0.0);

  PcaResult r;
  for (std::size_t k = 0; k < n_components; ++k) {
    const Eigen::Index col = static_cast<Eigen::Index>(nb - 1 - k);
    std::vector<double> comp(nb);
    std::size_t arg = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      comp[b] = evecs(static_cast<Eigen::Index>(b), col);
      if (std::abs(comp[b]) > std::abs(comp[arg])) arg = b;
    }
    if (comp[arg] < 0) {
      for (double& c : comp) c = -c;
    }
    const double ev = std::max(evals(col), 0.0);
    r.components.push_back(std::move(comp));
    r.eigenvalues.push_back(ev);
    r.explained_ratio.push_back(total > 0 ? ev / total : 0.0);
  }

  SceneCube& out = r.cube;
  out.height = cube.height;
  out.width = cube.width;
  out.bands = n_components;
  out.values = Tensor<float>({n_components, cube.height, cube.width});
  for (std::size_t i = 0; i < px; ++i) {
    for (std::size_t b = 0; b < nb; ++b) centered[b] = cube.values[b * px + i] - mean[b];
    for (std::size_t k = 0; k < n_components; ++k) {
      double acc = 0.0;
      for (std::size_t b = 0; b < nb; ++b) acc += r.components[k][b] * centered[b];
      out.values[k * px + i] = static_cast<float>(acc);
    }
  }
  out.band_mean.assign(n_components, 0.0);
  out.band_std.resize(n_components);
  for (std::size_t k = 0; k < n_components; ++k) out.band_std[k] = std::sqrt(r.eigenvalues[k]);
  return r;
}

}  // namespace nnc
