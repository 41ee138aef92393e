#pragma once

#include <cstddef>
#include <vector>

#include "nnc/patches.hpp"
#include "nnc/pca.hpp"
#include "nnc/scene.hpp"

namespace nnc {

/// Network-ready scene: PCA-reduced, standardized cube plus elevation.
struct ModelInputs {
  SceneCube hsi;
  ElevationMap lidar;

  std::size_t height() const { return hsi.height; }
  std::size_t width() const { return hsi.width; }
};

inline ModelInputs prepare_inputs(const Scene& scene, std::size_t bands) {
  return ModelInputs{pca_reduce(scene.hsi, bands).cube, scene.lidar};
}

/// Stacks patches into (N, B, p, p) and (N, 1, p, p).
struct PatchBatch {
  Tensor<float> hsi;
  Tensor<float> lidar;
};

inline PatchBatch stack_patches(const std::vector<PatchPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("stack_patches: empty batch");
  const Shape sh = pairs[0].hsi.shape(), sl = pairs[0].lidar.shape();
  PatchBatch b{Tensor<float>({pairs.size(), sh[0], sh[1], sh[2]}), Tensor<float>({pairs.size(), sl[0], sl[1], sl[2]})};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].hsi.shape() != sh || pairs[i].lidar.shape() != sl) shape_fail("stack_patches", "ragged batch");
    std::copy_n(pairs[i].hsi.ptr(), pairs[i].hsi.size(), b.hsi.ptr() + i * pairs[i].hsi.size());
    std::copy_n(pairs[i].lidar.ptr(), pairs[i].lidar.size(), b.lidar.ptr() + i * pairs[i].lidar.size());
  }
  return b;
}

inline PatchBatch patches_at(const ModelInputs& in, const std::vector<Pixel>& centers, std::size_t patch) {
  std::vector<PatchPair> pairs;
  pairs.reserve(centers.size());
  for (const Pixel& c : centers) pairs.push_back(extract_patch(in.hsi, in.lidar, c, patch));
  return stack_patches(pairs);
}

}  // namespace nnc
