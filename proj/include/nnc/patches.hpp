#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "nnc/rng.hpp"
#include "nnc/scene.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

struct Pixel {
  std::size_t row = 0, col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct Offset {
  int dy = 0, dx = 0;
  friend bool operator==(const Offset&, const Offset&) = default;
  friend auto operator<=>(const Offset&, const Offset&) = default;
};

/// One co-registered sample: hsi is (bands, P, P), lidar is (1, P, P).
struct PatchPair {
  Pixel center;
  Tensor<float> hsi;
  Tensor<float> lidar;
};

inline std::size_t chebyshev(const Pixel& a, const Pixel& b) {
  const auto d = [](std::size_t x, std::size_t y) { return x > y ? x - y : y - x; };
  return std::max(d(a.row, b.row), d(a.col, b.col));
}

/// Mirror index into [0, n) without repeating the edge sample (-1 -> 1).
inline std::size_t reflect_index(long i, std::size_t n) {
  const long m = static_cast<long>(n);
  if (m == 1) return 0;
  const long period = 2 * (m - 1);
  long k = i % period;
  if (k < 0) k += period;
  return static_cast<std::size_t>(k < m ? k : period - k);
}

/// Window of `patch` x `patch` pixels centered on `center`, reflect-padded at
/// the scene border so every pixel is a valid center.
inline PatchPair extract_patch(const SceneCube& cube, const ElevationMap& elevation, Pixel center,
                               std::size_t patch = 11) {
  if (patch % 2 == 0) throw std::invalid_argument("extract_patch: patch size must be odd");
  if (elevation.height != cube.height || elevation.width != cube.width) {
    throw SceneError("extract_patch: hsi and elevation are not co-registered");
  }
  if (center.row >= cube.height || center.col >= cube.width) {
    throw std::out_of_range("extract_patch: center (" + std::to_string(center.row) + ", " + std::to_string(center.col) +
                            ") outside " + std::to_string(cube.height) + "x" + std::to_string(cube.width) + " scene");
  }
  const long half = static_cast<long>(patch / 2);
  if (cube.height <= static_cast<std::size_t>(half) || cube.width <= static_cast<std::size_t>(half)) {
    throw SceneError("extract_patch: scene smaller than the reflect padding");
  }
  PatchPair p;
  p.center = center;
  p.hsi = Tensor<float>({cube.bands, patch, patch});
  p.lidar = Tensor<float>({1, patch, patch});
  for (std::size_t y = 0; y < patch; ++y) {
    const std::size_t r = reflect_index(static_cast<long>(center.row) + static_cast<long>(y) - half, cube.height);
    for (std::size_t x = 0; x < patch; ++x) {
      const std::size_t c = reflect_index(static_cast<long>(center.col) + static_cast<long>(x) - half, cube.width);
      for (std::size_t b = 0; b < cube.bands; ++b) p.hsi[(b * patch + y) * patch + x] = cube.at(b, r, c);
      p.lidar[y * patch + x] = elevation.values[r * cube.width + c];
    }
  }
  return p;
}

/// Every non-zero shift whose window overlap exceeds `min_overlap` of the
/// patch area.
inline std::vector<Offset> neighbor_offsets(std::size_t patch = 11, double min_overlap = 0.8) {
  std::vector<Offset> out;
  const int p = static_cast<int>(patch);
  for (int dy = -(p - 1); dy <= p - 1; ++dy)
    for (int dx = -(p - 1); dx <= p - 1; ++dx) {
      if (dy == 0 && dx == 0) continue;
      const double overlap = static_cast<double>((p - std::abs(dy)) * (p - std::abs(dx))) / static_cast<double>(p * p);
      if (overlap > min_overlap) out.push_back({dy, dx});
    }
  return out;
}

struct PretrainSample {
  Pixel anchor;
  Pixel neighbor;
};

struct PretrainSampling {
  std::size_t batch = 64;
  std::size_t min_distance = 12;  // Chebyshev, between anchors of one batch
  std::size_t patch = 11;
  double min_overlap = 0.8;
  std::size_t retry_budget = 200000;
};

/// Anchors drawn uniformly with rejection so all pairs are at least
/// `min_distance` apart; each gets one neighbor drawn uniformly from the
/// overlap offsets that stay inside the scene.
inline std::vector<PretrainSample> sample_pretrain_batch(std::size_t height, std::size_t width,
                                                         const PretrainSampling& cfg, Rng& rng) {
  const auto offsets = neighbor_offsets(cfg.patch, cfg.min_overlap);
  if (offsets.empty()) throw std::invalid_argument("sample_pretrain_batch: no neighbor offsets for this overlap");
  std::vector<PretrainSample> out;
  out.reserve(cfg.batch);
  std::size_t attempts = 0;
  while (out.size() < cfg.batch) {
    if (++attempts > cfg.retry_budget) {
      throw std::runtime_error("sample_pretrain_batch: could not place " + std::to_string(cfg.batch) +
                               " centers at Chebyshev distance >= " + std::to_string(cfg.min_distance) + " in a " +
                               std::to_string(height) + "x" + std::to_string(width) +
                               " scene; use a smaller batch or distance");
    }
    Pixel c{uniform_index(rng, height), uniform_index(rng, width)};
    const bool ok = std::all_of(out.begin(), out.end(),
                                [&](const PretrainSample& s) { return chebyshev(s.anchor, c) >= cfg.min_distance; });
    if (!ok) continue;
    std::vector<Pixel> valid;
    for (const Offset& o : offsets) {
      const long r = static_cast<long>(c.row) + o.dy, col = static_cast<long>(c.col) + o.dx;
      if (r >= 0 && col >= 0 && r < static_cast<long>(height) && col < static_cast<long>(width)) {
        valid.push_back({static_cast<std::size_t>(r), static_cast<std::size_t>(col)});
      }
    }
    out.push_back({c, valid[uniform_index(rng, valid.size())]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool crop = true;
  bool hflip = true;
  bool vflip = true;
  bool noise = true;
  double scale_min = 0.7;
  double scale_max = 1.0;
  double noise_sigma = 0.01;
};

/// The geometric part of one augmentation, shared by both modalities.
struct AugmentDraw {
  double area_scale = 1.0;
  double top = 0.0, left = 0.0;  // crop origin in pixels
  bool hflip = false, vflip = false;
};

inline AugmentDraw draw_augment(Rng& rng, const AugmentConfig& cfg, std::size_t patch) {
  AugmentDraw d;
  if (cfg.crop) {
    d.area_scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    const double side = static_cast<double>(patch) * std::sqrt(d.area_scale);
    const double slack = std::max(0.0, static_cast<double>(patch) - side);
    d.top = uniform01(rng) * slack;
    d.left = uniform01(rng) * slack;
  }
  if (cfg.hflip) d.hflip = uniform01(rng) < 0.5;
  if (cfg.vflip) d.vflip = uniform01(rng) < 0.5;
  return d;
}

namespace detail {

/// Resized crop + flips of every (P, P) plane in a (C, P, P) tensor.
inline Tensor<float> warp_planes(const Tensor<float>& src, const AugmentDraw& d, bool crop) {
  const std::size_t ch = src.dim(0), p = src.dim(1);
  Tensor<float> out(src.shape());
  const double side = static_cast<double>(p) * std::sqrt(d.area_scale);
  const double step = side / static_cast<double>(p);
  const double maxc = static_cast<double>(p - 1);
  for (std::size_t y = 0; y < p; ++y)
    for (std::size_t x = 0; x < p; ++x) {
      const std::size_t ty = d.vflip ? p - 1 - y : y;
      const std::size_t tx = d.hflip ? p - 1 - x : x;
      if (!crop) {
        for (std::size_t c = 0; c < ch; ++c) out[(c * p + ty) * p + tx] = src[(c * p + y) * p + x];
        continue;
      }
      // Half-pixel-centered sampling; the full window maps onto itself.
      const double sy = std::clamp(d.top + (static_cast<double>(y) + 0.5) * step - 0.5, 0.0, maxc);
      const double sx = std::clamp(d.left + (static_cast<double>(x) + 0.5) * step - 0.5, 0.0, maxc);
      const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, p - 1), x1 = std::min(x0 + 1, p - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < ch; ++c) {
        const float* s = src.ptr() + c * p * p;
        const double v = (1 - fy) * ((1 - fx) * s[y0 * p + x0] + fx * s[y0 * p + x1]) +
                         fy * ((1 - fx) * s[y1 * p + x0] + fx * s[y1 * p + x1]);
        out[(c * p + ty) * p + tx] = static_cast<float>(v);
      }
    }
  return out;
}

}  // namespace detail

/// Applies a drawn geometric transform to both modalities, then (if enabled)
/// independent Gaussian noise per modality from `noise_rng`.
inline PatchPair apply_augment(const PatchPair& in, const AugmentDraw& d, const AugmentConfig& cfg, Rng& noise_rng) {
  PatchPair out;
  out.center = in.center;
  out.hsi = detail::warp_planes(in.hsi, d, cfg.crop);
  out.lidar = detail::warp_planes(in.lidar, d, cfg.crop);
  if (cfg.noise) {
    const double s = cfg.noise_sigma;
    for (std::size_t i = 0; i < out.hsi.size(); ++i) out.hsi[i] += static_cast<float>(s * normal01(noise_rng));
    for (std::size_t i = 0; i < out.lidar.size(); ++i) out.lidar[i] += static_cast<float>(s * normal01(noise_rng));
  }
  return out;
}

inline PatchPair augment(const PatchPair& in, Rng& rng, const AugmentConfig& cfg) {
  const AugmentDraw d = draw_augment(rng, cfg, in.hsi.dim(1));
  return apply_augment(in, d, cfg, rng);
}

/// Replaces exactly floor(N/2) uniformly chosen key views by their neighbor
/// views. Returns the substitution mask.
inline std::vector<bool> substitute_half_keys(std::vector<PatchPair>& keys, const std::vector<PatchPair>& neighbors,
                                              Rng& rng) {
  if (keys.size() != neighbors.size()) {
    throw std::invalid_argument("substitute_half_keys: " + std::to_string(keys.size()) + " keys but " +
                                std::to_string(neighbors.size()) + " neighbors");
  }
  const std::size_t n = keys.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Partial Fisher-Yates: the first n/2 slots are a uniform subset.
  for (std::size_t i = 0; i < n / 2; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < n / 2; ++i) {
    mask[idx[i]] = true;
    keys[idx[i]] = neighbors[idx[i]];
  }
  return mask;
}

}  // namespace nnc
