#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnc/npy.hpp"
#include "nnc/rng.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hyperspectral cube stored band-major: values is (bands, height, width).
struct SceneCube {
  std::size_t height = 0, width = 0, bands = 0;
  Tensor<float> values;
  std::vector<double> band_mean;
  std::vector<double> band_std;

  float at(std::size_t band, std::size_t row, std::size_t col) const {
    return values[(band * height + row) * width + col];
  }
};

struct ElevationMap {
  std::size_t height = 0, width = 0;
  Tensor<float> values;  // (height, width)
  double mean = 0.0, std = 1.0;
};

/// 0 = unlabeled, 1..num_classes = classes.
struct LabelMap {
  std::size_t height = 0, width = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint16_t> labels;

  std::uint16_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }

  /// Index 0 counts unlabeled pixels.
  std::vector<std::size_t> frequencies() const {
    std::vector<std::size_t> f(num_classes + 1, 0);
    for (auto l : labels) {
      if (l <= num_classes) ++f[l];
    }
    return f;
  }
};

struct Manifest {
  std::string hsi, lidar, labels;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::optional<std::string> train_mask, test_mask;

  nlohmann::json to_json() const {
    nlohmann::json j{{"hsi", hsi}, {"lidar", lidar}, {"labels", labels}, {"num_classes", num_classes},
                     {"class_names", class_names}};
    if (train_mask) j["train_mask"] = *train_mask;
    if (test_mask) j["test_mask"] = *test_mask;
    return j;
  }

  static Manifest from_json(const nlohmann::json& j) {
    Manifest m;
    for (const char* key : {"hsi", "lidar", "labels", "num_classes", "class_names"}) {
      if (!j.contains(key)) throw SceneError(std::string("manifest: missing key '") + key + "'");
    }
    m.hsi = j.at("hsi").get<std::string>();
    m.lidar = j.at("lidar").get<std::string>();
    m.labels = j.at("labels").get<std::string>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("train_mask")) m.train_mask = j.at("train_mask").get<std::string>();
    if (j.contains("test_mask")) m.test_mask = j.at("test_mask").get<std::string>();
    if (m.class_names.size() != m.num_classes) {
      throw SceneError("manifest: class_names has " + std::to_string(m.class_names.size()) + " entries but num_classes is " +
                       std::to_string(m.num_classes));
    }
    return m;
  }
};

struct Scene {
  SceneCube hsi;
  ElevationMap lidar;
  LabelMap labels;
  Manifest manifest;
  std::vector<std::uint8_t> train_mask, test_mask;  // empty when the manifest names none
  std::vector<std::string> warnings;
};

/// Per-band standardization with scene statistics (64-bit accumulation).
/// A constant band becomes all zeros and produces a warning.
inline void standardize(SceneCube& cube, std::vector<std::string>* warnings = nullptr) {
  const std::size_t px = cube.height * cube.width;
  cube.band_mean.assign(cube.bands, 0.0);
  cube.band_std.assign(cube.bands, 0.0);
  for (std::size_t b = 0; b < cube.bands; ++b) {
    float* v = cube.values.ptr() + b * px;
    double s = 0.0;
    for (std::size_t i = 0; i < px; ++i) s += v[i];
    const double mu = s / static_cast<double>(px);
    double sq = 0.0;
    for (std::size_t i = 0; i < px; ++i) sq += (v[i] - mu) * (v[i] - mu);
    const double sd = std::sqrt(sq / static_cast<double>(px));
    cube.band_mean[b] = mu;
    cube.band_std[b] = sd;
    if (sd == 0.0) {
      for (std::size_t i = 0; i < px; ++i) v[i] = 0.0f;
      if (warnings) warnings->push_back("band " + std::to_string(b) + " is constant; standardized to zeros");
      continue;
    }
    for (std::size_t i = 0; i < px; ++i) v[i] = static_cast<float>((v[i] - mu) / sd);
  }
}

inline void standardize(ElevationMap& map, std::vector<std::string>* warnings = nullptr) {
  const std::size_t px = map.height * map.width;
  double s = 0.0;
  for (std::size_t i = 0; i < px; ++i) s += map.values[i];
  const double mu = s / static_cast<double>(px);
  double sq = 0.0;
  for (std::size_t i = 0; i < px; ++i) sq += (map.values[i] - mu) * (map.values[i] - mu);
  const double sd = std::sqrt(sq / static_cast<double>(px));
  map.mean = mu;
  map.std = sd;
  if (sd == 0.0) {
    map.values.fill(0.0f);
    if (warnings) warnings->push_back("elevation map is constant; standardized to zeros");
    return;
  }
  for (std::size_t i = 0; i < px; ++i) map.values[i] = static_cast<float>((map.values[i] - mu) / sd);
}

/// Builds a cube from an (H, W, B) pixel-interleaved array.
inline SceneCube cube_from_hwb(const Shape& shape, const std::vector<float>& hwb) {
  if (shape.size() != 3) throw SceneError("hsi array must be H x W x B, got " + to_string(shape));
  SceneCube c;
  c.height = shape[0];
  c.width = shape[1];
  c.bands = shape[2];
  c.values = Tensor<float>({c.bands, c.height, c.width});
  for (std::size_t r = 0; r < c.height; ++r)
    for (std::size_t col = 0; col < c.width; ++col)
      for (std::size_t b = 0; b < c.bands; ++b)
        c.values[(b * c.height + r) * c.width + col] = hwb[(r * c.width + col) * c.bands + b];
  return c;
}

inline std::vector<float> cube_to_hwb(const SceneCube& c) {
  std::vector<float> out(c.height * c.width * c.bands);
  for (std::size_t r = 0; r < c.height; ++r)
    for (std::size_t col = 0; col < c.width; ++col)
      for (std::size_t b = 0; b < c.bands; ++b) out[(r * c.width + col) * c.bands + b] = c.at(b, r, col);
  return out;
}

namespace detail {

template <typename V>
void require_finite(const V& values, const std::string& what) {
  for (auto v : values) {
    if (!std::isfinite(static_cast<double>(v))) throw SceneError(what + " contains non-finite values");
  }
}

inline std::vector<std::uint8_t> load_mask(const std::filesystem::path& p, std::size_t h, std::size_t w) {
  NpyArray a = read_npy(p);
  if (a.shape != Shape{h, w}) throw SceneError("mask " + p.string() + " has shape " + to_string(a.shape));
  return a.as<std::uint8_t>();
}

}  // namespace detail

/// Loads the arrays named by a dataset.json manifest and standardizes them.
/// Relative paths resolve against the manifest's directory.
inline Scene load_scene(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw SceneError("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SceneError("manifest " + manifest_path.string() + ": " + e.what());
  }
  Scene s;
  s.manifest = Manifest::from_json(j);
  const auto dir = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : dir / p; };

  NpyArray hsi = read_npy(resolve(s.manifest.hsi));
  std::vector<float> hwb = hsi.as<float>();
  detail::require_finite(hwb, "hsi cube");
  s.hsi = cube_from_hwb(hsi.shape, hwb);

  NpyArray lidar = read_npy(resolve(s.manifest.lidar));
  if (lidar.shape.size() == 3 && lidar.shape[2] == 1) lidar.shape.pop_back();
  if (lidar.shape != Shape{s.hsi.height, s.hsi.width}) {
    throw SceneError("co-registration: lidar is " + to_string(lidar.shape) + " but hsi is " +
                     to_string(Shape{s.hsi.height, s.hsi.width}));
  }
  s.lidar.height = s.hsi.height;
  s.lidar.width = s.hsi.width;
  s.lidar.values = Tensor<float>(lidar.shape, lidar.as<float>());
  detail::require_finite(s.lidar.values.vec(), "lidar map");

  NpyArray labels = read_npy(resolve(s.manifest.labels));
  if (labels.shape != Shape{s.hsi.height, s.hsi.width}) {
    throw SceneError("co-registration: labels are " + to_string(labels.shape) + " but hsi is " +
                     to_string(Shape{s.hsi.height, s.hsi.width}));
  }
  s.labels.height = s.hsi.height;
  s.labels.width = s.hsi.width;
  s.labels.num_classes = s.manifest.num_classes;
  s.labels.labels = labels.as<std::uint16_t>();
  for (auto l : s.labels.labels) {
    if (l > s.labels.num_classes) throw SceneError("label " + std::to_string(l) + " exceeds num_classes");
  }
  if (s.manifest.train_mask) s.train_mask = detail::load_mask(resolve(*s.manifest.train_mask), s.hsi.height, s.hsi.width);
  if (s.manifest.test_mask) s.test_mask = detail::load_mask(resolve(*s.manifest.test_mask), s.hsi.height, s.hsi.width);

  standardize(s.hsi, &s.warnings);
  standardize(s.lidar, &s.warnings);
  return s;
}

struct Split {
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> test;
};

/// Draws `per_class` training pixels per class uniformly; every other
/// labeled pixel goes to the test mask.
inline Split make_split(const LabelMap& labels, std::size_t per_class, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(labels.num_classes + 1);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) by_class[labels.labels[i]].push_back(i);
  Split s{std::vector<std::uint8_t>(labels.labels.size(), 0), std::vector<std::uint8_t>(labels.labels.size(), 0)};
  for (std::size_t c = 1; c <= labels.num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < per_class) {
      throw SceneError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " pixels, fewer than " +
                       std::to_string(per_class) + " requested");
    }
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) (k < per_class ? s.train : s.test)[idx[k]] = 1;
  }
  return s;
}

}  // namespace nnc
