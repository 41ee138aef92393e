#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnc/npy.hpp"
#include "nnc/patches.hpp"
#include "nnc/rng.hpp"
#include "nnc/scene.hpp"

namespace nnc {

struct SynthSpec {
  std::size_t height = 64, width = 64, bands = 12, classes = 4;
  std::uint64_t seed = 7;
  std::size_t labels_per_class = 10;
  double blob_sigma = 10.0;        // smoothing radius of the class fields, pixels
  double signature_amplitude = 1.0;
  double noise_sigma = 0.25;       // per-band spectral noise
  double elevation_step = 1.0;     // spacing of class elevation offsets
  double elevation_noise = 0.1;
  double terrain_amplitude = 1.0;  // std of the smooth background relief
  double min_margin_sigmas = 2.0;

  void validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("synth spec: " + m); };
    if (height < 8 || width < 8) bad("scene must be at least 8x8");
    if (bands == 0) bad("bands must be positive");
    if (classes < 2 || classes > 255) bad("classes must lie in 2..255");
    if (!(blob_sigma > 0) || !(noise_sigma > 0)) bad("blob_sigma and noise_sigma must be positive");
  }

  nlohmann::json to_json() const {
    return {{"height", height},
            {"width", width},
            {"bands", bands},
            {"classes", classes},
            {"seed", seed},
            {"labels_per_class", labels_per_class},
            {"blob_sigma", blob_sigma},
            {"signature_amplitude", signature_amplitude},
            {"noise_sigma", noise_sigma},
            {"elevation_step", elevation_step},
            {"elevation_noise", elevation_noise},
            {"terrain_amplitude", terrain_amplitude},
            {"min_margin_sigmas", min_margin_sigmas}};
  }
};

struct SynthScene {
  std::vector<float> hsi;  // (H, W, B)
  std::vector<float> lidar;  // (H, W)
  std::vector<std::uint16_t> labels;  // (H, W), 1..C
  std::vector<std::vector<double>> signatures;  // C x B
  std::vector<double> elevation_offsets;
  Split split;
  double worst_margin_sigmas = 0;  // smallest pairwise margin found by the self-check
};

namespace detail {

/// Separable Gaussian blur of an (h, w) field with reflect borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& f, std::size_t h, std::size_t w, double sigma) {
  const long r = static_cast<long>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (long i = -r; i <= r; ++i) s += k[std::size_t(i + r)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (auto& v : k) v /= s;
  std::vector<double> tmp(f.size()), out(f.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[std::size_t(i + r)] * f[y * w + reflect_index(long(x) + i, w)];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[std::size_t(i + r)] * tmp[reflect_index(long(y) + i, h) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Smallest separation margin, in noise standard deviations, over all class
/// pairs: for classes a and b, the pixel spectra are projected onto the line
/// joining their empirical means, and the half-distance between the means is
/// divided by the larger projected standard deviation.
inline double separation_margin(const std::vector<float>& hwb, const std::vector<std::uint16_t>& labels,
                                std::size_t bands, std::size_t classes) {
  const std::size_t px = labels.size();
  std::vector<std::vector<double>> mean(classes, std::vector<double>(bands, 0.0));
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t i = 0; i < px; ++i) {
    const std::size_t c = labels[i] - 1u;
    ++count[c];
    for (std::size_t b = 0; b < bands; ++b) mean[c][b] += hwb[i * bands + b];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (auto& v : mean[c]) v /= double(count[c]);
  double worst = INFINITY;
  for (std::size_t a = 0; a < classes; ++a)
    for (std::size_t b = a + 1; b < classes; ++b) {
      std::vector<double> dir(bands);
      double dist = 0;
      for (std::size_t k = 0; k < bands; ++k) {
        dir[k] = mean[a][k] - mean[b][k];
        dist += dir[k] * dir[k];
      }
      dist = std::sqrt(dist);
      for (auto& v : dir) v /= dist;
      double sd[2] = {0, 0};
      const std::size_t cls[2] = {a, b};
      for (int j = 0; j < 2; ++j) {
        double mu = 0, sq = 0;
        for (std::size_t k = 0; k < bands; ++k) mu += dir[k] * mean[cls[j]][k];
        for (std::size_t i = 0; i < px; ++i) {
          if (labels[i] - 1u != cls[j]) continue;
          double p = 0;
          for (std::size_t k = 0; k < bands; ++k) p += dir[k] * hwb[i * bands + k];
          sq += (p - mu) * (p - mu);
        }
        sd[j] = std::sqrt(sq / double(count[cls[j]]));
      }
      worst = std::min(worst, 0.5 * dist / std::max(sd[0], sd[1]));
    }
  return worst;
}

inline SynthScene synthesize(const SynthSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, px = h * w, nb = spec.bands, nc = spec.classes;
  Rng rng = make_stream(spec.seed, "data");
  SynthScene s;

  // Class regions: argmax over standardized smoothed white-noise fields, one
  // per class. A class left below half its fair share gets its field raised
  // until it reaches it, so no seed yields an empty or sliver class.
  std::vector<std::vector<double>> fields;
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> f(px);
    for (auto& v : f) v = normal01(rng);
    f = detail::gaussian_blur(f, h, w, spec.blob_sigma);
    double m = 0, var = 0;
    for (double v : f) m += v;
    m /= double(px);
    for (double v : f) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / double(px));
    for (auto& v : f) v = (v - m) / sd;
    fields.push_back(std::move(f));
  }
  s.labels.resize(px);
  std::vector<std::size_t> count(nc, 0);
  std::vector<double> lift(nc, 0.0);
  for (int round = 0; round < 400; ++round) {
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < px; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < nc; ++c)
        if (fields[c][i] + lift[c] > fields[best][i] + lift[best]) best = c;
      s.labels[i] = static_cast<std::uint16_t>(best + 1);
      ++count[best];
    }
    const auto small = std::min_element(count.begin(), count.end());
    if (*small * 2 * nc >= px) break;
    lift[std::size_t(small - count.begin())] += 0.05;
  }
  for (std::size_t c = 0; c < nc; ++c) {
    if (count[c] <= spec.labels_per_class) {
      throw SceneError("synth: class " + std::to_string(c + 1) + " covers only " + std::to_string(count[c]) +
                       " pixels; use a larger scene, fewer classes, or a smaller blob_sigma");
    }
  }

  // Smooth spectral signatures: random walk in band, rescaled to the amplitude.
  s.signatures.assign(nc, std::vector<double>(nb));
  for (auto& sig : s.signatures) {
    double v = uniform(rng, -1, 1);
    for (std::size_t b = 0; b < nb; ++b) {
      v += 0.5 * normal01(rng);
      sig[b] = spec.signature_amplitude * v;
    }
  }
  // Elevation offsets: a shuffled ladder so neighbouring classes differ.
  s.elevation_offsets.resize(nc);
  for (std::size_t c = 0; c < nc; ++c) s.elevation_offsets[c] = spec.elevation_step * double(c);
  shuffle(s.elevation_offsets.begin(), s.elevation_offsets.end(), rng);

  std::vector<double> terrain(px);
  for (auto& v : terrain) v = normal01(rng);
  terrain = detail::gaussian_blur(terrain, h, w, 2.0 * spec.blob_sigma);
  double tm = 0, tv = 0;
  for (double v : terrain) tm += v;
  tm /= double(px);
  for (double v : terrain) tv += (v - tm) * (v - tm);
  const double tscale = spec.terrain_amplitude / std::sqrt(tv / double(px));
  for (auto& v : terrain) v = (v - tm) * tscale;

  s.hsi.resize(px * nb);
  s.lidar.resize(px);
  for (std::size_t i = 0; i < px; ++i) {
    const std::size_t c = s.labels[i] - 1u;
    for (std::size_t b = 0; b < nb; ++b) {
      s.hsi[i * nb + b] = static_cast<float>(s.signatures[c][b] + spec.noise_sigma * normal01(rng));
    }
    s.lidar[i] = static_cast<float>(s.elevation_offsets[c] + terrain[i] + spec.elevation_noise * normal01(rng));
  }

  s.worst_margin_sigmas = separation_margin(s.hsi, s.labels, nb, nc);
  if (!(s.worst_margin_sigmas >= spec.min_margin_sigmas)) {
    throw SceneError("synth: classes separate by only " + std::to_string(s.worst_margin_sigmas) +
                     " sigma in band space, below the required " + std::to_string(spec.min_margin_sigmas) +
                     "; raise signature_amplitude or lower noise_sigma");
  }

  LabelMap lm;
  lm.height = h;
  lm.width = w;
  lm.num_classes = nc;
  lm.labels = s.labels;
  s.split = make_split(lm, spec.labels_per_class, rng);
  return s;
}

/// Writes hsi.npy, lidar.npy, labels.npy, train_mask.npy, test_mask.npy and
/// dataset.json into `dir`; returns the manifest path.
inline std::filesystem::path write_synth(const std::filesystem::path& dir, const SynthSpec& spec) {
  namespace fs = std::filesystem;
  const SynthScene s = synthesize(spec);
  fs::create_directories(dir);
  const Shape hw{spec.height, spec.width};
  write_npy<float>(dir / "hsi.npy", Shape{spec.height, spec.width, spec.bands}, s.hsi);
  write_npy<float>(dir / "lidar.npy", hw, s.lidar);
  write_npy<std::uint16_t>(dir / "labels.npy", hw, s.labels);
  write_npy<std::uint8_t>(dir / "train_mask.npy", hw, s.split.train);
  write_npy<std::uint8_t>(dir / "test_mask.npy", hw, s.split.test);
  Manifest m;
  m.hsi = "hsi.npy";
  m.lidar = "lidar.npy";
  m.labels = "labels.npy";
  m.num_classes = spec.classes;
  for (std::size_t c = 0; c < spec.classes; ++c) m.class_names.push_back("class" + std::to_string(c + 1));
  m.train_mask = "train_mask.npy";
  m.test_mask = "test_mask.npy";
  nlohmann::json j = m.to_json();
  j["synth"] = spec.to_json();
  j["synth"]["worst_margin_sigmas"] = s.worst_margin_sigmas;
  j["synth"]["elevation_offsets"] = s.elevation_offsets;
  const fs::path manifest = dir / "dataset.json";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw SceneError("cannot write " + manifest.string());
  out << j.dump(2) << "\n";
  if (!out) throw SceneError("write failed for " + manifest.string());
  return manifest;
}

}  // namespace nnc
