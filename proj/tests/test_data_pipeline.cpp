#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "nnc/patches.hpp"
#include "nnc/pca.hpp"
#include "nnc/scene.hpp"

namespace nnc {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("nnc_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SceneCube make_cube(std::size_t h, std::size_t w, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  SceneCube c;
  c.height = h;
  c.width = w;
  c.bands = b;
  c.values = Tensor<float>({b, h, w});
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] = static_cast<float>(normal01(rng));
  return c;
}

ElevationMap make_elevation(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  ElevationMap e;
  e.height = h;
  e.width = w;
  e.values = Tensor<float>({h, w});
  for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = static_cast<float>(normal01(rng));
  return e;
}

void write_dataset(const fs::path& dir, std::size_t h, std::size_t w, std::size_t b, std::size_t lh, std::size_t lw,
                   bool constant_band = false) {
  std::vector<float> hwb(h * w * b);
  Rng rng(3);
  for (auto& v : hwb) v = static_cast<float>(5.0 + 2.0 * normal01(rng));
  if (constant_band) {
    for (std::size_t i = 0; i < h * w; ++i) hwb[i * b] = 7.0f;
  }
  write_npy<float>(dir / "hsi.npy", {h, w, b}, hwb);
  std::vector<float> el(lh * lw);
  for (auto& v : el) v = static_cast<float>(normal01(rng));
  write_npy<float>(dir / "lidar.npy", {lh, lw}, el);
  std::vector<std::uint16_t> lab(h * w);
  for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = static_cast<std::uint16_t>(1 + i % 3);
  write_npy<std::uint16_t>(dir / "labels.npy", {h, w}, lab);
  Manifest m{"hsi.npy", "lidar.npy", "labels.npy", 3, {"a", "b", "c"}, {}, {}};
  std::ofstream(dir / "dataset.json") << m.to_json().dump(2);
}

// --- NPY -------------------------------------------------------------------

TEST(Npy, HeaderIsVersionOneAndAligned) {
  auto dir = temp_dir("npy_header");
  std::vector<float> v{1.f, 2.f, 3.f, 4.f, 5.f, 6.f};
  write_npy<float>(dir / "a.npy", {2, 3}, v);
  std::ifstream in(dir / "a.npy", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(bytes.substr(0, 6), "\x93NUMPY");
  EXPECT_EQ(bytes[6], '\x01');
  EXPECT_EQ(bytes[7], '\x00');
  const std::size_t hlen = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
  EXPECT_EQ((10 + hlen) % 64, 0u);
  EXPECT_NE(bytes.find("'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }"), std::string::npos);
  EXPECT_EQ(bytes.size(), 10 + hlen + v.size() * 4);
}

TEST(Npy, RoundTripPreservesValuesAndShape) {
  auto dir = temp_dir("npy_rt");
  Rng rng(1);
  for (std::size_t trial = 0; trial < 20; ++trial) {
    Shape s;
    const std::size_t rank = 1 + uniform_index(rng, 4);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + uniform_index(rng, 5));
    Tensor<double> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal01(rng);
    write_npy(dir / "t.npy", t);
    EXPECT_EQ(read_npy_tensor<double>(dir / "t.npy"), t);
    std::vector<std::uint16_t> u(t.size());
    for (auto& x : u) x = static_cast<std::uint16_t>(uniform_index(rng, 65535));
    write_npy<std::uint16_t>(dir / "u.npy", s, u);
    NpyArray a = read_npy(dir / "u.npy");
    EXPECT_EQ(a.shape, s);
    EXPECT_EQ(a.as<std::uint16_t>(), u);
  }
}

TEST(Npy, RejectsGarbage) {
  auto dir = temp_dir("npy_bad");
  std::ofstream(dir / "x.npy") << "not an npy file";
  EXPECT_THROW(read_npy(dir / "x.npy"), NpyError);
  EXPECT_THROW(read_npy(dir / "missing.npy"), NpyError);
}

// --- load_scene ---------------------------------------------------------------

TEST(LoadScene, LoadsAndStandardizes) {
  auto dir = temp_dir("load_ok");
  write_dataset(dir, 64, 64, 12, 64, 64);
  Scene s = load_scene(dir / "dataset.json");
  EXPECT_EQ(s.hsi.bands, 12u);
  EXPECT_EQ(s.hsi.height, 64u);
  EXPECT_EQ(s.lidar.values.shape(), (Shape{64, 64}));
  EXPECT_EQ(s.labels.labels.size(), 64u * 64u);
  EXPECT_TRUE(s.warnings.empty());
  const std::size_t px = 64 * 64;
  for (std::size_t b = 0; b < 12; ++b) {
    double m = 0, sq = 0;
    for (std::size_t i = 0; i < px; ++i) m += s.hsi.values[b * px + i];
    m /= px;
    for (std::size_t i = 0; i < px; ++i) sq += std::pow(s.hsi.values[b * px + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-3);
    EXPECT_NEAR(std::sqrt(sq / px), 1.0, 1e-3);
  }
  auto freq = s.labels.frequencies();
  EXPECT_EQ(freq[0], 0u);
  EXPECT_EQ(freq[1] + freq[2] + freq[3], px);
}

TEST(LoadScene, RejectsMisregisteredLidar) {
  auto dir = temp_dir("load_misreg");
  write_dataset(dir, 64, 64, 12, 32, 32);
  try {
    load_scene(dir / "dataset.json");
    FAIL();
  } catch (const SceneError& e) {
    EXPECT_NE(std::string(e.what()).find("co-registration"), std::string::npos);
  }
}

TEST(LoadScene, ConstantBandBecomesZerosWithWarning) {
  auto dir = temp_dir("load_const");
  write_dataset(dir, 16, 16, 4, 16, 16, true);
  Scene s = load_scene(dir / "dataset.json");
  ASSERT_EQ(s.warnings.size(), 1u);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(s.hsi.values[i], 0.0f);
}

TEST(LoadScene, RejectsNonFinite) {
  auto dir = temp_dir("load_nan");
  write_dataset(dir, 8, 8, 2, 8, 8);
  std::vector<float> hwb(8 * 8 * 2, 1.0f);
  hwb[5] = std::nanf("");
  write_npy<float>(dir / "hsi.npy", {8, 8, 2}, hwb);
  EXPECT_THROW(load_scene(dir / "dataset.json"), SceneError);
}

TEST(Split, DrawsExactCountsPerClass) {
  LabelMap lm{10, 10, 3, std::vector<std::uint16_t>(100)};
  for (std::size_t i = 0; i < 100; ++i) lm.labels[i] = static_cast<std::uint16_t>(i % 4);
  Rng rng(5);
  Split sp = make_split(lm, 4, rng);
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_FALSE(sp.train[i] && sp.test[i]);
    if (sp.train[i]) ++counts[lm.labels[i]];
    if (lm.labels[i] == 0) {
      EXPECT_FALSE(sp.train[i] || sp.test[i]);
    }
  }
  EXPECT_EQ(counts, (std::vector<std::size_t>{0, 4, 4, 4}));
  EXPECT_THROW(make_split(lm, 26, rng), SceneError);
}

// --- PCA --------------------------------------------------------------------

/// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

/// Four bands built from mutually orthogonal +-1 sequences scaled to
/// variances 4, 3, 2, 1, then mixed by a fixed rotation.
SceneCube diag_cov_cube(bool rotate) {
  const std::size_t h = 64, w = 64, px = h * w;
  const double var[4] = {4, 3, 2, 1};
  const unsigned masks[4] = {0x001, 0x002, 0x004, 0x808};
  std::vector<std::array<double, 4>> raw(px);
  for (std::size_t i = 0; i < px; ++i)
    for (int b = 0; b < 4; ++b) raw[i][b] = std::sqrt(var[b]) * ((std::popcount(unsigned(i) & masks[b]) % 2) ? -1.0 : 1.0);
  // Rotation: product of two Givens rotations.
  const double c1 = std::cos(0.3), s1 = std::sin(0.3), c2 = std::cos(1.1), s2 = std::sin(1.1);
  SceneCube c;
  c.height = h;
  c.width = w;
  c.bands = 4;
  c.values = Tensor<float>({4, h, w});
  for (std::size_t i = 0; i < px; ++i) {
    auto v = raw[i];
    if (rotate) {
      const double a0 = c1 * v[0] - s1 * v[2], a2 = s1 * v[0] + c1 * v[2];
      const double a1 = c2 * v[1] - s2 * v[3], a3 = s2 * v[1] + c2 * v[3];
      v = {a0, a1, a2, a3};
    }
    for (int b = 0; b < 4; ++b) c.values[b * px + i] = static_cast<float>(v[b]);
  }
  return c;
}

std::vector<std::vector<double>> empirical_cov(const SceneCube& c) {
  const std::size_t px = c.height * c.width, nb = c.bands;
  std::vector<double> mean(nb, 0);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < px; ++i) mean[b] += c.values[b * px + i] / double(px);
  std::vector<std::vector<double>> cov(nb, std::vector<double>(nb, 0));
  for (std::size_t a = 0; a < nb; ++a)
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < px; ++i) cov[a][b] += (c.values[a * px + i] - mean[a]) * (c.values[b * px + i] - mean[b]) / double(px);
  return cov;
}

TEST(Pca, DiagonalCovarianceKeepsLeadingVariances) {
  for (bool rotate : {false, true}) {
    SceneCube c = diag_cov_cube(rotate);
    const auto oracle = jacobi_eigenvalues(empirical_cov(c));
    EXPECT_NEAR(oracle[0], 4.0, 1e-5);
    EXPECT_NEAR(oracle[1], 3.0, 1e-5);
    PcaResult r = pca_reduce(c, 2);
    ASSERT_EQ(r.cube.bands, 2u);
    const auto proj = empirical_cov(r.cube);
    EXPECT_NEAR(proj[0][0], oracle[0], 1e-5);
    EXPECT_NEAR(proj[1][1], oracle[1], 1e-5);
    EXPECT_NEAR(proj[0][1], 0.0, 1e-5);
    EXPECT_NEAR(r.eigenvalues[0], oracle[0], 1e-9);
    EXPECT_NEAR(r.eigenvalues[1], oracle[1], 1e-9);
    EXPECT_NEAR(r.explained_ratio[0], 0.4, 1e-6);
  }
}

TEST(Pca, RankOneCubeIsFullyExplained) {
  SceneCube c = make_cube(16, 16, 5, 2);
  const std::size_t px = 256;
  for (std::size_t b = 1; b < 5; ++b)
    for (std::size_t i = 0; i < px; ++i) c.values[b * px + i] = c.values[i];
  PcaResult r = pca_reduce(c, 1);
  EXPECT_NEAR(r.explained_ratio[0], 1.0, 1e-6);
}

TEST(Pca, FullRankProjectionIsIsometry) {
  SceneCube c = make_cube(12, 12, 6, 3);
  PcaResult r = pca_reduce(c, 6);
  const std::size_t px = 144;
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    const std::size_t i = uniform_index(rng, px), j = uniform_index(rng, px);
    double d0 = 0, d1 = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      d0 += std::pow(double(c.values[b * px + i]) - c.values[b * px + j], 2);
      d1 += std::pow(double(r.cube.values[b * px + i]) - r.cube.values[b * px + j], 2);
    }
    EXPECT_NEAR(std::sqrt(d0), std::sqrt(d1), 1e-5 * std::max(1.0, std::sqrt(d0)));
  }
}

TEST(Pca, ComponentsOrthonormalAndSigned) {
  SceneCube c = make_cube(20, 20, 8, 4);
  // Correlate the bands.
  const std::size_t px = 400;
  for (std::size_t b = 1; b < 8; ++b)
    for (std::size_t i = 0; i < px; ++i) c.values[b * px + i] += 0.5f * c.values[(b - 1) * px + i];
  PcaResult r = pca_reduce(c, 8);
  for (std::size_t a = 0; a < 8; ++a) {
    for (std::size_t b = 0; b < 8; ++b) {
      double dot = 0;
      for (std::size_t k = 0; k < 8; ++k) dot += r.components[a][k] * r.components[b][k];
      EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-8);
    }
    const auto& comp = r.components[a];
    const auto it = std::max_element(comp.begin(), comp.end(), [](double x, double y) { return std::abs(x) < std::abs(y); });
    EXPECT_GT(*it, 0.0);
    if (a > 0) {
      EXPECT_LE(r.eigenvalues[a], r.eigenvalues[a - 1]);
    }
  }
  EXPECT_THROW(pca_reduce(c, 9), std::invalid_argument);
}

// --- patches ----------------------------------------------------------------

TEST(ExtractPatch, InteriorWindowIsExact) {
  SceneCube c = make_cube(64, 64, 3, 1);
  ElevationMap e = make_elevation(64, 64, 2);
  PatchPair p = extract_patch(c, e, {5, 5});
  EXPECT_EQ(p.hsi.shape(), (Shape{3, 11, 11}));
  EXPECT_EQ(p.lidar.shape(), (Shape{1, 11, 11}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t y = 0; y < 11; ++y)
      for (std::size_t x = 0; x < 11; ++x) EXPECT_EQ(p.hsi.at({b, y, x}), c.at(b, y, x));
  for (std::size_t y = 0; y < 11; ++y)
    for (std::size_t x = 0; x < 11; ++x) EXPECT_EQ(p.lidar.at({0, y, x}), e.values.at({y, x}));
}

TEST(ExtractPatch, CornerUsesReflectPadding) {
  SceneCube c = make_cube(64, 64, 2, 1);
  ElevationMap e = make_elevation(64, 64, 2);
  PatchPair p = extract_patch(c, e, {0, 0});
  // Window row y maps to scene row |y - 5|.
  for (std::size_t y = 0; y < 11; ++y)
    for (std::size_t x = 0; x < 11; ++x) {
      const std::size_t r = y >= 5 ? y - 5 : 5 - y, col = x >= 5 ? x - 5 : 5 - x;
      EXPECT_EQ(p.hsi.at({1, y, x}), c.at(1, r, col));
    }
  EXPECT_EQ(p.lidar.at({0, 0, 0}), e.values.at({5, 5}));
  EXPECT_THROW(extract_patch(c, e, {64, 0}), std::out_of_range);
}

TEST(ExtractPatch, EveryPixelIsAValidCenter) {
  SceneCube c = make_cube(64, 64, 1, 1);
  ElevationMap e = make_elevation(64, 64, 2);
  std::size_t count = 0;
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t col = 0; col < 64; ++col) {
      extract_patch(c, e, {r, col});
      ++count;
    }
  EXPECT_EQ(count, 4096u);
}

TEST(ExtractPatch, InteriorMatchesUnpaddedWindowEverywhere) {
  SceneCube c = make_cube(20, 17, 2, 7);
  ElevationMap e = make_elevation(20, 17, 8);
  for (std::size_t r = 5; r + 5 < 20; ++r)
    for (std::size_t col = 5; col + 5 < 17; ++col) {
      PatchPair p = extract_patch(c, e, {r, col});
      for (std::size_t y = 0; y < 11; ++y)
        for (std::size_t x = 0; x < 11; ++x) ASSERT_EQ(p.hsi.at({0, y, x}), c.at(0, r + y - 5, col + x - 5));
    }
}

/// Brute-force: overlap of two 11x11 windows as a pixel-set intersection.
double overlap_fraction(int dy, int dx, int p = 11) {
  std::set<std::pair<int, int>> a;
  for (int y = 0; y < p; ++y)
    for (int x = 0; x < p; ++x) a.insert({y, x});
  int inter = 0;
  for (int y = 0; y < p; ++y)
    for (int x = 0; x < p; ++x) inter += a.count({y + dy, x + dx});
  return double(inter) / double(p * p);
}

TEST(NeighborOffsets, MatchesBruteForceEnumeration) {
  std::set<Offset> oracle;
  for (int dy = -11; dy <= 11; ++dy)
    for (int dx = -11; dx <= 11; ++dx)
      if ((dy || dx) && overlap_fraction(dy, dx) > 0.8) oracle.insert({dy, dx});
  const auto got = neighbor_offsets(11, 0.8);
  EXPECT_EQ(std::set<Offset>(got.begin(), got.end()), oracle);
  EXPECT_EQ(got.size(), 12u);
  EXPECT_TRUE(oracle.count({0, 1}));
  EXPECT_FALSE(oracle.count({2, 2}));
  EXPECT_TRUE(oracle.count({0, 2}) && oracle.count({-2, 0}));
}

TEST(PretrainBatch, AnchorsRespectMinimumDistance) {
  Rng rng(11);
  PretrainSampling cfg;
  cfg.batch = 2;
  cfg.min_distance = 12;
  for (int t = 0; t < 50; ++t) {
    auto b = sample_pretrain_batch(64, 64, cfg, rng);
    ASSERT_EQ(b.size(), 2u);
    EXPECT_GE(chebyshev(b[0].anchor, b[1].anchor), 12u);
  }
  cfg.batch = 32;
  cfg.min_distance = 6;
  const auto offsets = neighbor_offsets();
  const std::set<Offset> allowed(offsets.begin(), offsets.end());
  for (int t = 0; t < 20; ++t) {
    auto b = sample_pretrain_batch(64, 64, cfg, rng);
    for (std::size_t i = 0; i < b.size(); ++i) {
      for (std::size_t j = i + 1; j < b.size(); ++j) EXPECT_GE(chebyshev(b[i].anchor, b[j].anchor), 6u);
      const Offset o{int(b[i].neighbor.row) - int(b[i].anchor.row), int(b[i].neighbor.col) - int(b[i].anchor.col)};
      EXPECT_TRUE(allowed.count(o));
      EXPECT_GT(overlap_fraction(o.dy, o.dx), 0.8);
    }
  }
}

TEST(PretrainBatch, ZeroDistanceAllowsAnything) {
  Rng rng(12);
  PretrainSampling cfg;
  cfg.batch = 500;
  cfg.min_distance = 0;
  EXPECT_EQ(sample_pretrain_batch(8, 8, cfg, rng).size(), 500u);
}

TEST(PretrainBatch, ImpossibleRequestFailsWithAdvice) {
  Rng rng(13);
  PretrainSampling cfg;
  cfg.batch = 64;
  cfg.min_distance = 12;
  cfg.retry_budget = 20000;
  try {
    sample_pretrain_batch(64, 64, cfg, rng);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("smaller"), std::string::npos);
  }
}

PatchPair random_pair(std::uint64_t seed) {
  SceneCube c = make_cube(32, 32, 4, seed);
  ElevationMap e = make_elevation(32, 32, seed + 1);
  return extract_patch(c, e, {16, 16});
}

TEST(Augment, DisabledIsIdentity) {
  PatchPair p = random_pair(1);
  AugmentConfig off{false, false, false, false};
  Rng rng(3);
  PatchPair a = augment(p, rng, off);
  EXPECT_EQ(a.hsi, p.hsi);
  EXPECT_EQ(a.lidar, p.lidar);
}

TEST(Augment, DoubleFlipIsIdentity) {
  PatchPair p = random_pair(2);
  AugmentConfig cfg{false, true, true, false};
  AugmentDraw d;
  d.hflip = true;
  Rng rng(0);
  PatchPair once = apply_augment(p, d, cfg, rng);
  EXPECT_NE(once.hsi, p.hsi);
  EXPECT_EQ(once.hsi.at({0, 0, 0}), p.hsi.at({0, 0, 10}));
  PatchPair twice = apply_augment(once, d, cfg, rng);
  EXPECT_EQ(twice.hsi, p.hsi);
  EXPECT_EQ(twice.lidar, p.lidar);
  d.hflip = false;
  d.vflip = true;
  EXPECT_EQ(apply_augment(apply_augment(p, d, cfg, rng), d, cfg, rng).hsi, p.hsi);
}

TEST(Augment, FullWindowCropIsIdentity) {
  PatchPair p = random_pair(3);
  AugmentConfig cfg{true, false, false, false};
  AugmentDraw d;  // area 1.0 at (0, 0)
  Rng rng(0);
  PatchPair a = apply_augment(p, d, cfg, rng);
  for (std::size_t i = 0; i < p.hsi.size(); ++i) EXPECT_NEAR(a.hsi[i], p.hsi[i], 1e-6);
  for (std::size_t i = 0; i < p.lidar.size(); ++i) EXPECT_NEAR(a.lidar[i], p.lidar[i], 1e-6);
}

TEST(Augment, CropScaleStaysInRangeAndGeometryIsShared) {
  AugmentConfig cfg;
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    AugmentDraw d = draw_augment(rng, cfg, 11);
    EXPECT_GE(d.area_scale, 0.7);
    EXPECT_LT(d.area_scale, 1.0);
    const double side = 11 * std::sqrt(d.area_scale);
    EXPECT_LE(d.top + side, 11.0 + 1e-12);
    EXPECT_LE(d.left + side, 11.0 + 1e-12);
  }
  // A lidar plane equal to hsi band 0 must warp identically without noise.
  PatchPair p = random_pair(5);
  for (std::size_t i = 0; i < 121; ++i) p.lidar[i] = p.hsi[i];
  AugmentConfig geo{true, true, true, false};
  Rng r2(6);
  PatchPair a = augment(p, r2, geo);
  for (std::size_t i = 0; i < 121; ++i) EXPECT_EQ(a.lidar[i], a.hsi[i]);
}

TEST(Augment, PureFunctionOfSeed) {
  PatchPair p = random_pair(6);
  AugmentConfig cfg;
  Rng a(77), b(77);
  PatchPair x = augment(p, a, cfg), y = augment(p, b, cfg);
  EXPECT_EQ(x.hsi, y.hsi);
  EXPECT_EQ(x.lidar, y.lidar);
}

TEST(Augment, NoiseHasRequestedScale) {
  PatchPair p = random_pair(7);
  AugmentConfig cfg{false, false, false, true};
  Rng rng(8);
  double sq = 0;
  std::size_t n = 0;
  for (int t = 0; t < 50; ++t) {
    PatchPair a = augment(p, rng, cfg);
    for (std::size_t i = 0; i < p.hsi.size(); ++i, ++n) sq += std::pow(a.hsi[i] - p.hsi[i], 2);
  }
  EXPECT_NEAR(std::sqrt(sq / n), 0.01, 5e-4);
}

TEST(SubstituteHalfKeys, CountsAndMask) {
  Rng rng(1);
  for (std::size_t n : {64u, 1u, 7u}) {
    std::vector<PatchPair> keys(n), nb(n);
    for (std::size_t i = 0; i < n; ++i) {
      keys[i].center = {i, 0};
      nb[i].center = {i, 1};
    }
    auto mask = substitute_half_keys(keys, nb, rng);
    std::size_t subs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(keys[i].center.col, mask[i] ? 1u : 0u);
      subs += mask[i];
    }
    EXPECT_EQ(subs, n / 2);
  }
  std::vector<PatchPair> a(2), b(3);
  EXPECT_THROW(substitute_half_keys(a, b, rng), std::invalid_argument);
}

TEST(SubstituteHalfKeys, MaskIsUniformPerIndex) {
  const std::size_t n = 64, draws = 10000;
  std::vector<PatchPair> nb(n);
  std::vector<double> counts(n, 0);
  Rng rng(2024);
  for (std::size_t d = 0; d < draws; ++d) {
    std::vector<PatchPair> keys(n);
    auto mask = substitute_half_keys(keys, nb, rng);
    for (std::size_t i = 0; i < n; ++i) counts[i] += mask[i];
  }
  const double expected = draws * 0.5;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 99th percentile of chi-square with 63 degrees of freedom.
  EXPECT_LT(chi2, 92.01);
}

}  // namespace
}  // namespace nnc
