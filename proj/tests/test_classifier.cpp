#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "nnc/classifier.hpp"
#include "nnc/metrics.hpp"

using namespace nnc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nnc_classifier_" + name);
  fs::remove_all(p);
  return p;
}

/// Independent OA / AA / Kappa from a per-pixel walk, no confusion matrix.
Scores naive_scores(const std::vector<std::uint16_t>& pred, const std::vector<std::uint16_t>& truth, std::size_t classes) {
  Scores s;
  const double n = double(truth.size());
  double hit = 0, pe = 0, aa = 0;
  std::size_t present = 0;
  for (std::size_t c = 1; c <= classes; ++c) {
    double t = 0, p = 0, tp = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      t += truth[i] == c;
      p += pred[i] == c;
      tp += truth[i] == c && pred[i] == c;
    }
    hit += tp;
    pe += (t / n) * (p / n);
    if (t > 0) {
      aa += tp / t;
      ++present;
    }
  }
  s.oa = hit / n;
  s.aa = aa / double(present);
  s.kappa = (s.oa - pe) / (1 - pe);
  return s;
}

/// Two classes split into left and right halves, separated by a wide margin.
ModelInputs two_class_inputs(std::size_t h, std::size_t w, std::size_t bands, LabelMap& labels) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  ModelInputs in;
  in.hsi.height = in.lidar.height = labels.height = h;
  in.hsi.width = in.lidar.width = labels.width = w;
  in.hsi.bands = bands;
  in.hsi.values = Tensor<float>({bands, h, w});
  in.lidar.values = Tensor<float>({h, w});
  labels.num_classes = 2;
  labels.labels.assign(h * w, 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const bool right = c >= w / 2;
      labels.labels[r * w + c] = right ? 2 : 1;
      for (std::size_t b = 0; b < bands; ++b) in.hsi.values[(b * h + r) * w + c] = (right ? 1.5f : -1.5f) + noise(rng);
      in.lidar.values[r * w + c] = (right ? -1.0f : 1.0f) + noise(rng);
    }
  return in;
}

ModelInputs noise_inputs(std::size_t h, std::size_t w, std::size_t bands, std::uint64_t seed) {
  Rng rng(seed);
  ModelInputs in;
  in.hsi.height = in.lidar.height = h;
  in.hsi.width = in.lidar.width = w;
  in.hsi.bands = bands;
  in.hsi.values = Tensor<float>({bands, h, w});
  in.lidar.values = Tensor<float>({h, w});
  for (std::size_t i = 0; i < in.hsi.values.size(); ++i) in.hsi.values[i] = float(normal01(rng));
  for (std::size_t i = 0; i < in.lidar.values.size(); ++i) in.lidar.values[i] = float(normal01(rng));
  return in;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, PerfectPredictionScoresOne) {
  const std::vector<std::uint16_t> t{1, 2, 3, 3, 2, 1, 1};
  const Scores s = evaluate(t, t, std::vector<std::uint8_t>(t.size(), 1), 3);
  EXPECT_EQ(s.oa, 1.0);
  EXPECT_EQ(s.aa, 1.0);
  EXPECT_EQ(s.kappa, 1.0);
}

TEST(Metrics, ChanceConfusionHasKappaExactlyZero) {
  ConfusionMatrix m(2);
  m.at(0, 0) = 50;
  m.at(1, 0) = 50;
  const Scores s = scores_from(m);
  EXPECT_EQ(s.oa, 0.5);
  EXPECT_EQ(s.aa, 0.5);
  EXPECT_EQ(s.kappa, 0.0);
}

TEST(Metrics, MatchesNaiveTallyOnRandomPairs) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t classes = 2 + rng() % 7, n = 20 + rng() % 500;
    std::vector<std::uint16_t> truth(n), pred(n);
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = std::uint16_t(1 + rng() % classes);
      // Bias toward agreement so kappa is not always near zero.
      pred[i] = rng() % 3 == 0 ? std::uint16_t(1 + rng() % classes) : truth[i];
      mask[i] = rng() % 5 != 0;
    }
    std::vector<std::uint16_t> t2, p2;
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i]) {
        t2.push_back(truth[i]);
        p2.push_back(pred[i]);
      }
    const Scores got = evaluate(pred, truth, mask, classes), want = naive_scores(p2, t2, classes);
    EXPECT_NEAR(got.oa, want.oa, 1e-12) << trial;
    EXPECT_NEAR(got.aa, want.aa, 1e-12) << trial;
    EXPECT_NEAR(got.kappa, want.kappa, 1e-12) << trial;
    EXPECT_EQ(got.confusion.total(), t2.size());
  }
}

TEST(Metrics, InvariantUnderRelabeling) {
  std::mt19937_64 rng(9);
  const std::size_t classes = 5, n = 400;
  std::vector<std::uint16_t> truth(n), pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = std::uint16_t(1 + rng() % classes);
    pred[i] = rng() % 2 ? truth[i] : std::uint16_t(1 + rng() % classes);
  }
  std::vector<std::uint16_t> perm(classes);
  std::iota(perm.begin(), perm.end(), std::uint16_t{1});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::uint16_t> t2(n), p2(n);
  for (std::size_t i = 0; i < n; ++i) {
    t2[i] = perm[truth[i] - 1u];
    p2[i] = perm[pred[i] - 1u];
  }
  const std::vector<std::uint8_t> mask(n, 1);
  const Scores a = evaluate(pred, truth, mask, classes), b = evaluate(p2, t2, mask, classes);
  EXPECT_NEAR(a.oa, b.oa, 1e-15);
  EXPECT_NEAR(a.aa, b.aa, 1e-15);
  EXPECT_NEAR(a.kappa, b.kappa, 1e-15);
}

TEST(Metrics, BoundsAndDiagonalKappa) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionMatrix m(4);
    for (auto& v : m.counts) v = rng() % 20;
    m.at(0, 0) += 1;
    const Scores s = scores_from(m);
    EXPECT_GE(s.oa, 0.0);
    EXPECT_LE(s.oa, 1.0);
    EXPECT_GE(s.aa, 0.0);
    EXPECT_LE(s.aa, 1.0);
    EXPECT_GE(s.kappa, -1.0);
    EXPECT_LE(s.kappa, 1.0);
  }
  ConfusionMatrix d(3);
  d.at(0, 0) = 4;
  d.at(1, 1) = 7;
  d.at(2, 2) = 1;
  EXPECT_EQ(scores_from(d).kappa, 1.0);
  d.at(2, 1) = 1;
  EXPECT_LT(scores_from(d).kappa, 1.0);
}

TEST(Metrics, AverageAccuracySkipsAbsentClasses) {
  ConfusionMatrix m(3);
  m.at(0, 0) = 3;
  m.at(0, 1) = 1;
  m.at(1, 1) = 2;
  const Scores s = scores_from(m);
  EXPECT_DOUBLE_EQ(s.aa, (0.75 + 1.0) / 2);
  EXPECT_TRUE(std::isnan(s.per_class[2]));
  EXPECT_TRUE(s.to_json()["per_class"][2].is_null());
}

TEST(Metrics, RejectsBadInput) {
  const std::vector<std::uint16_t> t{1, 2}, p{1, 3};
  EXPECT_THROW(evaluate(p, t, {1, 1}, 2), std::invalid_argument);
  EXPECT_THROW(evaluate(t, t, {0, 0}, 2), std::invalid_argument);
  EXPECT_THROW(evaluate(t, {1, 0}, {1, 1}, 2), std::invalid_argument);
  EXPECT_THROW(evaluate(t, t, {1}, 2), std::invalid_argument);
}

TEST(Metrics, ConfusionCsvLayout) {
  ConfusionMatrix m(2);
  m.at(0, 1) = 3;
  m.at(1, 1) = 4;
  EXPECT_EQ(m.to_csv(), "truth\\pred,1,2\n1,0,3\n2,0,4\n");
}

// ---------------------------------------------------------------------------
// Classifier

TEST(Classifier, BatchRangesMergeTrailingSingleton) {
  using R = std::vector<std::pair<std::size_t, std::size_t>>;
  EXPECT_EQ(batch_ranges(257, 128), (R{{0, 128}, {128, 257}}));
  EXPECT_EQ(batch_ranges(256, 128), (R{{0, 128}, {128, 256}}));
  EXPECT_EQ(batch_ranges(130, 128), (R{{0, 128}, {128, 130}}));
  EXPECT_EQ(batch_ranges(40, 128), (R{{0, 40}}));
}

TEST(Classifier, InitFromCheckpointCopiesEncoderBitExactly) {
  ModelConfig m = reduced_config();
  Rng rng(4);
  Checkpoint ck;
  ck.kind = "pretrain";
  ck.model = m;
  ck.params = init_params<float>(model_param_specs(m), rng);
  ck.buffers = init_buffers<float>(m);
  for (auto& [name, st] : ck.buffers) st.mean.fill(0.25f);
  const fs::path dir = scratch("init");
  save_checkpoint(dir, ck);
  const Checkpoint loaded = load_checkpoint(dir);

  const Classifier c = make_classifier(m, 3, 17, &loaded);
  const Classifier fresh = make_classifier(m, 3, 17);
  std::size_t copied = 0;
  for (const auto& [name, t] : c.params) {
    if (name.starts_with("cls.")) {
      EXPECT_EQ(t, fresh.params.at(name)) << name;
    } else {
      EXPECT_FALSE(name.starts_with("proj.")) << name;
      EXPECT_EQ(t, ck.params.at(name)) << name;
      ++copied;
    }
  }
  EXPECT_EQ(copied + 2, c.params.size());
  for (const auto& [name, st] : c.buffers) EXPECT_EQ(st.mean, ck.buffers.at(name).mean);
  EXPECT_EQ(c.model.embed, 0u);
}

TEST(Classifier, RejectsMismatchedCheckpoint) {
  ModelConfig m = reduced_config();
  Rng rng(4);
  Checkpoint ck;
  ck.kind = "pretrain";
  ck.model = m;
  ck.params = init_params<float>(model_param_specs(m), rng);
  ModelConfig other = m;
  other.gate = false;
  EXPECT_THROW(make_classifier(other, 3, 1, &ck), CheckpointError);
}

TEST(Classifier, ConstantLogitsTieToLowestClass) {
  const ModelInputs in = noise_inputs(9, 11, 6, 1);
  Classifier c = make_classifier(reduced_config(), 4, 2);
  c.params.at("cls.weight").fill(0.0f);
  c.params.at("cls.bias").fill(0.0f);
  const LabelMap m = predict_map(c, in, 64, 1);
  EXPECT_EQ(m.height, 9u);
  EXPECT_EQ(m.width, 11u);
  EXPECT_EQ(m.labels, std::vector<std::uint16_t>(99, 1));
}

TEST(Classifier, MapIndependentOfBatchAndThreads) {
  const ModelInputs in = noise_inputs(12, 10, 6, 2);
  const Classifier c = make_classifier(reduced_config(), 5, 3);
  const Tensor<float> a = predict_logits(c, in, {{0, 0}, {5, 5}, {11, 9}, {3, 7}}, 1, 1);
  const Tensor<float> b = predict_logits(c, in, {{0, 0}, {5, 5}, {11, 9}, {3, 7}}, 256, 4);
  EXPECT_EQ(a, b);
  const LabelMap one = predict_map(c, in, 1, 1), many = predict_map(c, in, 256, 3);
  EXPECT_EQ(one.labels, many.labels);
}

TEST(Classifier, ArgmaxIgnoresConstantLogitShift) {
  const ModelInputs in = noise_inputs(8, 8, 6, 3);
  Classifier c = make_classifier(reduced_config(), 3, 4);
  const LabelMap before = predict_map(c, in, 32, 1);
  Tensor<float>& bias = c.params.at("cls.bias");
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] += 0.5f;
  EXPECT_EQ(predict_map(c, in, 32, 1).labels, before.labels);
}

TEST(Classifier, ThreadCountFromEnvironment) {
  ::setenv("NNC_THREADS", "1", 1);
  EXPECT_EQ(worker_count(), 1u);
  ::setenv("NNC_THREADS", "zero", 1);
  EXPECT_THROW(worker_count(), std::invalid_argument);
  ::unsetenv("NNC_THREADS");
  EXPECT_GE(worker_count(), 1u);
}

TEST(Classifier, OneEpochSeparatesTrivialClasses) {
  LabelMap labels;
  const ModelInputs in = two_class_inputs(48, 48, 6, labels);
  // Pixels whose whole 7x7 patch lies inside one class.
  std::vector<std::uint8_t> all(labels.labels.size(), 0);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = (i % 48 + 3 < 24 || i % 48 >= 27) ? 1 : 0;
  Classifier c = make_classifier(reduced_config(), 2, 1);
  FinetuneConfig fc;
  fc.epochs = 1;
  fc.seed = 1;
  const auto hist = finetune(c, in, labeled_pixels(labels, all), fc);
  ASSERT_EQ(hist.size(), 1u);
  const Scores s = evaluate_on(c, in, labels, all);
  EXPECT_GE(s.oa, 0.99) << "train accuracy after one epoch";
}

TEST(Classifier, FixedSeedGivesIdenticalWeights) {
  LabelMap labels;
  const ModelInputs in = two_class_inputs(16, 16, 6, labels);
  std::vector<std::uint8_t> mask(labels.labels.size(), 0);
  for (std::size_t i = 0; i < mask.size(); i += 7) mask[i] = 1;
  FinetuneConfig fc;
  fc.epochs = 3;
  fc.batch = 8;
  fc.seed = 9;
  Classifier a = make_classifier(reduced_config(), 2, 9), b = make_classifier(reduced_config(), 2, 9);
  finetune(a, in, labeled_pixels(labels, mask), fc);
  finetune(b, in, labeled_pixels(labels, mask), fc);
  for (const auto& [name, t] : a.params) EXPECT_EQ(t, b.params.at(name)) << name;
  for (const auto& [name, st] : a.buffers) EXPECT_EQ(st.var, b.buffers.at(name).var) << name;
}

TEST(Classifier, FrozenEncoderTrainsOnlyTheHead) {
  LabelMap labels;
  const ModelInputs in = two_class_inputs(16, 16, 6, labels);
  const std::vector<std::uint8_t> mask(labels.labels.size(), 1);
  Classifier c = make_classifier(reduced_config(), 2, 2);
  const Classifier before = c;
  FinetuneConfig fc;
  fc.epochs = 1;
  fc.freeze_encoder = true;
  finetune(c, in, labeled_pixels(labels, mask), fc);
  for (const auto& [name, t] : c.params) {
    if (name.starts_with("cls.")) EXPECT_NE(t, before.params.at(name)) << name;
    else EXPECT_EQ(t, before.params.at(name)) << name;
  }
  for (const auto& [name, st] : c.buffers) EXPECT_EQ(st.mean, before.buffers.at(name).mean) << name;
}

TEST(Classifier, EmptyClassInTrainingSplitIsAnError) {
  LabelMap labels;
  const ModelInputs in = two_class_inputs(8, 8, 6, labels);
  std::vector<std::uint8_t> mask(labels.labels.size(), 0);
  mask[0] = mask[1] = 1;  // both in the left half, class 1
  Classifier c = make_classifier(reduced_config(), 2, 2);
  EXPECT_THROW(finetune(c, in, labeled_pixels(labels, mask), FinetuneConfig{}), std::invalid_argument);
}

TEST(Classifier, CheckpointRoundTripPreservesPredictions) {
  const ModelInputs in = noise_inputs(8, 8, 6, 4);
  const Classifier c = make_classifier(reduced_config(), 3, 5);
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(dir, to_checkpoint(c));
  const Classifier back = classifier_from(load_checkpoint(dir));
  EXPECT_EQ(predict_map(back, in, 16, 1).labels, predict_map(c, in, 16, 1).labels);
  EXPECT_EQ(predict_logits(back, in, {{1, 2}}, 1, 1), predict_logits(c, in, {{1, 2}}, 1, 1));
}

TEST(Classifier, EvaluateScoresOnlyMaskedPixels) {
  LabelMap labels;
  const ModelInputs in = two_class_inputs(8, 8, 6, labels);
  Classifier c = make_classifier(reduced_config(), 2, 2);
  c.params.at("cls.weight").fill(0.0f);
  c.params.at("cls.bias").fill(0.0f);
  std::vector<std::uint8_t> mask(labels.labels.size(), 0);
  mask[0] = mask[7] = mask[8] = 1;  // labels 1, 2, 1
  const Scores s = evaluate_on(c, in, labels, mask);
  EXPECT_EQ(s.confusion.total(), 3u);
  EXPECT_DOUBLE_EQ(s.oa, 2.0 / 3.0);
  EXPECT_THROW(evaluate_on(c, in, labels, std::vector<std::uint8_t>(64, 0)), std::invalid_argument);
}
