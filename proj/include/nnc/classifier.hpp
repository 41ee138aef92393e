#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnc/adam.hpp"
#include "nnc/checkpoint.hpp"
#include "nnc/contrastive.hpp"
#include "nnc/inputs.hpp"
#include "nnc/metrics.hpp"

namespace nnc {

struct FinetuneConfig {
  std::size_t epochs = 150;
  std::size_t batch = 128;
  double lr = 5e-4;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("finetune config: epochs must be positive");
    if (batch < 2) throw std::invalid_argument("finetune config: batch must be at least 2");
    if (!(lr > 0.0)) throw std::invalid_argument("finetune config: lr must be positive");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"seed", seed}, {"freeze_encoder", freeze_encoder}};
  }
};

struct Classifier {
  ModelConfig model;  // classes > 0, no projection head
  ParamMap<float> params;
  BufferMap<float> buffers;
};

inline bool is_head_param(const std::string& name) { return name.starts_with("proj.") || name.starts_with("cls."); }

/// Fresh classifier; with `init`, every encoder and attention tensor and all
/// BN statistics are copied from it, and only the class head stays random.
inline Classifier make_classifier(const ModelConfig& arch, std::size_t classes, std::uint64_t seed,
                                  const Checkpoint* init = nullptr) {
  if (classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  Classifier c;
  c.model = arch;
  c.model.embed = 0;
  c.model.classes = classes;
  c.model.validate();
  Rng rng = make_stream(seed, "init");
  c.params = init_params<float>(model_param_specs(c.model), rng);
  c.buffers = init_buffers<float>(c.model);
  if (init) {
    ModelConfig want = init->model, have = c.model;
    want.embed = have.embed = 0;
    want.classes = have.classes = 0;
    if (architecture_hash(want) != architecture_hash(have)) {
      throw CheckpointError("checkpoint encoder architecture differs from the requested model");
    }
    for (auto& [name, t] : c.params) {
      if (is_head_param(name)) continue;
      const auto it = init->params.find(name);
      if (it == init->params.end()) throw CheckpointError("checkpoint lacks parameter " + name);
      t = it->second;
    }
    c.buffers = init->buffers;
  }
  return c;
}

inline Checkpoint to_checkpoint(const Classifier& c, const nlohmann::json& extra = nlohmann::json::object()) {
  Checkpoint ck;
  ck.kind = "classifier";
  ck.model = c.model;
  ck.params = c.params;
  ck.buffers = c.buffers;
  ck.extra = extra;
  return ck;
}

inline Classifier classifier_from(const Checkpoint& ck) {
  if (ck.model.classes == 0) throw CheckpointError("checkpoint of kind '" + ck.kind + "' has no class head");
  return Classifier{ck.model, ck.params, ck.buffers};
}

/// Batches of at most `batch`; a trailing batch of one sample joins the
/// previous batch because train-mode BN needs two samples.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch) out.emplace_back(b, std::min(n, b + batch));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

struct LabeledPixels {
  std::vector<Pixel> pixels;
  std::vector<std::size_t> classes;  // 0-based
};

inline LabeledPixels labeled_pixels(const LabelMap& labels, const std::vector<std::uint8_t>& mask) {
  LabeledPixels out;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    if (!mask[i] || labels.labels[i] == 0) continue;
    out.pixels.push_back({i / labels.width, i % labels.width});
    out.classes.push_back(labels.labels[i] - 1u);
  }
  return out;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0;
  double accuracy = 0;
};

/// Cross-entropy training on the given pixels; returns per-epoch train loss
/// and accuracy (both measured on the training batches as they are fitted).
inline std::vector<EpochMetrics> finetune(Classifier& c, const ModelInputs& in, const LabeledPixels& train,
                                          const FinetuneConfig& cfg,
                                          const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  if (train.pixels.size() < 2) throw std::invalid_argument("finetune: need at least 2 training pixels");
  std::vector<std::size_t> per_class(c.model.classes, 0);
  for (std::size_t k : train.classes) {
    if (k >= c.model.classes) throw std::invalid_argument("finetune: training label outside the class range");
    ++per_class[k];
  }
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    if (per_class[k] == 0) throw std::invalid_argument("finetune: class " + std::to_string(k + 1) + " has no training pixel");
  }
  const PatchBatch all = patches_at(in, train.pixels, c.model.patch);
  std::set<std::string> trainable;
  for (const auto& [name, t] : c.params) {
    if (!cfg.freeze_encoder || name.starts_with("cls.")) trainable.insert(name);
  }
  AdamState<float> adam;
  adam.hyper.lr = cfg.lr;
  Rng order_rng = make_stream(cfg.seed, "shuffle");
  std::vector<std::size_t> order(train.pixels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochMetrics> hist;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    shuffle(order.begin(), order.end(), order_rng);
    EpochMetrics em;
    em.epoch = e + 1;
    std::size_t correct = 0;
    for (const auto& [b0, b1] : batch_ranges(order.size(), cfg.batch)) {
      const std::vector<std::size_t> idx(order.begin() + long(b0), order.begin() + long(b1));
      const Tensor<float> h = take_rows(all.hsi, idx), l = take_rows(all.lidar, idx);
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(train.classes[i]);
      Tape<float> tape;
      VarMap<float> vars = bind_params(tape, c.params, true, &trainable);
      ForwardContext<float> ctx;
      ctx.running = &c.buffers;
      if (cfg.freeze_encoder) ctx.mode = BnMode::Eval;
      Var<float> logits = logits_forward(tape.constant(h), tape.constant(l), vars, c.model, ctx);
      Var<float> loss = cross_entropy_from_logits(logits, y);
      em.loss += double(loss.value()[0]) * double(idx.size());
      const std::size_t k = c.model.classes;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* row = logits.value().ptr() + i * k;
        if (std::size_t(std::max_element(row, row + k) - row) == y[i]) ++correct;
      }
      tape.backward(loss);
      adam_step(c.params, grads_of(tape, vars), adam);
    }
    em.loss /= double(order.size());
    em.accuracy = double(correct) / double(order.size());
    hist.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return hist;
}

/// Worker count: NNC_THREADS if set (>= 1), else the hardware concurrency.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NNC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw std::invalid_argument("NNC_THREADS must be a positive integer");
    n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Eval-mode logits for each pixel: (pixels, classes). Rows are independent,
/// so the result does not depend on `batch` or the worker count.
inline Tensor<float> predict_logits(const Classifier& c, const ModelInputs& in, const std::vector<Pixel>& pixels,
                                    std::size_t batch = 256, std::size_t workers = 0) {
  if (batch == 0) throw std::invalid_argument("predict: batch must be positive");
  const std::size_t k = c.model.classes, n = pixels.size();
  Tensor<float> out({n, k});
  if (n == 0) return out;
  if (workers == 0) workers = worker_count();
  const std::size_t nbatches = (n + batch - 1) / batch;
  workers = std::min(workers, nbatches);
  auto run = [&](std::size_t w) {
    for (std::size_t b = w; b < nbatches; b += workers) {
      const std::size_t b0 = b * batch, b1 = std::min(n, b0 + batch);
      const std::vector<Pixel> sub(pixels.begin() + long(b0), pixels.begin() + long(b1));
      const PatchBatch p = patches_at(in, sub, c.model.patch);
      Tape<float> tape;
      VarMap<float> vars = bind_params(tape, c.params, false);
      ForwardContext<float> ctx;
      ctx.mode = BnMode::Eval;
      ctx.running = const_cast<BufferMap<float>*>(&c.buffers);
      const Tensor<float> z = logits_forward(tape.constant(p.hsi), tape.constant(p.lidar), vars, c.model, ctx).value();
      std::copy_n(z.ptr(), z.size(), out.ptr() + b0 * k);
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

/// 1-based argmax per row; ties go to the smallest class index.
inline std::vector<std::uint16_t> argmax_labels(const Tensor<float>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::uint16_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = static_cast<std::uint16_t>(best + 1);
  }
  return out;
}

/// Predicted label for every pixel of the scene, row-major.
inline LabelMap predict_map(const Classifier& c, const ModelInputs& in, std::size_t batch = 256,
                            std::size_t workers = 0) {
  std::vector<Pixel> all;
  all.reserve(in.height() * in.width());
  for (std::size_t r = 0; r < in.height(); ++r)
    for (std::size_t col = 0; col < in.width(); ++col) all.push_back({r, col});
  LabelMap m;
  m.height = in.height();
  m.width = in.width();
  m.num_classes = c.model.classes;
  m.labels = argmax_labels(predict_logits(c, in, all, batch, workers));
  return m;
}

/// Scores the classifier on the masked labeled pixels only.
inline Scores evaluate_on(const Classifier& c, const ModelInputs& in, const LabelMap& truth,
                          const std::vector<std::uint8_t>& mask, std::size_t batch = 256, std::size_t workers = 0) {
  const LabeledPixels px = labeled_pixels(truth, mask);
  if (px.pixels.empty()) throw std::invalid_argument("evaluate: the mask selects no labeled pixels");
  const auto labels = argmax_labels(predict_logits(c, in, px.pixels, batch, workers));
  ConfusionMatrix m(c.model.classes);
  for (std::size_t i = 0; i < labels.size(); ++i) ++m.at(px.classes[i], labels[i] - 1u);
  return scores_from(m);
}

}  // namespace nnc
