#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnc/checkpoint.hpp"
#include "nnc/contrastive.hpp"
#include "nnc/inputs.hpp"

namespace nnc {

struct PretrainConfig {
  double tau = 0.07;
  double momentum = 0.9;
  std::size_t batch = 64;
  double lr = 5e-4;
  std::size_t steps = 0;
  std::size_t groups = 4;  // virtual BN sub-batches
  std::size_t min_distance = 12;
  std::size_t queue = 1024;
  std::uint64_t seed = 0;
  bool neighbor = true;
  bool negatives_only = false;
  double min_overlap = 0.8;
  AugmentConfig augment;
  std::size_t checkpoint_every = 0;

  void validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("pretrain config: " + m); };
    if (!(tau > 0.0)) bad("tau must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) bad("momentum must lie in (0, 1)");
    if (batch < 2) bad("batch must be at least 2");
    if (groups == 0 || batch % groups != 0) bad("groups must divide batch");
    if (queue < batch) bad("queue capacity must be at least one batch");
    if (!(lr > 0.0)) bad("lr must be positive");
  }

  nlohmann::json to_json() const {
    return {{"tau", tau},
            {"momentum", momentum},
            {"batch", batch},
            {"lr", lr},
            {"steps", steps},
            {"groups", groups},
            {"min_distance", min_distance},
            {"queue", queue},
            {"seed", seed},
            {"neighbor", neighbor},
            {"negatives_only", negatives_only},
            {"min_overlap", min_overlap},
            {"augment",
             {{"crop", augment.crop},
              {"hflip", augment.hflip},
              {"vflip", augment.vflip},
              {"noise", augment.noise},
              {"scale_min", augment.scale_min},
              {"scale_max", augment.scale_max},
              {"noise_sigma", augment.noise_sigma}}},
            {"checkpoint_every", checkpoint_every}};
  }
};

struct PretrainState {
  ModelConfig model;
  ParamMap<float> query;
  ParamMap<float> key;
  BufferMap<float> query_buffers;
  BufferMap<float> key_buffers;
  AdamState<float> adam;
  KeyQueue queue;
  Rng data, augment, shuffle;
  std::uint64_t step = 0;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0;
  double pos_logit_mean = 0;
  double lr = 0;
  std::size_t queue_fill = 0;
};

/// Thrown when the loss stops being finite; carries a diagnostic record.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, nlohmann::json diag) : std::runtime_error(what), diagnostic(std::move(diag)) {}
  nlohmann::json diagnostic;
};

inline PretrainState init_pretrain(const ModelConfig& model, const PretrainConfig& cfg) {
  model.validate();
  cfg.validate();
  if (model.embed == 0) throw std::invalid_argument("pretraining needs a projection head (embed > 0)");
  PretrainState s;
  s.model = model;
  s.model.classes = 0;
  Rng init = make_stream(cfg.seed, "init");
  s.query = init_params<float>(model_param_specs(s.model), init);
  s.key = s.query;
  s.query_buffers = init_buffers<float>(s.model);
  s.key_buffers = s.query_buffers;
  s.adam.hyper.lr = cfg.lr;
  s.queue = KeyQueue(cfg.queue, s.model.embed);
  s.data = make_stream(cfg.seed, "data");
  s.augment = make_stream(cfg.seed, "augment");
  s.shuffle = make_stream(cfg.seed, "shuffle");
  return s;
}

/// Query views, key views (half replaced by neighbor views when enabled).
struct ViewBatch {
  PatchBatch query;
  PatchBatch key;
  std::vector<bool> substituted;
};

inline ViewBatch draw_views(const ModelInputs& in, const PretrainConfig& cfg, std::size_t patch, Rng& data, Rng& aug) {
  PretrainSampling sc;
  sc.batch = cfg.batch;
  sc.min_distance = cfg.min_distance;
  sc.patch = patch;
  sc.min_overlap = cfg.min_overlap;
  const auto samples = sample_pretrain_batch(in.height(), in.width(), sc, data);
  std::vector<PatchPair> q, k, nb;
  for (const auto& s : samples) {
    const PatchPair anchor = extract_patch(in.hsi, in.lidar, s.anchor, patch);
    q.push_back(augment(anchor, aug, cfg.augment));
    k.push_back(augment(anchor, aug, cfg.augment));
    if (cfg.neighbor) nb.push_back(augment(extract_patch(in.hsi, in.lidar, s.neighbor, patch), aug, cfg.augment));
  }
  ViewBatch v;
  if (cfg.neighbor) v.substituted = substitute_half_keys(k, nb, aug);
  else v.substituted.assign(k.size(), false);
  v.query = stack_patches(q);
  v.key = stack_patches(k);
  return v;
}

inline Tensor<float> key_embed(PretrainState& s, const PatchBatch& b, const PretrainConfig& cfg) {
  const auto perm = random_permutation(b.hsi.dim(0), s.shuffle);
  return shuffled_bn_embed(b.hsi, b.lidar, s.key, &s.key_buffers, s.model, cfg.groups, perm);
}

namespace detail {

inline nlohmann::json tensor_summary(const Tensor<float>& t) {
  double sq = 0, mx = 0;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      ++bad;
      continue;
    }
    sq += double(t[i]) * t[i];
    mx = std::max(mx, std::abs(double(t[i])));
  }
  return {{"norm", std::sqrt(sq)}, {"max_abs", mx}, {"non_finite", bad}};
}

}  // namespace detail

/// One loss-bearing step. Before the first one, the queue is filled with
/// key-only batches (no loss, no update) until another batch would not fit.
inline StepMetrics pretrain_step(PretrainState& s, const ModelInputs& in, const PretrainConfig& cfg) {
  if (s.queue.empty()) {
    while (s.queue.fits(cfg.batch)) {
      const ViewBatch warm = draw_views(in, cfg, s.model.patch, s.data, s.augment);
      s.queue.enqueue(key_embed(s, warm.key, cfg));
    }
  }
  const ViewBatch v = draw_views(in, cfg, s.model.patch, s.data, s.augment);
  const Tensor<float> k = key_embed(s, v.key, cfg);
  const Tensor<float> negatives = s.queue.snapshot();

  Tape<float> tape;
  VarMap<float> vars = bind_params(tape, s.query, true);
  ForwardContext<float> ctx;
  ctx.groups = cfg.groups;
  ctx.running = &s.query_buffers;
  Var<float> q = embed_forward(tape.constant(v.query.hsi), tape.constant(v.query.lidar), vars, s.model, ctx);
  Var<float> logits = contrastive_logits(q, k, &negatives);
  Var<float> loss = info_nce_loss(logits, cfg.tau, cfg.negatives_only);

  StepMetrics m;
  m.step = s.step + 1;
  m.loss = loss.value()[0];
  const std::size_t n = logits.shape()[0], cols = logits.shape()[1];
  for (std::size_t i = 0; i < n; ++i) m.pos_logit_mean += logits.value()[i * cols];
  m.pos_logit_mean /= static_cast<double>(n);
  m.lr = cfg.lr;

  if (!std::isfinite(m.loss)) {
    nlohmann::json d;
    d["step"] = m.step;
    d["loss"] = std::to_string(m.loss);
    d["embedding"] = detail::tensor_summary(q.value());
    d["keys"] = detail::tensor_summary(k);
    d["logits"] = detail::tensor_summary(logits.value());
    for (const auto& [name, t] : s.query) d["params"][name] = detail::tensor_summary(t);
    throw NonFiniteLoss("non-finite contrastive loss at step " + std::to_string(m.step), std::move(d));
  }

  tape.backward(loss);
  adam_step(s.query, grads_of(tape, vars), s.adam);
  momentum_update(s.key, s.query, cfg.momentum);
  s.queue.enqueue(k);
  ++s.step;
  m.queue_fill = s.queue.size();
  return m;
}

inline Checkpoint to_checkpoint(const PretrainState& s, const PretrainConfig& cfg) {
  Checkpoint ck;
  ck.kind = "pretrain";
  ck.model = s.model;
  ck.step = s.step;
  ck.rng = {{"data", save_rng(s.data)}, {"augment", save_rng(s.augment)}, {"shuffle", save_rng(s.shuffle)}};
  ck.extra = {{"pretrain", cfg.to_json()}};
  ck.params = s.query;
  ck.buffers = s.query_buffers;
  ck.key_params = s.key;
  ck.key_buffers = s.key_buffers;
  ck.adam = s.adam;
  ck.queue = s.queue;
  return ck;
}

inline PretrainState from_checkpoint(const Checkpoint& ck, const PretrainConfig& cfg) {
  if (ck.kind != "pretrain" || !ck.key_params || !ck.key_buffers || !ck.adam || !ck.queue) {
    throw CheckpointError("checkpoint of kind '" + ck.kind + "' cannot resume pretraining");
  }
  if (ck.queue->capacity() != cfg.queue) throw CheckpointError("resumed queue capacity differs from the config");
  PretrainState s;
  s.model = ck.model;
  s.query = ck.params;
  s.key = *ck.key_params;
  s.query_buffers = ck.buffers;
  s.key_buffers = *ck.key_buffers;
  s.adam = *ck.adam;
  s.adam.hyper.lr = cfg.lr;
  s.queue = *ck.queue;
  s.data = load_rng(ck.rng.at("data"));
  s.augment = load_rng(ck.rng.at("augment"));
  s.shuffle = load_rng(ck.rng.at("shuffle"));
  s.step = ck.step;
  return s;
}

inline std::string metrics_row(const StepMetrics& m) {
  std::ostringstream o;
  o << m.step << ',' << std::setprecision(9) << m.loss << ',' << m.pos_logit_mean << ',' << m.lr << ','
    << m.queue_fill << '\n';
  return o.str();
}

/// Runs steps until `cfg.steps` have been taken, appending to
/// out/metrics.csv, writing out/checkpoint at the end and
/// out/checkpoint_step<k> every `checkpoint_every` steps.
inline std::vector<StepMetrics> pretrain_loop(PretrainState& s, const ModelInputs& in, const PretrainConfig& cfg,
                                              const std::filesystem::path& out,
                                              const std::function<void(const StepMetrics&)>& on_step = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out);
  const fs::path csv = out / "metrics.csv";
  const bool fresh = s.step == 0 || !fs::exists(csv);
  std::ofstream log(csv, fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + csv.string());
  if (fresh) log << "step,loss,pos_logit_mean,lr,queue_fill\n";
  std::vector<StepMetrics> hist;
  while (s.step < cfg.steps) {
    StepMetrics m;
    try {
      m = pretrain_step(s, in, cfg);
    } catch (const NonFiniteLoss& e) {
      std::ofstream(out / "diagnostic.json") << e.diagnostic.dump(2) << "\n";
      throw;
    }
    log << metrics_row(m);
    log.flush();
    hist.push_back(m);
    if (on_step) on_step(m);
    if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 && s.step < cfg.steps) {
      save_checkpoint(out / ("checkpoint_step" + std::to_string(s.step)), to_checkpoint(s, cfg));
    }
  }
  save_checkpoint(out / "checkpoint", to_checkpoint(s, cfg));
  return hist;
}

}  // namespace nnc
