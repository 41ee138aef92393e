#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "nnc/classifier.hpp"
#include "nnc/config.hpp"
#include "nnc/gradcheck_suite.hpp"
#include "nnc/pretrain.hpp"
#include "nnc/render.hpp"
#include "nnc/synth.hpp"

namespace nnc {

namespace fs = std::filesystem;

/// Lines go to the console (unless quiet) and to <run dir>/log.txt.
class RunLog {
 public:
  RunLog(const fs::path& dir, bool quiet) : quiet_(quiet) {
    fs::create_directories(dir);
    file_.open(dir / "log.txt", std::ios::app);
  }
  void line(const std::string& s) {
    if (!quiet_) std::cout << s << "\n" << std::flush;
    file_ << s << "\n";
    file_.flush();
  }

 private:
  bool quiet_;
  std::ofstream file_;
};

inline std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

inline fs::path dataset_path(const nlohmann::json& cfg) {
  const std::string d = cfg.at("dataset");
  if (d.empty()) throw ConfigError("no dataset: pass --dataset or set dataset in the config");
  return d;
}

// ---------------------------------------------------------------------------

inline fs::path cmd_synth(const nlohmann::json& cfg, const fs::path& out, bool quiet = false) {
  write_resolved_config(out, cfg);
  RunLog log(out, quiet);
  const SynthSpec spec = synth_spec(cfg);
  const fs::path manifest = write_synth(out, spec);
  log.line(fmt("synth: %zux%zu, %zu bands, %zu classes, %zu labels/class -> %s", spec.height, spec.width, spec.bands,
               spec.classes, spec.labels_per_class, manifest.string().c_str()));
  return manifest;
}

struct PretrainSummary {
  std::vector<StepMetrics> steps;
  fs::path checkpoint;
  double first_mean = 0, last_mean = 0;  // over the first and last min(50, steps) steps
};

inline PretrainSummary cmd_pretrain(nlohmann::json cfg, const fs::path& out, const std::optional<fs::path>& resume,
                                    bool quiet = false) {
  const ModelConfig model = model_config(cfg);
  const PretrainConfig pc = pretrain_config(cfg);
  cfg["run"] = {{"command", "pretrain"}, {"architecture_hash", std::to_string(architecture_hash(model))}};
  if (resume) cfg["run"]["resume"] = resume->string();
  write_resolved_config(out, cfg);
  RunLog log(out, quiet);
  const Scene scene = load_scene(dataset_path(cfg));
  const ModelInputs in = prepare_inputs(scene, model.bands);

  PretrainState s;
  if (resume) {
    const Checkpoint ck = load_checkpoint(*resume);
    ModelConfig want = model;
    want.classes = 0;
    if (architecture_hash(ck.model) != architecture_hash(want)) {
      throw CheckpointError("resume checkpoint architecture differs from the configured model");
    }
    s = from_checkpoint(ck, pc);
    log.line(fmt("pretrain: resuming from %s at step %llu", resume->string().c_str(), (unsigned long long)s.step));
  } else {
    s = init_pretrain(model, pc);
  }
  log.line(fmt("pretrain: %zu steps, batch %zu, groups %zu, queue %zu, tau %g, r %g, neighbor %s, loss %s", pc.steps,
               pc.batch, pc.groups, pc.queue, pc.tau, pc.momentum, pc.neighbor ? "on" : "off",
               pc.negatives_only ? "negatives-only" : "infonce"));
  PretrainSummary sum;
  const std::size_t every = std::max<std::size_t>(1, pc.steps / 20);
  sum.steps = pretrain_loop(s, in, pc, out, [&](const StepMetrics& m) {
    if (m.step % every == 0 || m.step == pc.steps) {
      log.line(fmt("step %5llu  loss %.5f  pos %.4f  queue %zu", (unsigned long long)m.step, m.loss, m.pos_logit_mean,
                   m.queue_fill));
    }
  });
  sum.checkpoint = out / "checkpoint";
  const std::size_t n = sum.steps.size(), w = std::min<std::size_t>(50, n);
  for (std::size_t i = 0; i < w; ++i) {
    sum.first_mean += sum.steps[i].loss / double(w);
    sum.last_mean += sum.steps[n - w + i].loss / double(w);
  }
  write_json(out / "summary.json", {{"steps_run", n},
                                    {"final_step", s.step},
                                    {"first_window_mean_loss", sum.first_mean},
                                    {"last_window_mean_loss", sum.last_mean},
                                    {"window", w}});
  if (n > 0) log.line(fmt("pretrain: mean loss first %zu %.5f, last %zu %.5f", w, sum.first_mean, w, sum.last_mean));
  return sum;
}

struct FinetuneSummary {
  Classifier model;
  std::vector<EpochMetrics> epochs;
  std::optional<Scores> test;
};

/// `init` is "none" or a checkpoint directory; no_pretrain forces "none".
inline FinetuneSummary cmd_finetune(nlohmann::json cfg, const fs::path& out, bool quiet = false) {
  const ModelConfig arch = model_config(cfg);
  const FinetuneConfig fc = finetune_config(cfg);
  std::string init = cfg.at("finetune").at("init");
  if (cfg.at("ablation").at("no_pretrain").get<bool>()) init = "none";
  const Scene scene = load_scene(dataset_path(cfg));
  if (scene.train_mask.empty()) throw SceneError("finetune: the dataset manifest names no train_mask");

  std::optional<Checkpoint> ck;
  if (init != "none") ck = load_checkpoint(init);
  FinetuneSummary sum;
  sum.model = make_classifier(arch, scene.labels.num_classes, fc.seed, ck ? &*ck : nullptr);
  cfg["run"] = {{"command", "finetune"},
                {"init", init},
                {"architecture_hash", std::to_string(architecture_hash(sum.model.model))}};
  if (ck) cfg["run"]["init_architecture_hash"] = std::to_string(architecture_hash(ck->model));
  write_resolved_config(out, cfg);
  RunLog log(out, quiet);
  const ModelInputs in = prepare_inputs(scene, arch.bands);
  const LabeledPixels train = labeled_pixels(scene.labels, scene.train_mask);
  log.line(fmt("finetune: %zu training pixels, %zu classes, %zu epochs, init %s%s", train.pixels.size(),
               scene.labels.num_classes, fc.epochs, init.c_str(), fc.freeze_encoder ? ", encoder frozen" : ""));

  std::ofstream csv(out / "finetune_metrics.csv", std::ios::trunc);
  csv << "epoch,loss,accuracy\n";
  const std::size_t every = std::max<std::size_t>(1, fc.epochs / 10);
  sum.epochs = finetune(sum.model, in, train, fc, [&](const EpochMetrics& e) {
    csv << e.epoch << ',' << std::setprecision(9) << e.loss << ',' << e.accuracy << '\n';
    if (e.epoch % every == 0 || e.epoch == fc.epochs) {
      log.line(fmt("epoch %4zu  loss %.5f  train acc %.4f", e.epoch, e.loss, e.accuracy));
    }
  });
  save_checkpoint(out / "checkpoint", to_checkpoint(sum.model, {{"init", init}, {"finetune", fc.to_json()}}));
  if (!scene.test_mask.empty()) {
    const std::size_t batch = cfg.at("eval").at("batch");
    sum.test = evaluate_on(sum.model, in, scene.labels, scene.test_mask, batch);
    write_json(out / "metrics.json", sum.test->to_json());
    std::ofstream(out / "confusion.csv") << sum.test->confusion.to_csv();
    log.line(fmt("test: OA %.4f  AA %.4f  Kappa %.4f", sum.test->oa, sum.test->aa, sum.test->kappa));
  }
  return sum;
}

inline const std::vector<std::uint8_t>& pick_mask(const Scene& scene, const std::string& which,
                                                  std::vector<std::uint8_t>& all) {
  if (which == "all") {
    all.assign(scene.labels.labels.size(), 1);
    return all;
  }
  if (which != "train" && which != "test") throw ConfigError("mask must be test, train, or all (got '" + which + "')");
  const auto& m = which == "train" ? scene.train_mask : scene.test_mask;
  if (m.empty()) throw SceneError("the dataset manifest names no " + which + "_mask");
  return m;
}

inline Scores cmd_eval(const nlohmann::json& cfg, const fs::path& model_dir, const std::string& mask,
                       const std::optional<fs::path>& out, bool quiet = false) {
  const Classifier c = classifier_from(load_checkpoint(model_dir));
  const Scene scene = load_scene(dataset_path(cfg));
  if (scene.labels.num_classes != c.model.classes) {
    throw SceneError("dataset has " + std::to_string(scene.labels.num_classes) + " classes, model predicts " +
                     std::to_string(c.model.classes));
  }
  const ModelInputs in = prepare_inputs(scene, c.model.bands);
  std::vector<std::uint8_t> all;
  const Scores s = evaluate_on(c, in, scene.labels, pick_mask(scene, mask, all), cfg.at("eval").at("batch"));
  const std::string line = fmt("OA %.4f  AA %.4f  Kappa %.4f", s.oa, s.aa, s.kappa);
  if (out) {
    nlohmann::json r = cfg;
    r["run"] = {{"command", "eval"}, {"model", model_dir.string()}, {"mask", mask}};
    write_resolved_config(*out, r);
    write_json(*out / "metrics.json", s.to_json());
    std::ofstream(*out / "confusion.csv") << s.confusion.to_csv();
    RunLog(*out, quiet).line(line);
  } else if (!quiet) {
    std::cout << line << "\n";
  }
  return s;
}

inline LabelMap cmd_map(nlohmann::json cfg, const fs::path& model_dir, const fs::path& out, bool quiet = false) {
  cfg["run"] = {{"command", "map"}, {"model", model_dir.string()}};
  write_resolved_config(out, cfg);
  RunLog log(out, quiet);
  const Classifier c = classifier_from(load_checkpoint(model_dir));
  const Scene scene = load_scene(dataset_path(cfg));
  const ModelInputs in = prepare_inputs(scene, c.model.bands);
  const LabelMap m = predict_map(c, in, cfg.at("eval").at("batch"));
  write_npy<std::uint16_t>(out / "prediction.npy", Shape{m.height, m.width}, m.labels);
  write_ppm(out / "prediction.ppm", m);
  write_ppm(out / "truth.ppm", scene.labels);
  log.line(fmt("map: %zux%zu written to %s", m.height, m.width, (out / "prediction.ppm").string().c_str()));
  return m;
}

/// Runs the whole finite-difference suite; returns the number of failures.
inline std::size_t cmd_gradcheck(const std::optional<fs::path>& out, bool corrupt, bool quiet = false) {
  const double saved = backward_fault();
  if (corrupt) backward_fault() = 0.01;
  std::vector<SuiteEntry> entries;
  try {
    entries = run_gradcheck_suite({}, [&](const SuiteEntry& e) {
      if (quiet) return;
      std::cout << fmt("%-4s %-48s max rel %.2e  coords %zu", e.passed ? "ok" : "FAIL", e.name.c_str(),
                       e.max_rel_error, e.coords);
      if (e.kinks_skipped) std::cout << fmt("  (%zu at ReLU kinks skipped)", e.kinks_skipped);
      if (!e.passed) std::cout << "  " << e.detail;
      std::cout << "\n" << std::flush;
    });
  } catch (...) {
    backward_fault() = saved;
    throw;
  }
  backward_fault() = saved;
  std::size_t failed = 0;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) {
    failed += e.passed ? 0 : 1;
    j.push_back({{"name", e.name},
                 {"max_rel_error", e.max_rel_error},
                 {"coords", e.coords},
                 {"kinks_skipped", e.kinks_skipped},
                 {"passed", e.passed},
                 {"seconds", e.seconds}});
  }
  if (out) {
    fs::create_directories(*out);
    write_json(*out / "gradcheck.json", {{"corrupted", corrupt}, {"failed", failed}, {"checks", j}});
  }
  if (!quiet) std::cout << fmt("%zu of %zu checks passed", entries.size() - failed, entries.size()) << "\n";
  return failed;
}

}  // namespace nnc
