// nnc: synth | pretrain | finetune | eval | map | gradcheck

#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nnc/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string dataset;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool needs_dataset) {
  app->add_option("-c,--config", c.config, "TOML config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "Override a config key (key=value), repeatable");
  if (needs_dataset) app->add_option("-d,--dataset", c.dataset, "Dataset manifest (dataset.json)");
  app->add_flag("-q,--quiet", c.quiet, "Only write the run directory");
}

nlohmann::json resolve(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> sets = c.sets;
  if (!c.dataset.empty()) sets.push_back("dataset=\"" + c.dataset + "\"");
  sets.insert(sets.end(), extra.begin(), extra.end());
  return nnc::resolve_config(c.config, sets);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neighbor momentum-contrast pretraining and bilinear-attention HSI+LiDAR classification"};
  app.require_subcommand(1);

  Common synth_c, pre_c, fin_c, eval_c, map_c;
  std::string out, model_dir, init, mask = "test";
  std::optional<std::size_t> steps;
  std::optional<std::string> resume;
  bool corrupt = false;

  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic scene");
  add_common(synth, synth_c, false);
  synth->add_option("-o,--out", out, "Dataset directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining");
  add_common(pre, pre_c, true);
  pre->add_option("-o,--out", out, "Run directory")->required();
  pre->add_option("--steps", steps, "Total step count (overrides pretrain.steps)");
  pre->add_option("--resume", resume, "Checkpoint directory to continue from");

  auto* fin = app.add_subcommand("finetune", "Supervised fine-tuning on the train mask");
  add_common(fin, fin_c, true);
  fin->add_option("-o,--out", out, "Run directory")->required();
  fin->add_option("--init", init, "none, or a pretraining checkpoint directory (overrides finetune.init)");

  auto* ev = app.add_subcommand("eval", "OA / AA / Kappa of a classifier checkpoint");
  add_common(ev, eval_c, true);
  ev->add_option("-m,--model", model_dir, "Classifier checkpoint directory")->required();
  ev->add_option("--mask", mask, "test, train, or all");
  ev->add_option("-o,--out", out, "Optional run directory for metrics.json and confusion.csv");

  auto* map = app.add_subcommand("map", "Full-scene prediction map (NPY + PPM)");
  add_common(map, map_c, true);
  map->add_option("-m,--model", model_dir, "Classifier checkpoint directory")->required();
  map->add_option("-o,--out", out, "Run directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite on the reduced model");
  gc->add_option("-o,--out", out, "Optional directory for gradcheck.json");
  gc->add_flag("--corrupt-backward", corrupt, "Negative test: perturb every backward seed; the suite must fail");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      nnc::cmd_synth(resolve(synth_c), out, synth_c.quiet);
    } else if (*pre) {
      std::vector<std::string> extra;
      if (steps) extra.push_back("pretrain.steps=" + std::to_string(*steps));
      std::optional<nnc::fs::path> r;
      if (resume) r = *resume;
      nnc::cmd_pretrain(resolve(pre_c, extra), out, r, pre_c.quiet);
    } else if (*fin) {
      std::vector<std::string> extra;
      if (!init.empty()) extra.push_back("finetune.init=\"" + init + "\"");
      nnc::cmd_finetune(resolve(fin_c, extra), out, fin_c.quiet);
    } else if (*ev) {
      std::optional<nnc::fs::path> o;
      if (!out.empty()) o = out;
      nnc::cmd_eval(resolve(eval_c), model_dir, mask, o, eval_c.quiet);
    } else if (*map) {
      nnc::cmd_map(resolve(map_c), model_dir, out, map_c.quiet);
    } else if (*gc) {
      std::optional<nnc::fs::path> o;
      if (!out.empty()) o = out;
      return nnc::cmd_gradcheck(o, corrupt) == 0 ? 0 : 1;
    }
  } catch (const nnc::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
