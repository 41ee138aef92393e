#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <tomlplusplus/toml.hpp>

#include "nnc/classifier.hpp"
#include "nnc/pretrain.hpp"
#include "nnc/synth.hpp"

namespace nnc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every knob with its default. Model entries left null come from the preset.
inline nlohmann::json default_run_config() {
  using nlohmann::json;
  const PretrainConfig p;
  const FinetuneConfig f;
  const SynthSpec s;
  json model{{"preset", "paper"}};
  for (const char* k : {"bands", "patch", "hsi3d", "lidar", "dim", "heads", "embed", "bn"}) model[k] = nullptr;
  json pre = p.to_json();
  pre.erase("seed");
  pre.erase("neighbor");
  pre.erase("negatives_only");
  json fin = f.to_json();
  fin.erase("seed");
  fin["init"] = "none";
  json syn = s.to_json();
  syn.erase("seed");
  return {{"seed", 7},
          {"dataset", ""},
          {"model", model},
          {"ablation",
           {{"no_pretrain", false},
            {"no_bilinear", false},
            {"no_gate", false},
            {"no_neighbor", false},
            {"no_3dconv", false},
            {"eq1_literal_loss", false},
            {"softmax_axis", "tokens"}}},
          {"pretrain", pre},
          {"finetune", fin},
          {"eval", {{"batch", 256}}},
          {"synth", syn}};
}

namespace detail {

inline nlohmann::json toml_value(const toml::node& n, const std::string& where) {
  if (const auto* t = n.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_value(v, where + "." + std::string(k.str()));
    return j;
  }
  if (const auto* a = n.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_value(v, where + "[]"));
    return j;
  }
  if (auto v = n.value_exact<std::string>()) return *v;
  if (auto v = n.value_exact<bool>()) return *v;
  if (auto v = n.value_exact<std::int64_t>()) return *v;
  if (auto v = n.value_exact<double>()) return *v;
  throw ConfigError("config: unsupported TOML value at '" + where + "' (dates and times are not used)");
}

inline const char* kind_of(const nlohmann::json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "table";
  return "null";
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& over, const std::string& path) {
  for (const auto& [k, v] : over.items()) {
    const std::string key = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) throw ConfigError("config: unknown key '" + key + "'");
    nlohmann::json& slot = base[k];
    if (slot.is_object()) {
      if (!v.is_object()) throw ConfigError("config: '" + key + "' must be a table");
      merge_into(slot, v, key);
      continue;
    }
    const bool ok = slot.is_null() || (slot.is_boolean() && v.is_boolean()) || (slot.is_string() && v.is_string()) ||
                    (slot.is_array() && v.is_array()) ||
                    (slot.is_number_float() && v.is_number()) ||
                    (slot.is_number_integer() && v.is_number_integer() && (!slot.is_number_unsigned() || v >= 0));
    if (!ok) {
      throw ConfigError("config: '" + key + "' expects " + kind_of(slot) + ", got " + kind_of(v) + " (" + v.dump() + ")");
    }
    slot = v;
  }
}

}  // namespace detail

inline nlohmann::json parse_toml(const std::string& text, const std::string& source = "<string>") {
  try {
    return detail::toml_value(toml::parse(text, source), "");
  } catch (const toml::parse_error& e) {
    std::ostringstream o;
    o << "config: " << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
      << e.description();
    throw ConfigError(o.str());
  }
}

inline nlohmann::json parse_toml_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("config: cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_toml(ss.str(), p.string());
}

/// Overlays `over` onto `base`; unknown keys and type changes are errors.
inline void merge_config(nlohmann::json& base, const nlohmann::json& over) { detail::merge_into(base, over, ""); }

/// `dotted.key=value`, where value is any TOML value; a bare word that does
/// not parse as TOML is taken as a string.
inline void apply_set(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = parse_toml("v = " + raw).at("v");
  } catch (const ConfigError&) {
    value = raw;
  }
  nlohmann::json over = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("--set: empty key segment in '" + key + "'");
    over = nlohmann::json{{*it, over}};
  }
  merge_config(cfg, over);
}

inline ModelConfig model_preset(const std::string& name) {
  if (name == "paper") return paper_config();
  if (name == "desk") return desk_config();
  if (name == "reduced") return reduced_config();
  throw ConfigError("config: model.preset must be paper, desk, or reduced (got '" + name + "')");
}

/// Network for pretraining (no class head); ablation flags applied.
inline ModelConfig model_config(const nlohmann::json& cfg) {
  const auto& m = cfg.at("model");
  const auto& a = cfg.at("ablation");
  ModelConfig c = model_preset(m.at("preset").get<std::string>());
  try {
    if (!m.at("bands").is_null()) c.bands = m.at("bands").get<std::size_t>();
    if (!m.at("patch").is_null()) c.patch = m.at("patch").get<std::size_t>();
    if (!m.at("hsi3d").is_null()) {
      c.hsi3d.clear();
      for (const auto& l : m.at("hsi3d")) c.hsi3d.push_back({l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>()});
    }
    if (!m.at("lidar").is_null()) c.lidar = m.at("lidar").get<std::vector<std::size_t>>();
    if (!m.at("dim").is_null()) c.dim = m.at("dim").get<std::size_t>();
    if (!m.at("heads").is_null()) c.heads = m.at("heads").get<std::size_t>();
    if (!m.at("embed").is_null()) c.embed = m.at("embed").get<std::size_t>();
    if (!m.at("bn").is_null()) c.bn = m.at("bn").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: malformed model override: ") + e.what());
  }
  c.bilinear = !a.at("no_bilinear").get<bool>();
  c.gate = !a.at("no_gate").get<bool>();
  c.conv3d = !a.at("no_3dconv").get<bool>();
  const std::string axis = a.at("softmax_axis");
  if (axis != "tokens" && axis != "features") throw ConfigError("config: ablation.softmax_axis must be tokens or features");
  c.softmax_axis = axis == "tokens" ? SoftmaxAxis::Tokens : SoftmaxAxis::Features;
  c.classes = 0;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline PretrainConfig pretrain_config(const nlohmann::json& cfg) {
  const auto& p = cfg.at("pretrain");
  const auto& aug = p.at("augment");
  PretrainConfig c;
  c.tau = p.at("tau");
  c.momentum = p.at("momentum");
  c.batch = p.at("batch");
  c.lr = p.at("lr");
  c.steps = p.at("steps");
  c.groups = p.at("groups");
  c.min_distance = p.at("min_distance");
  c.queue = p.at("queue");
  c.min_overlap = p.at("min_overlap");
  c.checkpoint_every = p.at("checkpoint_every");
  c.augment.crop = aug.at("crop");
  c.augment.hflip = aug.at("hflip");
  c.augment.vflip = aug.at("vflip");
  c.augment.noise = aug.at("noise");
  c.augment.scale_min = aug.at("scale_min");
  c.augment.scale_max = aug.at("scale_max");
  c.augment.noise_sigma = aug.at("noise_sigma");
  c.seed = cfg.at("seed");
  c.neighbor = !cfg.at("ablation").at("no_neighbor").get<bool>();
  c.negatives_only = cfg.at("ablation").at("eq1_literal_loss");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline FinetuneConfig finetune_config(const nlohmann::json& cfg) {
  const auto& f = cfg.at("finetune");
  FinetuneConfig c;
  c.epochs = f.at("epochs");
  c.batch = f.at("batch");
  c.lr = f.at("lr");
  c.freeze_encoder = f.at("freeze_encoder");
  c.seed = cfg.at("seed");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline SynthSpec synth_spec(const nlohmann::json& cfg) {
  const auto& s = cfg.at("synth");
  SynthSpec c;
  c.height = s.at("height");
  c.width = s.at("width");
  c.bands = s.at("bands");
  c.classes = s.at("classes");
  c.labels_per_class = s.at("labels_per_class");
  c.blob_sigma = s.at("blob_sigma");
  c.signature_amplitude = s.at("signature_amplitude");
  c.noise_sigma = s.at("noise_sigma");
  c.elevation_step = s.at("elevation_step");
  c.elevation_noise = s.at("elevation_noise");
  c.terrain_amplitude = s.at("terrain_amplitude");
  c.min_margin_sigmas = s.at("min_margin_sigmas");
  c.seed = cfg.at("seed");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

/// Defaults, then the TOML file (if any), then each --set in order. Model
/// entries left null are filled from the preset so the result is explicit.
inline nlohmann::json resolve_config(const std::filesystem::path& file, const std::vector<std::string>& sets) {
  nlohmann::json cfg = default_run_config();
  if (!file.empty()) merge_config(cfg, parse_toml_file(file));
  for (const auto& s : sets) apply_set(cfg, s);
  const ModelConfig m = model_config(cfg);
  const nlohmann::json mj = m.to_json();
  for (const char* k : {"bands", "patch", "hsi3d", "lidar", "dim", "heads", "embed", "bn"}) cfg["model"][k] = mj.at(k);
  pretrain_config(cfg);
  finetune_config(cfg);
  synth_spec(cfg);
  return cfg;
}

inline void write_resolved_config(const std::filesystem::path& dir, const nlohmann::json& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "resolved_config.json", std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + (dir / "resolved_config.json").string());
  out << cfg.dump(2) << "\n";
}

}  // namespace nnc
