#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "nnc/adam.hpp"
#include "nnc/key_queue.hpp"
#include "nnc/model.hpp"
#include "nnc/npy.hpp"

namespace nnc {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything needed to reproduce a run from a given step. Directory layout:
///   header.json, params/<name>.npy, buffers/<layer>.{mean,var}.npy,
///   and for pretraining runs key_params/, key_buffers/, adam/{m,v}/, queue.npy.
struct Checkpoint {
  std::string kind = "model";
  ModelConfig model;
  std::uint64_t step = 0;
  std::map<std::string, std::string> rng;
  nlohmann::json extra = nlohmann::json::object();
  ParamMap<float> params;
  BufferMap<float> buffers;
  std::optional<ParamMap<float>> key_params;
  std::optional<BufferMap<float>> key_buffers;
  std::optional<AdamState<float>> adam;
  std::optional<KeyQueue> queue;
};

namespace detail {

namespace fs = std::filesystem;

inline void save_tensors(const fs::path& dir, const ParamMap<float>& p) {
  fs::create_directories(dir);
  for (const auto& [name, t] : p) write_npy(dir / (name + ".npy"), t);
}

inline ParamMap<float> load_tensors(const fs::path& dir, const nlohmann::json& names) {
  ParamMap<float> out;
  for (const auto& n : names) {
    const std::string name = n.get<std::string>();
    const fs::path f = dir / (name + ".npy");
    if (!fs::exists(f)) throw CheckpointError("checkpoint is missing " + f.string());
    out.emplace(name, read_npy_tensor<float>(f));
  }
  return out;
}

inline nlohmann::json names_of(const ParamMap<float>& p) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& [name, t] : p) a.push_back(name);
  return a;
}

inline ParamMap<float> flatten_buffers(const BufferMap<float>& b) {
  ParamMap<float> out;
  for (const auto& [layer, s] : b) {
    out.emplace(layer + ".mean", s.mean);
    out.emplace(layer + ".var", s.var);
  }
  return out;
}

inline BufferMap<float> unflatten_buffers(const ParamMap<float>& flat) {
  BufferMap<float> out;
  for (const auto& [name, t] : flat) {
    const auto dot = name.rfind('.');
    const std::string layer = name.substr(0, dot), field = name.substr(dot + 1);
    if (field == "mean") out[layer].mean = t;
    else if (field == "var") out[layer].var = t;
    else throw CheckpointError("unexpected buffer file " + name);
  }
  return out;
}

inline void check_against(const ModelConfig& cfg, const ParamMap<float>& p, const char* what) {
  std::map<std::string, Shape> want;
  for (const auto& s : model_param_specs(cfg)) want.emplace(s.name, s.shape);
  if (want.size() != p.size()) throw CheckpointError(std::string(what) + ": parameter set does not match the architecture");
  for (const auto& [name, shape] : want) {
    auto it = p.find(name);
    if (it == p.end()) throw CheckpointError(std::string(what) + ": missing parameter " + name);
    if (it->second.shape() != shape) {
      throw CheckpointError(std::string(what) + ": " + name + " has shape " + to_string(it->second.shape()) +
                            ", architecture expects " + to_string(shape));
    }
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json h;
  h["kind"] = ck.kind;
  h["architecture_hash"] = architecture_hash(ck.model);
  h["model"] = ck.model.to_json();
  h["step"] = ck.step;
  h["rng"] = ck.rng;
  h["extra"] = ck.extra;
  h["params"] = detail::names_of(ck.params);
  h["buffers"] = detail::names_of(detail::flatten_buffers(ck.buffers));
  detail::save_tensors(dir / "params", ck.params);
  detail::save_tensors(dir / "buffers", detail::flatten_buffers(ck.buffers));
  if (ck.key_params) {
    h["key_params"] = detail::names_of(*ck.key_params);
    detail::save_tensors(dir / "key_params", *ck.key_params);
  }
  if (ck.key_buffers) {
    const auto flat = detail::flatten_buffers(*ck.key_buffers);
    h["key_buffers"] = detail::names_of(flat);
    detail::save_tensors(dir / "key_buffers", flat);
  }
  if (ck.adam) {
    ParamMap<float> m, v;
    for (const auto& [name, mom] : ck.adam->moments) {
      m.emplace(name, mom.m);
      v.emplace(name, mom.v);
    }
    h["adam"] = {{"lr", ck.adam->hyper.lr},
                 {"beta1", ck.adam->hyper.beta1},
                 {"beta2", ck.adam->hyper.beta2},
                 {"eps", ck.adam->hyper.eps},
                 {"step", ck.adam->step},
                 {"moments", detail::names_of(m)}};
    detail::save_tensors(dir / "adam" / "m", m);
    detail::save_tensors(dir / "adam" / "v", v);
  }
  if (ck.queue) {
    h["queue"] = {{"capacity", ck.queue->capacity()}, {"dim", ck.queue->dim()}, {"batches", ck.queue->batch_sizes()}};
    if (!ck.queue->empty()) write_npy(dir / "queue.npy", ck.queue->snapshot());
  }
  std::ofstream out(dir / "header.json", std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + (dir / "header.json").string());
  out << h.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto header = dir / "header.json";
  std::ifstream in(header);
  if (!in) throw CheckpointError("no checkpoint header at " + header.string());
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint header " + header.string() + ": " + e.what());
  }
  Checkpoint ck;
  ck.kind = h.at("kind").get<std::string>();
  ck.model = ModelConfig::from_json(h.at("model"));
  if (h.at("architecture_hash").get<std::uint64_t>() != architecture_hash(ck.model)) {
    throw CheckpointError("architecture hash in " + header.string() + " does not match its model config");
  }
  ck.step = h.at("step").get<std::uint64_t>();
  ck.rng = h.at("rng").get<std::map<std::string, std::string>>();
  ck.extra = h.at("extra");
  ck.params = detail::load_tensors(dir / "params", h.at("params"));
  detail::check_against(ck.model, ck.params, "params");
  ck.buffers = detail::unflatten_buffers(detail::load_tensors(dir / "buffers", h.at("buffers")));
  if (h.contains("key_params")) {
    ck.key_params = detail::load_tensors(dir / "key_params", h["key_params"]);
    detail::check_against(ck.model, *ck.key_params, "key_params");
  }
  if (h.contains("key_buffers")) {
    ck.key_buffers = detail::unflatten_buffers(detail::load_tensors(dir / "key_buffers", h["key_buffers"]));
  }
  if (h.contains("adam")) {
    const auto& a = h["adam"];
    AdamState<float> st;
    st.hyper = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                a.at("eps").get<double>()};
    st.step = a.at("step").get<std::uint64_t>();
    ParamMap<float> m = detail::load_tensors(dir / "adam" / "m", a.at("moments"));
    ParamMap<float> v = detail::load_tensors(dir / "adam" / "v", a.at("moments"));
    for (auto& [name, t] : m) st.moments[name] = AdamMoments<float>{std::move(t), std::move(v.at(name))};
    ck.adam = std::move(st);
  }
  if (h.contains("queue")) {
    const auto& q = h["queue"];
    const auto sizes = q.at("batches").get<std::vector<std::size_t>>();
    std::optional<Tensor<float>> keys;
    if (!sizes.empty()) keys = read_npy_tensor<float>(dir / "queue.npy");
    ck.queue = KeyQueue::restore(q.at("capacity").get<std::size_t>(), q.at("dim").get<std::size_t>(),
                                 keys ? &*keys : nullptr, sizes);
  }
  return ck;
}

}  // namespace nnc
