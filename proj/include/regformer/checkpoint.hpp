#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "regformer/model.hpp"
#include "regformer/optimizer.hpp"

namespace regformer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

inline constexpr int kCheckpointVersion = 1;

// Container: one compact JSON manifest line (names, shapes, dtypes, byte
// offsets) terminated by '\n', followed by a single concatenated binary
// blob. Offsets are relative to the blob start.
struct Checkpoint {
  int format_version = kCheckpointVersion;
  std::string kind = "full";  // "full" or "lora"
  ModelConfig config;
  long step = 0;
  uint64_t rng_seed = 0;
  int lora_rank = 0;
  uint64_t base_hash = 0;  // lora checkpoints reference their base weights
  std::map<std::string, Tensor> tensors;
  std::optional<AdamState> optimizer;
  std::vector<std::string> optimizer_order;  // parameter names matching m/v rows
};

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},     {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
          {"dropout", c.dropout},       {"variant", variant_name(c.variant)},
          {"ratio", c.ratio}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.ratio = j.at("ratio").get<double>();
  return c;
}

inline void append_values(std::vector<char>& blob, const std::vector<double>& values,
                          const std::string& dtype) {
  if (dtype == "f64") {
    const size_t bytes = values.size() * sizeof(double);
    const size_t at = blob.size();
    blob.resize(at + bytes);
    std::memcpy(blob.data() + at, values.data(), bytes);
  } else if (dtype == "f32") {
    std::vector<float> f(values.size());
    for (size_t i = 0; i < values.size(); ++i) f[i] = float(values[i]);
    const size_t bytes = f.size() * sizeof(float);
    const size_t at = blob.size();
    blob.resize(at + bytes);
    std::memcpy(blob.data() + at, f.data(), bytes);
  } else {
    throw std::invalid_argument("unknown checkpoint dtype '" + dtype + "'");
  }
}

inline std::vector<double> read_values(const std::vector<char>& blob, size_t offset, size_t count,
                                       const std::string& dtype) {
  std::vector<double> out(count);
  if (dtype == "f64") {
    if (offset + count * sizeof(double) > blob.size())
      throw std::runtime_error("checkpoint blob truncated");
    std::vector<double> tmp(count);
    std::memcpy(tmp.data(), blob.data() + offset, count * sizeof(double));
    out = std::move(tmp);
  } else if (dtype == "f32") {
    if (offset + count * sizeof(float) > blob.size())
      throw std::runtime_error("checkpoint blob truncated");
    std::vector<float> tmp(count);
    std::memcpy(tmp.data(), blob.data() + offset, count * sizeof(float));
    for (size_t i = 0; i < count; ++i) out[i] = double(tmp[i]);
  } else {
    throw std::runtime_error("unknown checkpoint dtype '" + dtype + "'");
  }
  return out;
}

}  // namespace detail

// Writes atomically (temp file + rename).
inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt,
                            const std::string& dtype) {
  nlohmann::json manifest;
  manifest["format_version"] = ckpt.format_version;
  manifest["kind"] = ckpt.kind;
  manifest["model_config"] = detail::config_to_json(ckpt.config);
  manifest["step"] = ckpt.step;
  manifest["rng_seed"] = ckpt.rng_seed;
  if (ckpt.kind == "lora") {
    manifest["lora_rank"] = ckpt.lora_rank;
    manifest["base_hash"] = ckpt.base_hash;
  }

  std::vector<char> blob;
  nlohmann::json tensor_list = nlohmann::json::array();
  for (const auto& [name, tensor] : ckpt.tensors) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    entry["dtype"] = dtype;
    entry["offset"] = blob.size();
    entry["count"] = tensor.size();
    detail::append_values(blob, tensor.data(), dtype);
    tensor_list.push_back(entry);
  }
  manifest["tensors"] = tensor_list;

  if (ckpt.optimizer) {
    nlohmann::json opt;
    opt["step"] = ckpt.optimizer->step;
    opt["beta1"] = ckpt.optimizer->beta1;
    opt["beta2"] = ckpt.optimizer->beta2;
    opt["epsilon"] = ckpt.optimizer->epsilon;
    nlohmann::json rows = nlohmann::json::array();
    for (size_t i = 0; i < ckpt.optimizer->m.size(); ++i) {
      nlohmann::json entry;
      entry["name"] = ckpt.optimizer_order[i];
      entry["m_offset"] = blob.size();
      detail::append_values(blob, ckpt.optimizer->m[i], "f64");
      entry["v_offset"] = blob.size();
      detail::append_values(blob, ckpt.optimizer->v[i], "f64");
      entry["count"] = ckpt.optimizer->m[i].size();
      rows.push_back(entry);
    }
    opt["rows"] = rows;
    manifest["optimizer"] = opt;
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out << manifest.dump() << '\n';
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw std::runtime_error("failed writing '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string manifest_line;
  if (!std::getline(in, manifest_line))
    throw std::runtime_error("checkpoint '" + path + "' has no manifest");
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  nlohmann::json manifest = nlohmann::json::parse(manifest_line);
  Checkpoint ckpt;
  ckpt.format_version = manifest.at("format_version").get<int>();
  if (ckpt.format_version != kCheckpointVersion)
    throw std::runtime_error("checkpoint '" + path + "' has unsupported format version " +
                             std::to_string(ckpt.format_version));
  ckpt.kind = manifest.at("kind").get<std::string>();
  ckpt.config = detail::config_from_json(manifest.at("model_config"));
  ckpt.step = manifest.at("step").get<long>();
  ckpt.rng_seed = manifest.at("rng_seed").get<uint64_t>();
  if (ckpt.kind == "lora") {
    ckpt.lora_rank = manifest.at("lora_rank").get<int>();
    ckpt.base_hash = manifest.at("base_hash").get<uint64_t>();
  }
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const size_t count = entry.at("count").get<size_t>();
    auto values =
        detail::read_values(blob, entry.at("offset").get<size_t>(), count, entry.at("dtype"));
    ckpt.tensors.emplace(name, Tensor::from(shape, std::move(values)));
  }
  if (manifest.contains("optimizer")) {
    AdamState state;
    const auto& opt = manifest.at("optimizer");
    state.step = opt.at("step").get<long>();
    state.beta1 = opt.at("beta1").get<double>();
    state.beta2 = opt.at("beta2").get<double>();
    state.epsilon = opt.at("epsilon").get<double>();
    for (const auto& row : opt.at("rows")) {
      const size_t count = row.at("count").get<size_t>();
      state.m.push_back(detail::read_values(blob, row.at("m_offset").get<size_t>(), count, "f64"));
      state.v.push_back(detail::read_values(blob, row.at("v_offset").get<size_t>(), count, "f64"));
      ckpt.optimizer_order.push_back(row.at("name").get<std::string>());
    }
    ckpt.optimizer = std::move(state);
  }
  return ckpt;
}

// Builds a model from a full checkpoint's tensors.
inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "full")
    throw std::runtime_error("cannot build a model from a '" + ckpt.kind + "' checkpoint alone");
  Model model = make_model(ckpt.config, ckpt.rng_seed);
  for (auto& named : model.params.named()) {
    auto it = ckpt.tensors.find(named.name);
    if (it == ckpt.tensors.end())
      throw std::runtime_error("checkpoint is missing tensor '" + named.name + "'");
    if (it->second.shape() != named.tensor.shape())
      throw std::runtime_error("checkpoint tensor '" + named.name + "' has shape " +
                               shape_str(it->second.shape()) + ", expected " +
                               shape_str(named.tensor.shape()));
    named.tensor.data_mut() = it->second.data();
  }
  return model;
}

// Applies a lora checkpoint's adapters onto a base model.
inline void apply_lora_checkpoint(Model& model, const Checkpoint& ckpt) {
  if (ckpt.kind != "lora") throw std::runtime_error("not a lora checkpoint");
  attach_lora(model, ckpt.lora_rank, ckpt.rng_seed);
  for (auto& named : model.lora->named()) {
    auto it = ckpt.tensors.find(named.name);
    if (it == ckpt.tensors.end())
      throw std::runtime_error("lora checkpoint is missing tensor '" + named.name + "'");
    named.tensor.data_mut() = it->second.data();
  }
}

inline uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for hashing");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

inline Checkpoint checkpoint_from_model(const Model& model, long step, uint64_t seed) {
  Checkpoint ckpt;
  ckpt.kind = "full";
  ckpt.config = model.config;
  ckpt.step = step;
  ckpt.rng_seed = seed;
  for (const auto& named : model.params.named()) ckpt.tensors.emplace(named.name, named.tensor);
  return ckpt;
}

// Arithmetic mean of the parameter tensors of several checkpoints.
// Averaging identical checkpoints reproduces them exactly.
inline Checkpoint average_checkpoints(const std::vector<std::string>& paths) {
  if (paths.empty()) throw std::invalid_argument("average_checkpoints: no inputs");
  Checkpoint first = load_checkpoint(paths[0]);
  std::map<std::string, std::vector<double>> sums;
  std::map<std::string, bool> all_same;
  for (const auto& [name, tensor] : first.tensors) {
    sums[name] = tensor.data();
    all_same[name] = true;
  }
  for (size_t i = 1; i < paths.size(); ++i) {
    Checkpoint next = load_checkpoint(paths[i]);
    if (next.tensors.size() != first.tensors.size())
      throw std::runtime_error("checkpoint '" + paths[i] + "' has a different tensor set");
    for (const auto& [name, tensor] : next.tensors) {
      auto it = sums.find(name);
      if (it == sums.end())
        throw std::runtime_error("checkpoint '" + paths[i] + "' has unexpected tensor '" + name + "'");
      auto& acc = it->second;
      const auto& add = tensor.data();
      all_same[name] = all_same[name] && add == first.tensors.at(name).data();
      for (size_t j = 0; j < acc.size(); ++j) acc[j] += add[j];
    }
  }
  const double inv = 1.0 / double(paths.size());
  for (auto& [name, tensor] : first.tensors) {
    if (all_same[name]) continue;  // bit-exact no-op when every input agrees
    auto& values = sums[name];
    auto& out = tensor.data_mut();
    for (size_t j = 0; j < values.size(); ++j) out[j] = values[j] * inv;
  }
  return first;
}

}  // namespace regformer
