#pragma once

// Model checkpoints as SEUT files.
//
//   meta.version   [1]  checkpoint layout version
//   meta.config    [n]  config text, one byte per element
//   meta.epoch     [1]  epoch the weights come from
//   <param name>        every parameter, then batch-norm buffers

#include <string>

#include "vlseg/config.hpp"
#include "vlseg/model.hpp"
#include "vlseg/tensor_io.hpp"

namespace vlseg {

inline constexpr double kCheckpointVersion = 1.0;

struct Checkpoint {
  TrainConfig config;
  ModelParams params;
  std::size_t epoch = 0;
};

namespace detail {

inline Tensor text_to_tensor(const std::string& s) {
  Tensor t({std::max<std::size_t>(s.size(), 1)});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

/// Byte offset of every entry in the encoded file.
inline std::vector<std::size_t> seut_entry_offsets(const NamedTensors& entries) {
  std::vector<std::size_t> out;
  std::size_t pos = kSeutHeaderBytes;
  for (const auto& [name, t] : entries) {
    out.push_back(pos);
    pos += 2 + name.size() + 1 + 8 * t.rank() + 8 * t.numel();
  }
  return out;
}

}  // namespace detail

inline NamedTensors checkpoint_tensors(const TrainConfig& cfg, ModelParams& p, std::size_t epoch) {
  NamedTensors out;
  out.emplace_back("meta.version", Tensor::scalar(kCheckpointVersion));
  out.emplace_back("meta.config", detail::text_to_tensor(config_to_text(cfg)));
  out.emplace_back("meta.epoch", Tensor::scalar(static_cast<double>(epoch)));
  for (Parameter* q : p.parameters()) out.emplace_back(q->name, q->value);
  for (auto& [name, t] : p.buffers()) out.emplace_back(name, *t);
  return out;
}

inline void save_checkpoint(const std::string& path, const TrainConfig& cfg, ModelParams& p, std::size_t epoch) {
  save_tensors(path, checkpoint_tensors(cfg, p, epoch));
}

/// Rebuilds the model described by the stored config and fills in every
/// tensor. Missing, surplus or misshapen tensors are format errors positioned
/// at the offending entry.
inline Checkpoint checkpoint_from_tensors(const NamedTensors& entries, const std::string& where = "checkpoint") {
  const std::vector<std::size_t> offsets = detail::seut_entry_offsets(entries);
  auto fail = [&](const std::string& msg, std::size_t entry) -> FormatError {
    return FormatError(where + ": " + msg, entry < offsets.size() ? offsets[entry] : kSeutHeaderBytes);
  };
  auto index_of = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first == name) return i;
    }
    throw fail("missing tensor '" + name + "'", entries.size());
  };
  const std::size_t vi = index_of("meta.version");
  if (entries[vi].second.numel() != 1 || entries[vi].second[0] != kCheckpointVersion) {
    throw fail("unsupported checkpoint version", vi);
  }
  const std::size_t ci = index_of("meta.config");
  std::string text;
  for (double b : entries[ci].second.data()) {
    if (!(b >= 0.0 && b <= 255.0) || b != std::floor(b)) throw fail("meta.config is not a byte string", ci);
    if (b != 0.0) text.push_back(static_cast<char>(static_cast<unsigned char>(b)));
  }
  Checkpoint ck;
  try {
    ck.config = parse_config(text, where + " meta.config");
  } catch (const ConfigError& e) {
    throw fail(e.what(), ci);
  }
  const std::size_t ei = index_of("meta.epoch");
  ck.epoch = static_cast<std::size_t>(entries[ei].second[0]);
  ck.params = ModelParams::init(ck.config.model, 0);

  std::size_t expected = 3;
  auto fill = [&](const std::string& name, Tensor& dst) {
    const std::size_t i = index_of(name);
    if (entries[i].second.shape() != dst.shape()) {
      throw fail("tensor '" + name + "' has shape " + shape_str(entries[i].second.shape()) + ", model expects " +
                     shape_str(dst.shape()),
                 i);
    }
    dst = entries[i].second;
    ++expected;
  };
  for (Parameter* q : ck.params.parameters()) fill(q->name, q->value);
  for (auto& [name, t] : ck.params.buffers()) fill(name, *t);
  if (entries.size() != expected) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      bool known = entries[i].first.starts_with("meta.");
      for (Parameter* q : ck.params.parameters()) known = known || q->name == entries[i].first;
      for (auto& [name, t] : ck.params.buffers()) known = known || name == entries[i].first;
      if (!known) throw fail("unexpected tensor '" + entries[i].first + "'", i);
    }
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_tensors(load_tensors(path), path); }

}  // namespace vlseg
