#pragma once

// Run configuration and its flat `key = value` text form.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlseg/dataset.hpp"
#include "vlseg/errors.hpp"
#include "vlseg/loss.hpp"
#include "vlseg/model.hpp"

namespace vlseg {

enum class TextMode {
  on,
  off_inference,  // trained with captions, evaluated on all-pad prompts
  off_training,   // captions dropped for training and evaluation
};

inline const char* text_mode_name(TextMode m) {
  switch (m) {
    case TextMode::on:
      return "on";
    case TextMode::off_inference:
      return "off_inference";
    case TextMode::off_training:
      return "off_training";
  }
  return "?";
}

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  LossMode loss = LossMode::seu;
  TextMode text = TextMode::on;
  double lr0 = 3e-4;
  double lr_min = 1e-6;
  std::size_t t_max = 200;
  std::size_t max_epochs = 200;
  std::size_t min_epochs = 20;
  std::size_t patience = 20;
  std::size_t batch_size = 8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    weights.validate();
    if (!(lr0 > 0.0) || !(lr_min >= 0.0) || lr_min > lr0) {
      throw ConfigError("need 0 <= lr_min <= lr0 and lr0 > 0 (lr0 = " + std::to_string(lr0) +
                        ", lr_min = " + std::to_string(lr_min) + ")");
    }
    if (t_max == 0) throw ConfigError("t_max must be positive");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (min_epochs > max_epochs) {
      throw ConfigError("min_epochs " + std::to_string(min_epochs) + " exceeds max_epochs " +
                        std::to_string(max_epochs));
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  }

  bool operator==(const TrainConfig& o) const { return config_text_equal(*this, o); }

 private:
  static bool config_text_equal(const TrainConfig& a, const TrainConfig& b);
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v, const std::string& where) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(where + ": '" + key + "' needs a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v, const std::string& where) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(where + ": '" + key + "' needs true or false, got '" + v + "'");
}

template <typename E, std::size_t N>
E parse_enum(const std::string& key, const std::string& v, const std::string& where,
             const std::array<std::pair<const char*, E>, N>& options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(where + ": '" + key + "' must be one of " + names + ", got '" + v + "'");
}

inline constexpr std::array<std::pair<const char*, LossMode>, 3> kLossModes{
    {{"seu", LossMode::seu}, {"dice", LossMode::dice}, {"bce", LossMode::bce}}};
inline constexpr std::array<std::pair<const char*, TextMode>, 3> kTextModes{
    {{"on", TextMode::on}, {"off_inference", TextMode::off_inference}, {"off_training", TextMode::off_training}}};
inline constexpr std::array<std::pair<const char*, ArchMode>, 3> kArchModes{
    {{"full", ArchMode::full}, {"ssmix_linear", ArchMode::ssmix_linear}, {"crossattn_add", ArchMode::crossattn_add}}};

}  // namespace detail

/// Every key with its current value, one per line, in a fixed order.
inline std::string config_to_text(const TrainConfig& c) {
  const ModelConfig& m = c.model;
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("seed", std::to_string(c.seed));
  kv("lr0", detail::fmt_double(c.lr0));
  kv("lr_min", detail::fmt_double(c.lr_min));
  kv("t_max", std::to_string(c.t_max));
  kv("max_epochs", std::to_string(c.max_epochs));
  kv("min_epochs", std::to_string(c.min_epochs));
  kv("patience", std::to_string(c.patience));
  kv("batch_size", std::to_string(c.batch_size));
  kv("weight_decay", detail::fmt_double(c.weight_decay));
  kv("loss", loss_mode_name(c.loss));
  kv("lambda_f", detail::fmt_double(c.weights.lambda_f));
  kv("lambda_e", detail::fmt_double(c.weights.lambda_e));
  kv("text", text_mode_name(c.text));
  kv("arch", arch_mode_name(m.arch));
  kv("modab", m.bypass_modab ? "off" : "on");
  kv("modab_all_stages", m.modab_all_stages ? "true" : "false");
  kv("image_size", std::to_string(m.image_size));
  std::string ch;
  for (std::size_t i = 0; i < kStages; ++i) ch += (i ? "," : "") + std::to_string(m.channels[i]);
  kv("channels", ch);
  kv("d_text", std::to_string(m.d_text));
  kv("max_tokens", std::to_string(m.max_tokens));
  kv("heads", std::to_string(m.heads));
  kv("ssmix_expansion", std::to_string(m.ssmix.expansion));
  kv("ssmix_d_state", std::to_string(m.ssmix.d_state));
  kv("ssmix_kernel", std::to_string(m.ssmix.kernel));
  kv("batch_norm", m.batch_norm ? "true" : "false");
  kv("pool_kernel", std::to_string(m.pool_kernel));
  return os.str();
}

/// Parses `key = value` lines over the defaults. Blank lines and lines
/// starting with '#' are skipped; unknown or repeated keys are errors.
inline TrainConfig parse_config(const std::string& text, const std::string& where = "config") {
  using detail::parse_unsigned;
  TrainConfig c;
  ModelConfig& m = c.model;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(std::string_view(line).substr(0, line.find('#')));  // '#' starts a comment
    if (t.empty()) continue;
    const std::string at = where + ":" + std::to_string(lineno);
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(at + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string v = trim(std::string_view(t).substr(eq + 1));
    if (auto [it, fresh] = seen.emplace(key, lineno); !fresh) {
      throw ConfigError(at + ": '" + key + "' already set on line " + std::to_string(it->second));
    }
    auto u = [&] { return parse_unsigned<std::size_t>(key, v, at); };
    auto d = [&] { return detail::parse_double(key, v, at); };
    try {
      if (key == "seed") c.seed = parse_unsigned<std::uint64_t>(key, v, at);
      else if (key == "lr0") c.lr0 = d();
      else if (key == "lr_min") c.lr_min = d();
      else if (key == "t_max") c.t_max = u();
      else if (key == "max_epochs") c.max_epochs = u();
      else if (key == "min_epochs") c.min_epochs = u();
      else if (key == "patience") c.patience = u();
      else if (key == "batch_size") c.batch_size = u();
      else if (key == "weight_decay") c.weight_decay = d();
      else if (key == "loss") c.loss = detail::parse_enum(key, v, at, detail::kLossModes);
      else if (key == "lambda_f") c.weights.lambda_f = d();
      else if (key == "lambda_e") c.weights.lambda_e = d();
      else if (key == "text") c.text = detail::parse_enum(key, v, at, detail::kTextModes);
      else if (key == "arch") m.arch = detail::parse_enum(key, v, at, detail::kArchModes);
      else if (key == "modab") m.bypass_modab = !detail::parse_bool(key, v, at);
      else if (key == "modab_all_stages") m.modab_all_stages = detail::parse_bool(key, v, at);
      else if (key == "image_size") m.image_size = u();
      else if (key == "channels") {
        std::vector<std::string> parts;
        std::string part;
        std::istringstream ps(v);
        while (std::getline(ps, part, ',')) parts.push_back(trim(part));
        if (parts.size() != kStages) {
          throw ConfigError(at + ": 'channels' needs " + std::to_string(kStages) + " comma separated widths");
        }
        for (std::size_t i = 0; i < kStages; ++i) m.channels[i] = parse_unsigned<std::size_t>(key, parts[i], at);
      }
      else if (key == "d_text") m.d_text = u();
      else if (key == "max_tokens") m.max_tokens = u();
      else if (key == "heads") m.heads = u();
      else if (key == "ssmix_expansion") m.ssmix.expansion = u();
      else if (key == "ssmix_d_state") m.ssmix.d_state = u();
      else if (key == "ssmix_kernel") m.ssmix.kernel = u();
      else if (key == "batch_norm") m.batch_norm = detail::parse_bool(key, v, at);
      else if (key == "pool_kernel") m.pool_kernel = u();
      else throw ConfigError(at + ": unknown key '" + key + "'");
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }
  if (m.stage_extent(0) > 0) m.shuffle_factor = m.image_size / m.stage_extent(0);
  c.validate();
  return c;
}

inline bool TrainConfig::config_text_equal(const TrainConfig& a, const TrainConfig& b) {
  return config_to_text(a) == config_to_text(b);
}

inline TrainConfig load_config(const std::string& path) { return parse_config(read_file_bytes(path), path); }

}  // namespace vlseg
