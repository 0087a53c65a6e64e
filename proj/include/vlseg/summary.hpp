#pragma once

// Parameter and multiply-accumulate accounting per module.

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlseg/config.hpp"
#include "vlseg/model.hpp"

namespace vlseg {

inline std::size_t conv2d_param_count(std::size_t cin, std::size_t cout, std::size_t k, bool bias = true) {
  return cout * cin * k * k + (bias ? cout : 0);
}

inline std::size_t conv2d_macs(std::size_t cin, std::size_t cout, std::size_t k, std::size_t h_out,
                               std::size_t w_out) {
  return cout * cin * k * k * h_out * w_out;
}

struct ModuleSummary {
  std::string name;
  std::size_t params = 0;
  std::size_t macs = 0;  // per sample
};

struct ModelSummary {
  std::vector<ModuleSummary> modules;
  std::size_t total_params = 0;
  std::size_t total_macs = 0;
};

namespace detail {

/// First two dotted components: "encoder.stage1.conv.weight" -> "encoder.stage1".
inline std::string module_of(const std::string& param_name) {
  const auto a = param_name.find('.');
  const auto b = a == std::string::npos ? a : param_name.find('.', a + 1);
  return param_name.substr(0, b);
}

/// Multiply-accumulates of one fusion block for C visual tokens of width Y and
/// N text tokens of width D.
inline std::size_t modab_macs(const ModelConfig& cfg, std::size_t C, std::size_t Y) {
  const std::size_t N = cfg.max_tokens, D = cfg.d_text;
  std::size_t m = N * D * Y;  // text projection
  if (cfg.arch == ArchMode::ssmix_linear) {
    m += N * Y * Y;
  } else {
    const std::size_t di = cfg.ssmix.expansion * Y, ds = cfg.ssmix.d_state, k = cfg.ssmix.kernel;
    m += N * Y * 2 * di;         // input projection
    m += 2 * di * N * k;         // depthwise convolutions
    m += N * di * (di + 2 * ds);  // step, B and C projections
    m += 3 * N * di * ds;        // scan: decay, input and readout per state
    m += N * 2 * di * Y;         // output projection
  }
  m += 4 * C * Y * Y + 2 * C * C * Y;  // self-attention
  if (cfg.arch != ArchMode::crossattn_add) m += 2 * C * Y * Y + 2 * N * Y * Y + 2 * C * N * Y;
  return m;
}

}  // namespace detail

inline ModelSummary model_summary(const ModelConfig& cfg) {
  ModelParams p = ModelParams::init(cfg, 0);
  std::map<std::string, ModuleSummary> by_name;
  std::vector<std::string> order;
  auto entry = [&](const std::string& name) -> ModuleSummary& {
    auto [it, fresh] = by_name.try_emplace(name);
    if (fresh) {
      it->second.name = name;
      order.push_back(name);
    }
    return it->second;
  };
  for (Parameter* q : p.parameters()) entry(detail::module_of(q->name)).params += q->value.numel();

  const auto& C = cfg.channels;
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t e = cfg.stage_extent(i);
    entry("encoder.stage" + std::to_string(i + 1)).macs += conv2d_macs(i == 0 ? 3 : C[i - 1], C[i], 3, e, e);
    if (cfg.stage_has_modab(i)) {
      entry("modab.stage" + std::to_string(i + 1)).macs += detail::modab_macs(cfg, C[i], cfg.stage_width(i));
    }
  }
  for (std::size_t m = 0; m < kStages - 1; ++m) {
    const std::size_t cin = C[kStages - 1 - m], cout = C[kStages - 2 - m];
    const std::size_t ein = cfg.stage_extent(kStages - 1 - m), eout = cfg.stage_extent(kStages - 2 - m);
    ModuleSummary& s = entry("decoder.up" + std::to_string(m + 1));
    s.macs += cin * cout * 4 * ein * ein;
    s.macs += conv2d_macs(2 * cout, cout, 3, eout, eout) + conv2d_macs(cout, cout, 3, eout, eout);
  }
  const std::size_t r = cfg.shuffle_factor, e0 = cfg.stage_extent(0);
  entry("decoder.sun").macs += conv2d_macs(C[0], cfg.classes * r * r, 3, e0, e0);
  entry("decoder.head").macs += conv2d_macs(cfg.classes, cfg.classes, 1, cfg.image_size, cfg.image_size);

  ModelSummary out;
  for (const std::string& name : order) {
    out.modules.push_back(by_name[name]);
    out.total_params += by_name[name].params;
    out.total_macs += by_name[name].macs;
  }
  return out;
}

inline std::string summary_markdown(const ModelConfig& cfg, const ModelSummary& s) {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof buf, "# Model summary (%zux%zu input)\n\n", cfg.image_size, cfg.image_size);
  os << buf << "| module | parameters | MACs per sample |\n|---|---:|---:|\n";
  for (const ModuleSummary& m : s.modules) {
    std::snprintf(buf, sizeof buf, "| %s | %zu | %zu |\n", m.name.c_str(), m.params, m.macs);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "| **total** | **%zu** | **%zu** |\n\n%.4f M parameters, %.4f G MACs per sample\n",
                s.total_params, s.total_macs, static_cast<double>(s.total_params) / 1e6,
                static_cast<double>(s.total_macs) / 1e9);
  os << buf;
  return os.str();
}

}  // namespace vlseg
