#pragma once

// Component ablation: the complete model against six single-change variants,
// all trained on the same data with the same seed.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vlseg/trainer.hpp"

namespace vlseg {

enum class AblationKind { complete, dice_loss, bce_loss, no_text_inference, no_modab, ssmix_linear, crossattn_add };

struct AblationRow {
  AblationKind kind = AblationKind::complete;
  std::string group;  // heading the row is listed under
  std::string label;
  double paper_dice = 0.0;  // reference values, Kvasir-SEG
  double paper_miou = 0.0;
  TrainConfig config;
  // Filled in by the run.
  bool ok = false;
  std::string error;
  double dice = 0.0;
  double miou = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double seconds = 0.0;
};

/// The seven conditions derived from `base`, complete model last.
inline std::vector<AblationRow> ablation_plan(const TrainConfig& base) {
  auto row = [&](AblationKind k, const char* group, const char* label, double pd, double pm) {
    AblationRow r;
    r.kind = k;
    r.group = group;
    r.label = label;
    r.paper_dice = pd;
    r.paper_miou = pm;
    r.config = base;
    r.config.loss = LossMode::seu;
    r.config.text = TextMode::on;
    r.config.model.arch = ArchMode::full;
    r.config.model.bypass_modab = false;
    return r;
  };
  std::vector<AblationRow> rows;
  rows.push_back(row(AblationKind::dice_loss, "Loss Function", "Dice loss", 93.44, 85.76));
  rows.back().config.loss = LossMode::dice;
  rows.push_back(row(AblationKind::bce_loss, "Loss Function", "BCE loss", 92.03, 85.26));
  rows.back().config.loss = LossMode::bce;
  rows.push_back(row(AblationKind::no_text_inference, "Textual Guidance", "Inference w/o Text Prompts", 87.28, 81.32));
  rows.back().config.text = TextMode::off_inference;
  rows.push_back(row(AblationKind::no_modab, "Textual Guidance", "Training w/o MoDAB", 85.15, 73.86));
  rows.back().config.model.bypass_modab = true;
  rows.push_back(row(AblationKind::ssmix_linear, "Architectural Replacements", "SSMix with Linear layer", 91.72, 82.43));
  rows.back().config.model.arch = ArchMode::ssmix_linear;
  rows.push_back(
      row(AblationKind::crossattn_add, "Architectural Replacements", "Cross-Attention with Addition", 92.11, 82.59));
  rows.back().config.model.arch = ArchMode::crossattn_add;
  rows.push_back(row(AblationKind::complete, "", "Complete Model (ours)", 93.86, 87.62));
  return rows;
}

struct AblationOptions {
  std::string split = "test";
  std::ostream* log = nullptr;
  /// Reuse an already trained complete model (same base config) instead of
  /// training it again.
  const TrainResult* complete = nullptr;
};

/// Trains every condition and scores it on `split`. "Inference w/o Text
/// Prompts" evaluates the complete model on all-pad prompts. A failing row is
/// recorded and the others still run.
inline std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& ds,
                                             const AblationOptions& opts = {}) {
  std::vector<AblationRow> rows = ablation_plan(base);
  std::optional<TrainResult> complete;
  auto complete_model = [&]() -> TrainResult& {
    if (!complete) {
      if (opts.complete != nullptr) {
        if (!(opts.complete->config == rows.back().config)) {
          throw ConfigError("ablation: supplied complete model was trained with a different config");
        }
        complete = *opts.complete;
      } else {
        TrainOptions to;
        to.log = opts.log;
        complete = train(rows.back().config, ds, to);
      }
    }
    return *complete;
  };
  auto fill = [&](AblationRow& r, TrainResult& tr, bool drop_text) {
    EvalResult ev = evaluate(tr.params, ds, opts.split, drop_text);
    r.dice = ev.mean_dice;
    r.miou = ev.mean_miou;
    r.best_epoch = tr.report.best_epoch;
    r.epochs_run = tr.report.epochs.size();
    r.seconds = tr.report.wall_seconds;
    r.ok = true;
  };
  // The complete model first, since the no-text row reuses it.
  std::vector<std::size_t> order{rows.size() - 1};
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) order.push_back(i);
  for (std::size_t i : order) {
    AblationRow& r = rows[i];
    if (opts.log) *opts.log << "== " << r.label << '\n' << std::flush;
    try {
      if (r.kind == AblationKind::complete) {
        fill(r, complete_model(), false);
      } else if (r.kind == AblationKind::no_text_inference) {
        fill(r, complete_model(), true);
      } else {
        TrainOptions to;
        to.log = opts.log;
        TrainResult tr = train(r.config, ds, to);
        fill(r, tr, eval_drops_text(r.config.text));
      }
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
    if (opts.log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "   %s: Dice %.4f mIoU %.4f\n", r.ok ? "ok" : "FAILED", r.dice, r.miou);
      *opts.log << buf << std::flush;
    }
  }
  return rows;
}

inline const AblationRow& find_row(const std::vector<AblationRow>& rows, AblationKind k) {
  for (const AblationRow& r : rows) {
    if (r.kind == k) return r;
  }
  throw ContractError("ablation table has no such row");
}

namespace detail {

/// Keys on which a row's config differs from the complete model's.
inline std::string config_diff(const TrainConfig& a, const TrainConfig& b) {
  std::istringstream sa(config_to_text(a)), sb(config_to_text(b));
  std::string la, lb, out;
  while (std::getline(sa, la) && std::getline(sb, lb)) {
    if (la != lb) out += (out.empty() ? "" : "; ") + lb;
  }
  return out.empty() ? "-" : out;
}

}  // namespace detail

inline std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  const TrainConfig& ref = find_row(rows, AblationKind::complete).config;
  std::ostringstream os;
  char buf[512];
  os << "| Method | Dice (%) | mIoU (%) | Paper Dice (%) | Paper mIoU (%) | Change | Best epoch |\n";
  os << "|---|---:|---:|---:|---:|---|---:|\n";
  std::string group;
  for (const AblationRow& r : rows) {
    if (r.group != group && !r.group.empty()) os << "| *" << r.group << "* | | | | | | |\n";
    group = r.group;
    const std::string label = r.group.empty() ? "**" + r.label + "**" : "&nbsp;&nbsp;" + r.label;
    std::string change = r.kind == AblationKind::no_text_inference ? "all-pad prompts at evaluation"
                                                                    : detail::config_diff(ref, r.config);
    if (r.ok) {
      std::snprintf(buf, sizeof buf, "| %s | %.2f | %.2f | %.2f | %.2f | %s | %zu |\n", label.c_str(), 100.0 * r.dice,
                    100.0 * r.miou, r.paper_dice, r.paper_miou, change.c_str(), r.best_epoch);
    } else {
      std::snprintf(buf, sizeof buf, "| %s | failed | failed | %.2f | %.2f | %s | - |\n", label.c_str(), r.paper_dice,
                    r.paper_miou, change.c_str());
    }
    os << buf;
  }
  for (const AblationRow& r : rows) {
    if (!r.ok) os << "\n" << r.label << " failed: " << r.error << '\n';
  }
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "method,status,dice,miou,paper_dice,paper_miou,best_epoch,epochs_run,seconds\n";
  for (const AblationRow& r : rows) {
    os << '"' << r.label << "\"," << (r.ok ? "ok" : "failed") << ',' << detail::fmt_double(r.dice) << ','
       << detail::fmt_double(r.miou) << ',' << r.paper_dice << ',' << r.paper_miou << ',' << r.best_epoch << ','
       << r.epochs_run << ',' << r.seconds << '\n';
  }
  return os.str();
}

}  // namespace vlseg
