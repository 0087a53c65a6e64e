#pragma once

// Training loop, evaluation and run reports.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vlseg/checkpoint.hpp"
#include "vlseg/config.hpp"
#include "vlseg/dataset.hpp"
#include "vlseg/loss.hpp"
#include "vlseg/metrics.hpp"
#include "vlseg/model.hpp"
#include "vlseg/optim.hpp"
#include "vlseg/pgm.hpp"

namespace vlseg {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss_total = 0.0;  // means over the epoch's batches
  double loss_dice = 0.0;
  double loss_spectral = 0.0;
  double loss_entropy = 0.0;
  double val_dice = 0.0;
  double val_miou = 0.0;
  bool improved = false;
  double seconds = 0.0;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  std::vector<double> batch_losses;  // every optimization step, in order
  std::size_t best_epoch = 0;
  double best_val_dice = 0.0;
  bool stopped_early = false;
  double wall_seconds = 0.0;
};

struct TrainResult {
  TrainConfig config;
  ModelParams params;  // weights of the best epoch
  RunReport report;
};

struct SampleScore {
  std::size_t index = 0;
  std::string caption;
  double dice = 0.0;
  double miou = 0.0;
  std::size_t pred_pixels = 0;
  std::size_t gt_pixels = 0;
};

struct EvalResult {
  std::string split;
  double mean_dice = 0.0;
  double mean_miou = 0.0;
  std::vector<SampleScore> samples;
};

namespace detail {

inline std::vector<std::size_t> split_indices(const Dataset& ds, const std::string& split) {
  const auto [b, e] = ds.manifest.split_range(split);
  std::vector<std::size_t> idx;
  for (std::size_t i = b; i < e; ++i) idx.push_back(i);
  return idx;
}

inline void check_compatible(const ModelConfig& m, const Dataset& ds) {
  if (m.image_size != ds.manifest.image_size) {
    throw ConfigError("model image_size " + std::to_string(m.image_size) + " but dataset images are " +
                      std::to_string(ds.manifest.image_size));
  }
  if (m.max_tokens != ds.manifest.max_tokens) {
    throw ConfigError("model max_tokens " + std::to_string(m.max_tokens) + " but dataset captions hold " +
                      std::to_string(ds.manifest.max_tokens));
  }
}

struct ParamSnapshot {
  std::vector<Tensor> values;
  std::vector<Tensor> buffers;

  static ParamSnapshot take(ModelParams& p) {
    ParamSnapshot s;
    for (Parameter* q : p.parameters()) s.values.push_back(q->value);
    for (auto& [name, t] : p.buffers()) s.buffers.push_back(*t);
    return s;
  }

  void restore(ModelParams& p) const {
    auto params = p.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
    auto bufs = p.buffers();
    for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = buffers[i];
  }
};

}  // namespace detail

inline constexpr std::size_t kEvalBatch = 8;

/// Argmax masks for the listed samples, in order.
inline std::vector<Mask> predict_masks(ModelParams& p, const std::vector<Sample>& samples,
                                       const std::vector<std::size_t>& idx, bool drop_text) {
  std::vector<Mask> out;
  out.reserve(idx.size());
  for (std::size_t start = 0; start < idx.size(); start += kEvalBatch) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + kEvalBatch)));
    Batch b = make_batch(samples, chunk, drop_text);
    Tape tape;
    const Tensor& y = model_forward(tape, p, b.images, b.tokens, false).value();
    const std::size_t C = y.dim(1), H = y.dim(2), W = y.dim(3);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      Tensor probs({C, H, W});
      std::copy(y.data().begin() + static_cast<std::ptrdiff_t>(k * C * H * W),
                y.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * C * H * W), probs.data().begin());
      out.push_back(argmax_mask(probs));
    }
  }
  return out;
}

/// Per-sample Dice and mIoU plus their means.
inline EvalResult score_masks(const std::vector<Mask>& preds, const std::vector<Mask>& gts,
                              const std::vector<std::size_t>& indices = {},
                              const std::vector<std::string>& captions = {}) {
  if (preds.size() != gts.size() || preds.empty()) {
    throw ContractError("score_masks: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(gts.size()) + " ground truths");
  }
  EvalResult r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    SampleScore s;
    s.index = indices.empty() ? i : indices[i];
    if (!captions.empty()) s.caption = captions[i];
    s.dice = dice_score(preds[i], gts[i]);
    s.miou = miou(preds[i], gts[i]);
    s.pred_pixels = preds[i].count();
    s.gt_pixels = gts[i].count();
    r.mean_dice += s.dice;
    r.mean_miou += s.miou;
    r.samples.push_back(std::move(s));
  }
  r.mean_dice /= static_cast<double>(preds.size());
  r.mean_miou /= static_cast<double>(preds.size());
  return r;
}

/// Scores a split. With `pgm_dir` set, writes each prediction as NNNN.pgm.
inline EvalResult evaluate(ModelParams& p, const Dataset& ds, const std::string& split, bool drop_text,
                           const std::string& pgm_dir = "") {
  detail::check_compatible(p.cfg, ds);
  const std::vector<std::size_t> idx = detail::split_indices(ds, split);
  if (idx.empty()) throw DataError("split '" + split + "' is empty");
  const std::vector<Mask> preds = predict_masks(p, ds.samples, idx, drop_text);
  std::vector<Mask> gts;
  std::vector<std::string> captions;
  for (std::size_t i : idx) {
    gts.push_back(mask_from_one_hot(ds.samples[i].mask));
    captions.push_back(ds.samples[i].caption);
  }
  EvalResult r = score_masks(preds, gts, idx, captions);
  r.split = split;
  if (!pgm_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(pgm_dir, ec);
    if (ec) throw IoError("cannot create '" + pgm_dir + "': " + ec.message());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      write_pgm((std::filesystem::path(pgm_dir) / (sample_stem(idx[k]) + ".pgm")).string(), preds[k]);
    }
  }
  return r;
}

/// Whether a text mode evaluates on all-pad prompts.
inline bool eval_drops_text(TextMode m) { return m != TextMode::on; }

struct TrainOptions {
  std::ostream* log = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Seeded epoch loop with AdamW, cosine schedule and early stopping on
/// validation Dice. The returned parameters are those of the best epoch.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, const TrainOptions& opts = {}) {
  using clock = std::chrono::steady_clock;
  cfg.validate();
  detail::check_compatible(cfg.model, ds);
  const std::vector<std::size_t> train_idx = detail::split_indices(ds, "train");
  if (train_idx.empty() || ds.manifest.val == 0) throw DataError("training needs nonempty train and val splits");

  const auto t_start = clock::now();
  TrainResult result{cfg, ModelParams::init(cfg.model, cfg.seed), {}};
  ModelParams& p = result.params;
  RunReport& rep = result.report;
  const std::vector<Parameter*> params = p.parameters();
  OptimState state;
  AdamWOptions adam;
  adam.weight_decay = cfg.weight_decay;
  EarlyStopping stopper(cfg.patience, cfg.min_epochs);
  detail::ParamSnapshot best = detail::ParamSnapshot::take(p);
  Rng order_rng(cfg.seed ^ 0x0bde5eedULL);
  const bool drop_train_text = cfg.text == TextMode::off_training;
  const bool drop_val_text = cfg.text == TextMode::off_training;
  std::vector<std::size_t> order = train_idx;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t_epoch = clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(epoch - 1, cfg.lr0, cfg.lr_min, cfg.t_max);
    order_rng.shuffle(order);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
      const std::vector<std::size_t> chunk(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
      Batch b = make_batch(ds.samples, chunk, drop_train_text);
      for (Parameter* q : params) q->zero_grad();
      Tape tape;
      Var y = model_forward(tape, p, b.images, b.tokens, true);
      LossBreakdown loss = training_loss(cfg.loss, y, b.masks, cfg.weights);
      const double total = loss.total_value();
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches + 1));
      }
      tape.backward(loss.total);
      adamw_step(params, state, rec.lr, adam);
      rep.batch_losses.push_back(total);
      rec.loss_total += total;
      rec.loss_dice += loss.dice_value();
      rec.loss_spectral += loss.spectral_value();
      rec.loss_entropy += loss.entropy_value();
    }
    const double nb = static_cast<double>(batches);
    rec.loss_total /= nb;
    rec.loss_dice /= nb;
    rec.loss_spectral /= nb;
    rec.loss_entropy /= nb;

    const EvalResult val = evaluate(p, ds, "val", drop_val_text);
    rec.val_dice = val.mean_dice;
    rec.val_miou = val.mean_miou;
    rec.improved = stopper.observe(epoch, val.mean_dice);
    if (rec.improved) best = detail::ParamSnapshot::take(p);
    rec.seconds = std::chrono::duration<double>(clock::now() - t_epoch).count();
    rep.epochs.push_back(rec);
    if (opts.log) {
      char line[200];
      std::snprintf(line, sizeof line,
                    "epoch %3zu  lr %.3e  loss %.4f (dice %.4f spec %.4f ent %.4f)  val dice %.4f miou %.4f%s  %.1fs\n",
                    epoch, rec.lr, rec.loss_total, rec.loss_dice, rec.loss_spectral, rec.loss_entropy, rec.val_dice,
                    rec.val_miou, rec.improved ? " *" : "", rec.seconds);
      *opts.log << line << std::flush;
    }
    if (opts.on_epoch) opts.on_epoch(rec);
    if (stopper.should_stop()) {
      rep.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  best.restore(p);
  rep.best_epoch = stopper.best_epoch();
  rep.best_val_dice = stopper.best();
  rep.wall_seconds = std::chrono::duration<double>(clock::now() - t_start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string run_report_csv(const RunReport& r) {
  std::ostringstream os;
  os << "epoch,lr,loss_total,loss_dice,loss_spectral,loss_entropy,val_dice,val_miou,improved,seconds\n";
  for (const EpochRecord& e : r.epochs) {
    os << e.epoch << ',' << detail::fmt_double(e.lr) << ',' << detail::fmt_double(e.loss_total) << ','
       << detail::fmt_double(e.loss_dice) << ',' << detail::fmt_double(e.loss_spectral) << ','
       << detail::fmt_double(e.loss_entropy) << ',' << detail::fmt_double(e.val_dice) << ','
       << detail::fmt_double(e.val_miou) << ',' << (e.improved ? 1 : 0) << ',' << e.seconds << '\n';
  }
  return os.str();
}

inline std::string run_report_markdown(const TrainConfig& cfg, const RunReport& r) {
  std::ostringstream os;
  char buf[256];
  os << "# Training run\n\n";
  os << "| setting | value |\n|---|---|\n";
  os << "| loss | " << loss_mode_name(cfg.loss) << " |\n";
  os << "| text | " << text_mode_name(cfg.text) << " |\n";
  os << "| arch | " << arch_mode_name(cfg.model.arch) << (cfg.model.bypass_modab ? ", no MoDAB" : "") << " |\n";
  os << "| seed | " << cfg.seed << " |\n";
  os << "| epochs run | " << r.epochs.size() << (r.stopped_early ? " (early stop)" : "") << " |\n";
  std::snprintf(buf, sizeof buf, "| best epoch | %zu (val Dice %.4f) |\n| wall time | %.1f s |\n\n", r.best_epoch,
                r.best_val_dice, r.wall_seconds);
  os << buf;
  os << "| epoch | lr | loss | dice term | spectral term | entropy term | val Dice | val mIoU |\n";
  os << "|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const EpochRecord& e : r.epochs) {
    std::snprintf(buf, sizeof buf, "| %zu%s | %.3e | %.4f | %.4f | %.4f | %.4f | %.4f | %.4f |\n", e.epoch,
                  e.improved ? "*" : "", e.lr, e.loss_total, e.loss_dice, e.loss_spectral, e.loss_entropy, e.val_dice,
                  e.val_miou);
    os << buf;
  }
  return os.str();
}

inline std::string eval_csv(const EvalResult& r) {
  std::ostringstream os;
  os << "index,caption,dice,miou,pred_pixels,gt_pixels\n";
  for (const SampleScore& s : r.samples) {
    os << s.index << ",\"" << s.caption << "\"," << detail::fmt_double(s.dice) << ',' << detail::fmt_double(s.miou)
       << ',' << s.pred_pixels << ',' << s.gt_pixels << '\n';
  }
  return os.str();
}

inline std::string eval_markdown(const EvalResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "# Evaluation (%s split)\n\n| samples | mean Dice | mean mIoU |\n|---:|---:|---:|\n| %zu | %.4f | %.4f |\n",
                r.split.c_str(), r.samples.size(), r.mean_dice, r.mean_miou);
  return buf;
}

}  // namespace vlseg
