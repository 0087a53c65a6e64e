// vlseg command-line front end: data generation, training, evaluation,
// ablation, gradient checks and model summaries.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "vlseg/vlseg.hpp"

namespace fs = std::filesystem;
using namespace vlseg;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

int cmd_gen_data(std::uint64_t seed, std::size_t count, std::size_t size, const std::string& out) {
  SynthOptions o;
  Dataset ds = synth_generate(seed, count, size, o);
  save_dataset(out, ds);
  const auto& m = ds.manifest;
  std::printf("wrote %zu samples (%zux%zu) to %s: train %zu, val %zu, test %zu\n", m.count, m.image_size,
              m.image_size, out.c_str(), m.train, m.val, m.test);
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out) {
  const TrainConfig cfg = load_config(config);
  const Dataset ds = load_dataset(data);
  fs::create_directories(out);
  TrainOptions opts;
  opts.log = &std::cout;
  TrainResult r = train(cfg, ds, opts);
  const fs::path dir(out);
  save_checkpoint((dir / "checkpoint.seut").string(), r.config, r.params, r.report.best_epoch);
  write_text(dir / "config.txt", config_to_text(r.config));
  write_text(dir / "train_log.csv", run_report_csv(r.report));
  write_text(dir / "report.md", run_report_markdown(r.config, r.report));
  std::printf("best epoch %zu, val Dice %.4f; checkpoint in %s\n", r.report.best_epoch, r.report.best_val_dice,
              (dir / "checkpoint.seut").c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, const std::string& out) {
  Checkpoint c = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(data);
  const fs::path dir = out.empty() ? fs::path(ckpt).parent_path() / ("eval_" + split) : fs::path(out);
  fs::create_directories(dir / "predictions");
  EvalResult r = evaluate(c.params, ds, split, eval_drops_text(c.config.text), (dir / "predictions").string());
  write_text(dir / "eval.csv", eval_csv(r));
  write_text(dir / "eval.md", eval_markdown(r));
  std::printf("%s: Dice %.4f, mIoU %.4f over %zu samples; reports in %s\n", split.c_str(), r.mean_dice, r.mean_miou,
              r.samples.size(), dir.c_str());
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& data, const std::string& out, const std::string& split) {
  const TrainConfig cfg = load_config(config);
  const Dataset ds = load_dataset(data);
  fs::create_directories(out);
  AblationOptions opts;
  opts.split = split;
  opts.log = &std::cout;
  const auto rows = run_ablation(cfg, ds, opts);
  const std::string md = ablation_markdown(rows);
  write_text(fs::path(out) / "ablation.md", md);
  write_text(fs::path(out) / "ablation.csv", ablation_csv(rows));
  std::cout << '\n' << md;
  for (const AblationRow& r : rows) {
    if (!r.ok) return 1;
  }
  return 0;
}

int cmd_gradcheck(const std::string& op, bool full, double tol_op, double tol_full) {
  int failures = 0;
  if (!full || !op.empty()) {
    bool found = false;
    for (const OpCheck& c : op_checks()) {
      if (!op.empty() && op != "all" && c.name != op) continue;
      found = true;
      const GradCheckResult r = c.run();
      const bool ok = r.max_rel_error <= tol_op;
      failures += !ok;
      std::printf("%-22s %s  max rel error %.3e  (%zu coords, worst %s[%zu])\n", c.name.c_str(), ok ? "ok  " : "FAIL",
                  r.max_rel_error, r.coords_checked, r.worst_param.c_str(), r.worst_index);
    }
    if (!found) {
      std::fprintf(stderr, "unknown op '%s'; available:", op.c_str());
      for (const OpCheck& c : op_checks()) std::fprintf(stderr, " %s", c.name.c_str());
      std::fprintf(stderr, "\n");
      return 2;
    }
  }
  if (full) {
    const FullGradCheckReport rep = full_model_gradcheck();
    for (const auto& [name, r] : rep.per_parameter) {
      std::printf("  %-40s %.3e\n", name.c_str(), r.max_rel_error);
    }
    const bool ok = rep.overall.max_rel_error <= tol_full;
    failures += !ok;
    std::printf(
        "full model %s  max rel error %.3e at %s[%zu] (analytic %.6e, numeric %.6e)\n"
        "  %zu coords, loss %.6f, step %.0e, max abs error %.3e, central-difference floor %.3e\n",
        ok ? "ok" : "FAIL", rep.overall.max_rel_error, rep.overall.worst_param.c_str(), rep.overall.worst_index,
        rep.overall.worst_analytic, rep.overall.worst_numeric, rep.overall.coords_checked, rep.loss, rep.step,
        rep.overall.max_abs_error, rep.roundoff_floor());
  }
  return failures == 0 ? 0 : 1;
}

int cmd_summary(const std::string& config) {
  const TrainConfig cfg = load_config(config);
  std::cout << summary_markdown(cfg.model, model_summary(cfg.model));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vlseg: text-guided segmentation with state-space text mixing"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t count = 300, size = 64;
  std::string out, config, data, ckpt, split = "test", op;
  bool full = false;
  double tol_op = 1e-6, tol_full = 1e-5;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic referring-segmentation dataset");
  gen->add_option("--seed", seed, "generator seed")->required();
  gen->add_option("--count", count, "number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "image side, a power of two >= 32")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config, "config file (key = value)")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "run directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", out, "report directory (default: next to the checkpoint)");

  auto* ab = app.add_subcommand("ablate", "train and score the component ablations");
  ab->add_option("--config", config, "base config file")->required()->check(CLI::ExistingFile);
  ab->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--out", out, "output directory")->required();
  ab->add_option("--split", split, "split to score")->check(CLI::IsMember({"train", "val", "test"}));

  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  gc->add_option("--op", op, "single op to check ('all' for every op)");
  gc->add_flag("--full", full, "end-to-end check of the full model with the default loss");
  gc->add_option("--tol", tol_op, "op tolerance");
  gc->add_option("--tol-full", tol_full, "full-model tolerance");

  auto* sm = app.add_subcommand("summary", "parameter and MAC counts per module");
  sm->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(seed, count, size, out);
    if (*tr) return cmd_train(config, data, out);
    if (*ev) return cmd_eval(ckpt, data, split, out);
    if (*ab) return cmd_ablate(config, data, out, split);
    if (*gc) return cmd_gradcheck(op, full, tol_op, tol_full);
    if (*sm) return cmd_summary(config);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
