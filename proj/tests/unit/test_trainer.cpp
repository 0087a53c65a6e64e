#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "test_util.hpp"
#include "vlseg/ablation.hpp"
#include "vlseg/checkpoint.hpp"
#include "vlseg/config.hpp"
#include "vlseg/optim.hpp"
#include "vlseg/summary.hpp"
#include "vlseg/trainer.hpp"

using namespace vlseg;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vlseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Small and fast: H = 32, narrow channels, a couple of epochs.
TrainConfig tiny_config() {
  TrainConfig c = parse_config(
      "image_size = 32\n"
      "channels = 4,4,8,8\n"
      "d_text = 8\n"
      "heads = 1\n"
      "ssmix_d_state = 2\n"
      "max_epochs = 2\n"
      "min_epochs = 1\n"
      "batch_size = 4\n"
      "seed = 5\n");
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsRoundTripThroughText) {
  TrainConfig d;
  TrainConfig back = parse_config(config_to_text(d));
  EXPECT_EQ(config_to_text(back), config_to_text(d));
  EXPECT_EQ(back.lr0, 3e-4);
  EXPECT_EQ(back.batch_size, 8u);
  EXPECT_EQ(back.weight_decay, 0.01);
  EXPECT_EQ(back.model.shuffle_factor, 4u);
  EXPECT_TRUE(back == d);
}

TEST(Config, ParsesValuesCommentsAndWhitespace) {
  TrainConfig c = parse_config(
      "# desk run\n"
      "\n"
      "  lr0=1e-3  \n"
      "loss = bce   # trailing comment\n"
      "text = off_inference\n"
      "arch = crossattn_add\n"
      "modab = off\n"
      "image_size = 32\n"
      "channels = 4, 8, 16, 32\n");
  EXPECT_EQ(c.lr0, 1e-3);
  EXPECT_EQ(c.loss, LossMode::bce);
  EXPECT_EQ(c.text, TextMode::off_inference);
  EXPECT_EQ(c.model.arch, ArchMode::crossattn_add);
  EXPECT_TRUE(c.model.bypass_modab);
  EXPECT_EQ(c.model.image_size, 32u);
  EXPECT_EQ(c.model.shuffle_factor, 4u);
  EXPECT_EQ(c.model.channels[3], 32u);
  EXPECT_TRUE(parse_config(config_to_text(c)) == c);
}

TEST(Config, RejectsUnknownDuplicateAndMalformed) {
  try {
    parse_config("lr0 = 1e-3\nlearning_rate = 2\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("run.cfg:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("learning_rate"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("seed\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("lr0 = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("loss = focal\n"), ConfigError);
  EXPECT_THROW(parse_config("channels = 1,2,3\n"), ConfigError);
  EXPECT_THROW(parse_config("batch_norm = maybe\n"), ConfigError);
}

TEST(Config, EnforcesInvariants) {
  EXPECT_THROW(parse_config("lr0 = 1e-6\nlr_min = 1e-3\n"), ConfigError);
  EXPECT_THROW(parse_config("max_epochs = 5\nmin_epochs = 6\n"), ConfigError);
  EXPECT_THROW(parse_config("batch_size = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("image_size = 48\n"), ConfigError);
  EXPECT_THROW(parse_config("image_size = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("heads = 3\n"), ConfigError);
}

// ---------------------------------------------------------------------------
// AdamW

TEST(AdamW, ZeroGradWithoutDecayLeavesParams) {
  Rng rng(400);
  Parameter p("w", random_normal({3, 4}, rng));
  const Tensor before = p.value;
  p.zero_grad();
  OptimState st;
  AdamWOptions o;
  o.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adamw_step({&p}, st, 1e-2, o);
  EXPECT_EQ(p.value.data()[0], before.data()[0]);
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(p.value[i], before[i]);
  EXPECT_EQ(st.step, 3u);
}

TEST(AdamW, ZeroGradWithDecayIsPureShrink) {
  Rng rng(401);
  Parameter p("w", random_normal({5}, rng));
  const Tensor before = p.value;
  p.zero_grad();
  OptimState st;
  AdamWOptions o;
  o.weight_decay = 0.1;
  const double lr = 0.05;
  adamw_step({&p}, st, lr, o);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p.value[i], before[i] * (1.0 - lr * 0.1));
  // Every parameter norm strictly contracts.
  double n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    n0 += before[i] * before[i];
    n1 += p.value[i] * p.value[i];
  }
  EXPECT_LT(n1, n0);
}

TEST(AdamW, ScalarTrajectoryMatchesReferenceLoop) {
  // Minimizing f(x) = (x - 3)^2 from x = 0; reference written from the
  // update equations directly.
  Parameter p("x", Tensor::scalar(0.0));
  OptimState st;
  AdamWOptions o;
  o.weight_decay = 0.01;
  const double lr = 0.1;
  double x = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    const double g = 2.0 * (x - 3.0);
    p.grad = Tensor::scalar(2.0 * (p.value[0] - 3.0));
    adamw_step({&p}, st, lr, o);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    x = x - lr * 0.01 * x;
    x = x - lr * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p.value[0], x, 1e-12) << "step " << t;
  }
  EXPECT_GT(x, 0.9);
}

TEST(AdamW, NonFiniteGradientAbortsNamingParameter) {
  Parameter a("encoder.stage1.conv.weight", Tensor::from({2}, {1.0, 2.0}));
  Parameter b("decoder.head.bias", Tensor::from({2}, {1.0, 2.0}));
  a.grad = Tensor::from({2}, {0.5, 0.5});
  b.grad = Tensor::from({2}, {std::nan(""), 0.0});
  OptimState st;
  try {
    adamw_step({&a, &b}, st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.head.bias"), std::string::npos);
  }
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

// ---------------------------------------------------------------------------
// Schedule and stopping

TEST(CosineLr, AnchorsAndMonotonicity) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 3e-4, 1e-6, 200), 3e-4);
  EXPECT_DOUBLE_EQ(cosine_lr(200, 3e-4, 1e-6, 200), 1e-6);
  EXPECT_NEAR(cosine_lr(100, 3e-4, 1e-6, 200), (3e-4 + 1e-6) / 2, 1e-18);
  EXPECT_DOUBLE_EQ(cosine_lr(500, 3e-4, 1e-6, 200), 1e-6);
  double prev = cosine_lr(0, 3e-4, 1e-6, 200);
  for (std::size_t e = 1; e <= 200; ++e) {
    const double lr = cosine_lr(e, 3e-4, 1e-6, 200);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, 1e-6);
    EXPECT_LE(lr, 3e-4);
    prev = lr;
  }
}

TEST(EarlyStopping, PatienceZeroStopsAtFirstNonImprovingEpoch) {
  EarlyStopping s(0, 1);
  EXPECT_TRUE(s.observe(1, 0.2));
  EXPECT_FALSE(s.should_stop());
  EXPECT_TRUE(s.observe(2, 0.3));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.observe(3, 0.3));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_epoch(), 2u);
}

TEST(EarlyStopping, NeverBeforeMinEpochsOnPlateau) {
  for (std::size_t patience : {0u, 1u, 3u}) {
    EarlyStopping s(patience, 10);
    std::size_t stopped = 0;
    for (std::size_t e = 1; e <= 30 && stopped == 0; ++e) {
      s.observe(e, 0.5);
      if (s.should_stop()) stopped = e;
    }
    EXPECT_EQ(stopped, std::max<std::size_t>(10, patience + 1)) << "patience " << patience;
  }
}

TEST(EarlyStopping, CountsEpochsWithoutImprovement) {
  EarlyStopping s(3, 1);
  const double scores[] = {0.1, 0.4, 0.3, 0.4, 0.35, 0.2};
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= 6 && stopped == 0; ++e) {
    s.observe(e, scores[e - 1]);
    if (s.should_stop()) stopped = e;
  }
  EXPECT_EQ(stopped, 5u);  // ties do not count as improvement
  EXPECT_EQ(s.best_epoch(), 2u);
}

// ---------------------------------------------------------------------------
// Training and evaluation

TEST(Train, DeterministicTracesAndCheckpoints) {
  const TrainConfig cfg = tiny_config();
  Dataset ds = synth_generate(3, 24, 32);
  TrainResult a = train(cfg, ds), b = train(cfg, ds);
  ASSERT_EQ(a.report.batch_losses.size(), 2u * 4u);  // 16 train samples, batch 4
  for (std::size_t i = 0; i < a.report.batch_losses.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a.report.batch_losses[i]),
              std::bit_cast<std::uint64_t>(b.report.batch_losses[i]));
  }
  EXPECT_EQ(encode_seut(checkpoint_tensors(cfg, a.params, a.report.best_epoch)),
            encode_seut(checkpoint_tensors(cfg, b.params, b.report.best_epoch)));
  EXPECT_LE(a.report.best_epoch, a.report.epochs.size());
  EXPECT_GE(a.report.best_epoch, 1u);
}

TEST(Train, ReportIsConsistent) {
  TrainConfig cfg = tiny_config();
  cfg.max_epochs = 3;
  Dataset ds = synth_generate(4, 24, 32);
  TrainResult r = train(cfg, ds);
  ASSERT_FALSE(r.report.epochs.empty());
  double best = -1.0;
  for (const EpochRecord& e : r.report.epochs) {
    EXPECT_EQ(e.improved, e.val_dice > best || e.epoch == 1);
    best = std::max(best, e.val_dice);
    EXPECT_DOUBLE_EQ(e.lr, cosine_lr(e.epoch - 1, cfg.lr0, cfg.lr_min, cfg.t_max));
    EXPECT_TRUE(std::isfinite(e.loss_total));
  }
  EXPECT_EQ(r.report.best_val_dice, best);
  // The returned weights are the best epoch's: re-evaluating reproduces its score.
  EXPECT_EQ(evaluate(r.params, ds, "val", false).mean_dice, best);
  const std::string csv = run_report_csv(r.report);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(r.report.epochs.size() + 1));
}

TEST(Train, NonFiniteLossAbortsWithPosition) {
  const TrainConfig cfg = tiny_config();
  Dataset ds = synth_generate(3, 24, 32);
  for (Sample& s : ds.samples) s.image[0] = std::nan("");
  try {
    train(cfg, ds);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 1"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsIncompatibleDataset) {
  Dataset ds = synth_generate(3, 24, 64);
  EXPECT_THROW(train(tiny_config(), ds), ConfigError);
}

TEST(Evaluate, GroundTruthOracleScoresOne) {
  Dataset ds = synth_generate(6, 12, 32);
  std::vector<Mask> gts;
  for (const Sample& s : ds.samples) gts.push_back(mask_from_one_hot(s.mask));
  EvalResult r = score_masks(gts, gts);
  EXPECT_EQ(r.mean_dice, 1.0);
  EXPECT_EQ(r.mean_miou, 1.0);
}

TEST(Evaluate, MatchesHandComputation) {
  Mask gt(2, 4), pred(2, 4);
  gt.at(0, 0) = gt.at(0, 1) = gt.at(1, 0) = 1;  // 3 pixels
  pred.at(0, 1) = pred.at(1, 1) = 1;             // 2 pixels, 1 shared
  EvalResult r = score_masks({pred}, {gt});
  EXPECT_DOUBLE_EQ(r.mean_dice, 2.0 * 1.0 / 5.0);
  // fg IoU 1/4; bg: pred {00,02,03,10,12,13}, gt {02,03,11,12,13} -> 4/7
  EXPECT_DOUBLE_EQ(r.mean_miou, 0.5 * (0.25 + 4.0 / 7.0));
  EXPECT_EQ(r.samples[0].pred_pixels, 2u);
  EXPECT_EQ(r.samples[0].gt_pixels, 3u);
}

TEST(Evaluate, UntrainedModelWritesPredictions) {
  const TrainConfig cfg = tiny_config();
  Dataset ds = synth_generate(7, 12, 32);
  ModelParams p = ModelParams::init(cfg.model, 1);
  auto dir = temp_dir("eval_pgm");
  EvalResult r = evaluate(p, ds, "test", false, dir.string());
  EXPECT_EQ(r.samples.size(), 2u);
  EXPECT_GE(r.mean_dice, 0.0);
  EXPECT_LE(r.mean_dice, 1.0);
  for (const SampleScore& s : r.samples) {
    const Mask m = read_pgm((dir / (sample_stem(s.index) + ".pgm")).string());
    EXPECT_EQ(m.count(), s.pred_pixels);
  }
  EXPECT_EQ(evaluate(p, ds, "test", false).mean_dice, r.mean_dice);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripRestoresModel) {
  TrainConfig cfg = tiny_config();
  cfg.model.batch_norm = true;
  ModelParams p = ModelParams::init(cfg.model, 9);
  p.decoder[0].bn1.running_mean[0] = 0.25;
  auto dir = temp_dir("ckpt");
  const std::string path = (dir / "model.seut").string();
  save_checkpoint(path, cfg, p, 4);
  Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.epoch, 4u);
  EXPECT_TRUE(ck.config == cfg);
  EXPECT_EQ(ck.params.decoder[0].bn1.running_mean[0], 0.25);
  auto a = p.parameters(), b = ck.params.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(encode_seut({{"t", a[i]->value}}), encode_seut({{"t", b[i]->value}}));
  }
}

TEST(Checkpoint, MismatchesAreFormatErrorsAtTheEntry) {
  const TrainConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg.model, 9);
  NamedTensors t = checkpoint_tensors(cfg, p, 1);
  const std::vector<std::size_t> offsets = detail::seut_entry_offsets(t);
  // Offsets agree with the encoder's layout.
  const std::string bytes = encode_seut(t);
  EXPECT_EQ(bytes.substr(offsets[1] + 2, 11), "meta.config");

  NamedTensors bad = t;
  bad[5].second = Tensor({1});
  try {
    checkpoint_from_tensors(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), offsets[5]);
    EXPECT_NE(std::string(e.what()).find(t[5].first), std::string::npos);
  }
  bad = t;
  bad[0].second = Tensor::scalar(2.0);
  EXPECT_THROW(checkpoint_from_tensors(bad), FormatError);
  bad = t;
  bad.emplace_back("surplus", Tensor::scalar(1.0));
  EXPECT_THROW(checkpoint_from_tensors(bad), FormatError);
  bad = t;
  bad.erase(bad.begin() + 7);
  EXPECT_THROW(checkpoint_from_tensors(bad), FormatError);
}

// ---------------------------------------------------------------------------
// Ablation protocol

TEST(Ablation, PlanHasSevenRowsEachOneChangeAway) {
  const TrainConfig base = tiny_config();
  std::vector<AblationRow> rows = ablation_plan(base);
  ASSERT_EQ(rows.size(), 7u);
  const AblationRow& complete = find_row(rows, AblationKind::complete);
  EXPECT_EQ(rows.back().kind, AblationKind::complete);
  EXPECT_EQ(detail::config_diff(complete.config, find_row(rows, AblationKind::dice_loss).config), "loss = dice");
  EXPECT_EQ(detail::config_diff(complete.config, find_row(rows, AblationKind::bce_loss).config), "loss = bce");
  EXPECT_EQ(detail::config_diff(complete.config, find_row(rows, AblationKind::no_modab).config), "modab = off");
  EXPECT_EQ(detail::config_diff(complete.config, find_row(rows, AblationKind::ssmix_linear).config),
            "arch = ssmix_linear");
  EXPECT_EQ(detail::config_diff(complete.config, find_row(rows, AblationKind::crossattn_add).config),
            "arch = crossattn_add");
  EXPECT_EQ(detail::config_diff(complete.config, find_row(rows, AblationKind::no_text_inference).config),
            "text = off_inference");
  EXPECT_EQ(detail::config_diff(complete.config, complete.config), "-");
  EXPECT_NEAR(complete.paper_dice, 93.86, 0);
}

TEST(Ablation, TableListsEveryCondition) {
  std::vector<AblationRow> rows = ablation_plan(tiny_config());
  for (AblationRow& r : rows) {
    r.ok = true;
    r.dice = 0.5;
  }
  rows[1].ok = false;
  rows[1].error = "boom";
  const std::string md = ablation_markdown(rows), csv = ablation_csv(rows);
  for (const AblationRow& r : rows) {
    EXPECT_NE(md.find(r.label), std::string::npos);
    EXPECT_NE(csv.find(r.label), std::string::npos);
  }
  EXPECT_NE(md.find("boom"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
}

// ---------------------------------------------------------------------------
// Summary

TEST(Summary, SingleConvParams) { EXPECT_EQ(conv2d_param_count(1, 1, 3, true), 10u); }

TEST(Summary, TotalsMatchPerTensorSizes) {
  for (bool all : {false, true}) {
    ModelConfig cfg;
    cfg.modab_all_stages = all;
    cfg.heads = 1;
    ModelParams p = ModelParams::init(cfg, 0);
    std::size_t independent = 0;
    for (Parameter* q : p.parameters()) {
      std::size_t n = 1;
      for (std::size_t d : q->value.shape()) n *= d;
      independent += n;
    }
    ModelSummary s = model_summary(cfg);
    EXPECT_EQ(s.total_params, independent);
    std::size_t sum = 0, macs = 0;
    for (const ModuleSummary& m : s.modules) {
      sum += m.params;
      macs += m.macs;
      EXPECT_GT(m.macs, 0u) << m.name;
    }
    EXPECT_EQ(sum, independent);
    EXPECT_EQ(macs, s.total_macs);
  }
}

TEST(Summary, EncoderMacsFromConvArithmetic) {
  ModelConfig cfg;
  ModelSummary s = model_summary(cfg);
  // 64x64 input: stage 1 is 16x16 with 8 filters over 3 channels.
  EXPECT_EQ(s.modules[0].name, "encoder.stage1");
  EXPECT_EQ(s.modules[0].macs, 8u * 3u * 9u * 16u * 16u);
  EXPECT_EQ(s.modules[0].params, conv2d_param_count(3, 8, 3) + 2u * 8u);
}

TEST(Summary, DoublingWidthsQuadruplesConvParams) {
  auto conv_params = [](const ModelConfig& cfg) {
    ModelParams p = ModelParams::init(cfg, 0);
    std::size_t n = 0;
    for (Parameter* q : p.parameters()) {
      if (q->value.rank() == 4) n += q->value.numel();
    }
    return static_cast<double>(n);
  };
  ModelConfig a, b;
  b.channels = {16, 32, 64, 128};
  const double ratio = conv_params(b) / conv_params(a);
  EXPECT_GT(ratio, 3.8);
  EXPECT_LE(ratio, 4.0);
}
