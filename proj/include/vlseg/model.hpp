#pragma once

// Convolutional image encoder stand-in, frozen text embedding stand-in,
// subpixel decoder, and end-to-end assembly around the fusion block.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vlseg/autodiff.hpp"
#include "vlseg/conv.hpp"
#include "vlseg/fft.hpp"
#include "vlseg/modab.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/random.hpp"
#include "vlseg/ssmix.hpp"
#include "vlseg/vocab.hpp"

namespace vlseg {

inline constexpr std::size_t kStages = 4;

struct ModelConfig {
  std::size_t image_size = 64;
  std::array<std::size_t, kStages> channels{8, 16, 32, 64};
  std::size_t d_text = 32;
  std::size_t max_tokens = 12;
  std::size_t heads = 4;
  std::size_t shuffle_factor = 4;
  std::size_t pool_kernel = 3;
  std::size_t classes = 2;
  SSMixConfig ssmix{};  // d_model and out_width are overridden per block
  bool modab_all_stages = false;
  bool batch_norm = false;  // CRB normalization: channel layer norm unless set
  ArchMode arch = ArchMode::full;
  bool bypass_modab = false;  // F := X, the block is skipped entirely

  /// Spatial extent of encoder stage i (0-based): H / 2^(i+2).
  std::size_t stage_extent(std::size_t i) const { return image_size >> (i + 2); }
  std::size_t stage_width(std::size_t i) const { return stage_extent(i) * stage_extent(i); }

  bool stage_has_modab(std::size_t i) const { return !bypass_modab && (modab_all_stages || i == kStages - 1); }

  void validate() const {
    if (!is_power_of_two(image_size) || image_size < 32) {
      throw ConfigError("image_size must be a power of two >= 32, got " + std::to_string(image_size));
    }
    for (std::size_t c : channels) {
      if (c == 0) throw ConfigError("stage channels must be positive");
    }
    if (d_text == 0 || max_tokens == 0) throw ConfigError("d_text and max_tokens must be positive");
    if (classes == 0) throw ConfigError("classes must be positive");
    if (pool_kernel % 2 == 0) throw ConfigError("pool_kernel must be odd, got " + std::to_string(pool_kernel));
    if (shuffle_factor == 0 || stage_extent(0) * shuffle_factor != image_size) {
      throw ConfigError("shuffle_factor " + std::to_string(shuffle_factor) + " does not bring the " +
                        std::to_string(stage_extent(0)) + "-pixel decoder output back to " +
                        std::to_string(image_size));
    }
    for (std::size_t i = 0; i < kStages; ++i) {
      if (stage_has_modab(i) && (heads == 0 || stage_width(i) % heads != 0)) {
        throw ConfigError("heads = " + std::to_string(heads) + " does not divide stage " + std::to_string(i + 1) +
                          " width " + std::to_string(stage_width(i)));
      }
    }
    SSMixConfig s = ssmix;
    s.d_model = s.out_width = 1;
    s.validate();
  }
};

/// Frozen embedding table [vocab, d]: seeded normal rows scaled to unit norm,
/// row 0 (padding) all zeros.
inline Tensor text_embedding_table(std::size_t d) {
  Rng rng(0x7e47e11b);
  Tensor table({Vocab::size(), d});
  for (std::size_t r = 1; r < Vocab::size(); ++r) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = rng.normal();
      table.at(r, j) = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) table.at(r, j) /= norm;
  }
  return table;
}

/// Looks token ids up in the frozen table: [B][N] -> constant [B, N, d].
inline Var encode_text_stub(Tape& tape, const std::vector<TokenIds>& ids, std::size_t d) {
  if (ids.empty()) throw DimensionError("encode_text_stub: empty batch");
  const std::size_t n = ids[0].size();
  static thread_local std::size_t cached_d = 0;
  static thread_local Tensor table;
  if (cached_d != d) {
    table = text_embedding_table(d);
    cached_d = d;
  }
  Tensor out({ids.size(), n, d});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b].size() != n) throw DimensionError("encode_text_stub: ragged token batch");
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t id = ids[b][t];
      if (id >= Vocab::size()) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(Vocab::size()));
      }
      for (std::size_t j = 0; j < d; ++j) out.at(b, t, j) = table.at(id, j);
    }
  }
  return tape.constant(std::move(out));
}

struct ConvParams {
  Parameter weight;
  Parameter bias;

  /// He-uniform weights [cout, cin, k, k], zero bias.
  static ConvParams init(const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
    return {Parameter(prefix + ".weight", random_uniform({cout, cin, k, k}, rng, -bound, bound)),
            Parameter(prefix + ".bias", Tensor({cout}))};
  }

  Var apply(const Var& x, std::size_t stride, std::size_t pad) {
    Tape& t = x.tape();
    return conv2d(x, t.param(weight), t.param(bias), stride, pad);
  }
};

struct EncoderStage {
  ConvParams conv;
  LayerNormParams norm;
};

struct DecoderStage {
  Parameter up_weight;  // [C_in, C_out, 2, 2]
  Parameter up_bias;
  ConvParams conv1;
  LayerNormParams norm1;
  BatchNormState bn1;
  ConvParams conv2;
  LayerNormParams norm2;
  BatchNormState bn2;
};

struct ModelParams {
  ModelConfig cfg;
  std::array<EncoderStage, kStages> encoder;
  std::vector<ModabParams> modab;  // one per stage when modab_all_stages, else one for stage 4
  std::array<DecoderStage, kStages - 1> decoder;
  ConvParams sun;
  ConvParams head;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams p;
    p.cfg = cfg;
    const auto& C = cfg.channels;
    for (std::size_t i = 0; i < kStages; ++i) {
      const std::string name = "encoder.stage" + std::to_string(i + 1);
      p.encoder[i].conv = ConvParams::init(name + ".conv", C[i], i == 0 ? 3 : C[i - 1], 3, rng);
      p.encoder[i].norm = LayerNormParams::init(name + ".norm", C[i]);
    }
    if (!cfg.bypass_modab) {
      for (std::size_t i = 0; i < kStages; ++i) {
        if (!cfg.stage_has_modab(i)) continue;
        p.modab.push_back(ModabParams::init("modab.stage" + std::to_string(i + 1), cfg.d_text, cfg.stage_width(i),
                                            cfg.heads, cfg.ssmix, cfg.arch, rng));
      }
    }
    for (std::size_t m = 0; m < kStages - 1; ++m) {
      // m = 0 upsamples stage 4 into stage 3, and so on.
      const std::size_t cin = C[kStages - 1 - m], cout = C[kStages - 2 - m];
      DecoderStage& d = p.decoder[m];
      const std::string name = "decoder.up" + std::to_string(m + 1);
      const double bound = std::sqrt(6.0 / static_cast<double>(cin));
      d.up_weight = Parameter(name + ".transconv.weight", random_uniform({cin, cout, 2, 2}, rng, -bound, bound));
      d.up_bias = Parameter(name + ".transconv.bias", Tensor({cout}));
      d.conv1 = ConvParams::init(name + ".crb.conv1", cout, 2 * cout, 3, rng);
      d.norm1 = LayerNormParams::init(name + ".crb.norm1", cout);
      d.conv2 = ConvParams::init(name + ".crb.conv2", cout, cout, 3, rng);
      d.norm2 = LayerNormParams::init(name + ".crb.norm2", cout);
      for (BatchNormState* bn : {&d.bn1, &d.bn2}) {
        bn->running_mean = Tensor({cout}, 0.0);
        bn->running_var = Tensor({cout}, 1.0);
      }
    }
    const std::size_t r = cfg.shuffle_factor;
    p.sun = ConvParams::init("decoder.sun.conv", cfg.classes * r * r, C[0], 3, rng);
    const double hb = std::sqrt(6.0 / static_cast<double>(2 * cfg.classes));
    p.head = {Parameter("decoder.head.weight", random_uniform({cfg.classes, cfg.classes, 1, 1}, rng, -hb, hb)),
              Parameter("decoder.head.bias", Tensor({cfg.classes}))};
    return p;
  }

  ModabParams* modab_for_stage(std::size_t i) {
    if (!cfg.stage_has_modab(i)) return nullptr;
    return cfg.modab_all_stages ? &modab.at(i) : &modab.at(0);
  }

  /// Every learnable tensor, in a stable order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (EncoderStage& e : encoder) {
      for (Parameter* q : {&e.conv.weight, &e.conv.bias, &e.norm.gain, &e.norm.bias}) out.push_back(q);
    }
    for (ModabParams& m : modab) {
      for (Parameter* q : m.parameters(cfg.arch)) out.push_back(q);
    }
    for (DecoderStage& d : decoder) {
      for (Parameter* q : {&d.up_weight, &d.up_bias, &d.conv1.weight, &d.conv1.bias, &d.norm1.gain, &d.norm1.bias,
                           &d.conv2.weight, &d.conv2.bias, &d.norm2.gain, &d.norm2.bias}) {
        out.push_back(q);
      }
    }
    for (Parameter* q : {&sun.weight, &sun.bias, &head.weight, &head.bias}) out.push_back(q);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Parameter* q : parameters()) n += q->value.numel();
    return n;
  }

  /// Batch-norm running statistics (empty unless cfg.batch_norm).
  std::vector<std::pair<std::string, Tensor*>> buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    if (!cfg.batch_norm) return out;
    for (std::size_t m = 0; m < decoder.size(); ++m) {
      const std::string name = "decoder.up" + std::to_string(m + 1) + ".crb.";
      DecoderStage& d = decoder[m];
      out.emplace_back(name + "bn1.running_mean", &d.bn1.running_mean);
      out.emplace_back(name + "bn1.running_var", &d.bn1.running_var);
      out.emplace_back(name + "bn2.running_mean", &d.bn2.running_mean);
      out.emplace_back(name + "bn2.running_var", &d.bn2.running_var);
    }
    return out;
  }
};

using EncoderFeatures = std::array<Var, kStages>;

/// Four strided conv -> channel layer norm -> GELU blocks (strides 4, 2, 2, 2).
inline EncoderFeatures encode_image_stub(const Var& img, ModelParams& p) {
  const Shape& s = img.shape();
  const std::size_t H = p.cfg.image_size;
  if (s.size() != 4 || s[1] != 3 || s[2] != H || s[3] != H) {
    throw ConfigError("encoder expects [B, 3, " + std::to_string(H) + ", " + std::to_string(H) + "], got " +
                      shape_str(s));
  }
  EncoderFeatures out;
  Var x = img;
  for (std::size_t i = 0; i < kStages; ++i) {
    Tape& t = x.tape();
    EncoderStage& e = p.encoder[i];
    x = gelu(channel_norm(e.conv.apply(x, i == 0 ? 4 : 2, 1), t.param(e.norm.gain), t.param(e.norm.bias)));
    out[i] = x;
  }
  return out;
}

namespace detail {

inline Var crb_norm(const Var& x, LayerNormParams& ln, BatchNormState& bn, bool use_bn, bool training) {
  Tape& t = x.tape();
  if (use_bn) return batch_norm2d(x, t.param(ln.gain), t.param(ln.bias), bn, training);
  return channel_norm(x, t.param(ln.gain), t.param(ln.bias));
}

}  // namespace detail

/// Three upsample + skip + refinement steps, then subpixel upsampling, pooling,
/// 1x1 head and channel softmax: -> [B, classes, H, W].
inline Var decoder_forward(const Var& fused, const EncoderFeatures& skips, ModelParams& p, bool training = false) {
  Tape& t = fused.tape();
  Var f = fused;
  for (std::size_t m = 0; m < kStages - 1; ++m) {
    DecoderStage& d = p.decoder[m];
    const Var& skip = skips[kStages - 2 - m];
    Var up = conv_transpose2d(f, t.param(d.up_weight), t.param(d.up_bias));
    if (up.shape() != skip.shape()) {
      throw DimensionError("decoder: upsampled " + shape_str(up.shape()) + " vs skip " + shape_str(skip.shape()));
    }
    Var x = concat({up, skip}, 1);
    x = leaky_relu(detail::crb_norm(d.conv1.apply(x, 1, 1), d.norm1, d.bn1, p.cfg.batch_norm, training));
    f = leaky_relu(detail::crb_norm(d.conv2.apply(x, 1, 1), d.norm2, d.bn2, p.cfg.batch_norm, training));
  }
  Var up = pixel_shuffle(p.sun.apply(f, 1, 1), p.cfg.shuffle_factor);
  Var pooled = avg_pool2d_padded(up, p.cfg.pool_kernel);
  return softmax_channels(p.head.apply(pooled, 1, 0));
}

struct ModelTrace {
  std::vector<ModabTrace> modab;
};

/// images [B, 3, H, W], one token row per sample -> probabilities [B, classes, H, W].
inline Var model_forward(Tape& tape, ModelParams& p, const Tensor& images, const std::vector<TokenIds>& tokens,
                         bool training = false, ModelTrace* trace = nullptr) {
  if (images.rank() != 4 || images.dim(0) != tokens.size()) {
    throw DimensionError("model: " + std::to_string(tokens.size()) + " token rows for images " +
                         shape_str(images.shape()));
  }
  EncoderFeatures feats = encode_image_stub(tape.constant(images), p);
  if (!p.cfg.bypass_modab) {
    Var text = encode_text_stub(tape, tokens, p.cfg.d_text);
    if (trace) trace->modab.clear();
    for (std::size_t i = 0; i < kStages; ++i) {
      ModabParams* block = p.modab_for_stage(i);
      if (block == nullptr) continue;
      const Shape s = feats[i].shape();
      Var flat = reshape(feats[i], {s[0], s[1], s[2] * s[3]});
      ModabTrace* tr = nullptr;
      if (trace) tr = &trace->modab.emplace_back();
      feats[i] = reshape(modab_forward(flat, text, *block, p.cfg.arch, tr), s);
    }
  }
  return decoder_forward(feats[kStages - 1], feats, p, training);
}

}  // namespace vlseg
