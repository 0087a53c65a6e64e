#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>

#include "test_util.hpp"
#include "vlseg/dataset.hpp"
#include "vlseg/metrics.hpp"
#include "vlseg/pgm.hpp"
#include "vlseg/synth.hpp"
#include "vlseg/tensor_io.hpp"

using namespace vlseg;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vlseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename F>
std::size_t format_error_offset(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return SIZE_MAX;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

Mask mask_from_rows(std::vector<std::vector<int>> rows) {
  Mask m(rows.size(), rows[0].size());
  for (std::size_t y = 0; y < rows.size(); ++y)
    for (std::size_t x = 0; x < rows[0].size(); ++x) m.at(y, x) = static_cast<std::uint8_t>(rows[y][x]);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer

TEST(Tokenize, KnownCaption) {
  TokenIds ids = tokenize("segment the disc", 6);
  EXPECT_EQ(ids, (TokenIds{Vocab::id("segment"), Vocab::id("the"), Vocab::id("disc"), 0, 0, 0}));
  EXPECT_EQ(tokenize("", 4), TokenIds(4, 0));
  EXPECT_EQ(detokenize(tokenize("segment the square in the lower right", 12)), "segment the square in the lower right");
}

TEST(Tokenize, VocabIsBijective) {
  for (std::size_t i = 1; i < Vocab::size(); ++i) EXPECT_EQ(Vocab::id(Vocab::word(i)), i);
  EXPECT_EQ(Vocab::size(), 11u);
}

TEST(Tokenize, Errors) {
  try {
    tokenize("segment the hexagon", 6);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("hexagon"), std::string::npos);
  }
  EXPECT_THROW(tokenize("the the the", 2), DataError);
  EXPECT_THROW(Vocab::word(99), DataError);
}

// ---------------------------------------------------------------------------
// SEUT container

TEST(TensorIo, EmptyListIsTwelveBytes) {
  const std::string bytes = encode_seut({});
  ASSERT_EQ(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "SEUT");
  EXPECT_EQ(bytes[4], 1);
  for (int i = 5; i < 12; ++i) EXPECT_EQ(bytes[i], 0);
  EXPECT_TRUE(decode_seut(bytes).empty());
}

TEST(TensorIo, LayoutIsLittleEndian) {
  const std::string bytes = encode_seut({{"ab", Tensor::from({2}, {1.0, -2.5})}});
  // header 12 + u16 2 + name 2 + rank 1 + extent 8 + payload 16
  ASSERT_EQ(bytes.size(), 41u);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[13], 0);
  EXPECT_EQ(bytes.substr(14, 2), "ab");
  EXPECT_EQ(bytes[16], 1);
  EXPECT_EQ(bytes[17], 2);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[25 + i])) << (8 * i);
  EXPECT_EQ(std::bit_cast<double>(u), 1.0);
}

TEST(TensorIo, RoundTripBitExact) {
  Rng rng(300);
  Tensor special = Tensor::from({6}, {0.0, -0.0, std::numeric_limits<double>::denorm_min(),
                                      std::numeric_limits<double>::infinity(), std::nan(""), 1e308});
  NamedTensors in = {{"weights", random_normal({3, 4, 5}, rng)},
                     {"special", special},
                     {"größe", Tensor::scalar(std::numbers::pi)}};
  auto dir = temp_dir("seut");
  const std::string path = (dir / "t.seut").string();
  save_tensors(path, in);
  NamedTensors out = load_tensors(path);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].first, in[i].first);
    EXPECT_TRUE(bit_equal(out[i].second, in[i].second)) << in[i].first;
  }
  EXPECT_EQ(encode_seut(out), encode_seut(in));
}

TEST(TensorIo, TruncationReportsOffset) {
  const std::string bytes = encode_seut({{"x", Tensor::from({3}, {1, 2, 3})}});
  // Extents at 16 promise 24 payload bytes that the cut file does not hold.
  EXPECT_EQ(format_error_offset([&] { decode_seut(bytes.substr(0, 30)); }), 16u);
  EXPECT_EQ(format_error_offset([&] { decode_seut(bytes.substr(0, 10)); }), 8u);
  EXPECT_EQ(format_error_offset([&] { decode_seut(bytes.substr(0, 2)); }), 0u);
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) EXPECT_THROW(decode_seut(bytes.substr(0, cut)), FormatError);
}

TEST(TensorIo, MalformedInputsRejected) {
  std::string bytes = encode_seut({{"x", Tensor::from({2}, {1, 2})}});
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), 0u);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), 4u);
  bad = bytes;
  bad[15] = 0;  // rank 0
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), 15u);
  bad = bytes;
  for (int i = 16; i < 24; ++i) bad[i] = 0;  // zero extent
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), 16u);
  bad = bytes;
  bad[23] = 0x7f;  // absurd extent
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), 16u);
  bad = bytes + "!";
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), bytes.size());
  bad = bytes;
  bad[14] = static_cast<char>(0xff);  // invalid UTF-8 name
  EXPECT_EQ(format_error_offset([&] { decode_seut(bad); }), 14u);
  std::string two = encode_seut({{"x", Tensor::scalar(1)}, {"x", Tensor::scalar(2)}});
  EXPECT_THROW(decode_seut(two), FormatError);
  EXPECT_THROW(encode_seut({{"empty", Tensor()}}), ContractError);
}

TEST(TensorIo, LoadErrorsNameTheFile) {
  auto dir = temp_dir("seut_bad");
  const std::string path = (dir / "bad.seut").string();
  write_file_bytes(path, "SEUTxx");
  try {
    load_tensors(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.seut"), std::string::npos);
    EXPECT_EQ(e.offset(), 4u);
  }
  EXPECT_THROW(load_tensors((dir / "missing.seut").string()), IoError);
}

// ---------------------------------------------------------------------------
// PGM

TEST(Pgm, HeaderAndBackground) {
  Mask m(3, 5);
  const std::string bytes = encode_pgm(m);
  EXPECT_EQ(bytes.substr(0, 9), "P5\n5 3\n25");
  EXPECT_EQ(bytes.substr(0, 11), "P5\n5 3\n255\n");
  ASSERT_EQ(bytes.size(), 11u + 15u);
  for (std::size_t i = 11; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 0);
}

TEST(Pgm, RoundTrip) {
  Rng rng(301);
  Mask m(7, 9);
  for (auto& v : m.data) v = rng.uniform() < 0.4;
  auto dir = temp_dir("pgm");
  const std::string path = (dir / "m.pgm").string();
  write_pgm(path, m);
  EXPECT_EQ(read_pgm(path), m);
  EXPECT_EQ(static_cast<unsigned char>(encode_pgm(m)[11 + 0]), m.data[0] ? 255 : 0);
}

TEST(Pgm, AcceptsCommentsAndWhitespace) {
  std::string bytes = "P5 # comment\n 2\t1 255\n";
  bytes += std::string("\xff\x00", 2);
  Mask m = decode_pgm(bytes);
  EXPECT_EQ(m.width, 2u);
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{1, 0}));
}

TEST(Pgm, MalformedRejectedWithOffset) {
  EXPECT_EQ(format_error_offset([] { decode_pgm("P2\n1 1\n255\n\x00"); }), 0u);
  EXPECT_EQ(format_error_offset([] { decode_pgm(std::string("P5\n1 1\n15\n\x00", 11)); }), 7u);
  EXPECT_EQ(format_error_offset([] { decode_pgm("P5\nx 1\n255\n"); }), 3u);
  EXPECT_EQ(format_error_offset([] { decode_pgm(std::string("P5\n2 1\n255\n\x00", 12)); }), 12u);
  EXPECT_EQ(format_error_offset([] { decode_pgm(std::string("P5\n1 1\n255\n\x07", 12)); }), 11u);
  EXPECT_EQ(format_error_offset([] { decode_pgm(std::string("P5\n0 1\n255\n", 11)); }), 3u);
}

TEST(Pgm, OneHotConversions) {
  Mask m = mask_from_rows({{1, 0}, {0, 1}});
  Tensor t = one_hot_from_mask(m);
  EXPECT_EQ(t.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), (std::vector<double>{0, 1, 1, 0, 1, 0, 0, 1}));
  EXPECT_EQ(mask_from_one_hot(t), m);
  Tensor probs = Tensor::from({2, 1, 3}, {0.7, 0.2, 0.5, 0.3, 0.8, 0.5});
  EXPECT_EQ(argmax_mask(probs).data, (std::vector<std::uint8_t>{0, 1, 0}));
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, IdenticalAndEmpty) {
  Mask a = mask_from_rows({{1, 1}, {0, 1}});
  EXPECT_EQ(dice_score(a, a), 1.0);
  EXPECT_EQ(miou(a, a), 1.0);
  Mask e(2, 2);
  EXPECT_EQ(dice_score(e, e), 1.0);
  EXPECT_EQ(miou(e, e), 1.0);
}

TEST(Metrics, HandCounts) {
  Mask a = mask_from_rows({{1, 1}, {0, 0}}), b = mask_from_rows({{1, 0}, {1, 0}});
  EXPECT_DOUBLE_EQ(dice_score(a, b), 0.5);
  EXPECT_DOUBLE_EQ(dice_score(b, a), 0.5);
  // fg IoU 1/3, bg IoU 1/3
  EXPECT_DOUBLE_EQ(miou(a, b), 1.0 / 3.0);
  Mask c = mask_from_rows({{1, 0, 0, 0}}), d = mask_from_rows({{0, 1, 0, 0}});
  EXPECT_EQ(dice_score(c, d), 0.0);
  // bg: inter 2, union 4
  EXPECT_DOUBLE_EQ(miou(c, d), 0.5 * 0.5);
  EXPECT_THROW(dice_score(a, c), DimensionError);
}

TEST(Metrics, SymmetricOnRandomMasks) {
  Rng rng(302);
  for (int k = 0; k < 20; ++k) {
    Mask a(8, 8), b(8, 8);
    for (auto& v : a.data) v = rng.uniform() < 0.3;
    for (auto& v : b.data) v = rng.uniform() < 0.3;
    EXPECT_EQ(dice_score(a, b), dice_score(b, a));
    EXPECT_EQ(miou(a, b), miou(b, a));
    if (a.count() > 0) {
      EXPECT_EQ(dice_score(a, a), 1.0);
    }
  }
}

// ---------------------------------------------------------------------------
// Generator

TEST(Synth, ShapeGeometryOracle) {
  ShapeSpec disc{ShapeKind::disc, Quadrant::upper_left, 8.0, 8.0, 3.0, 0.5};
  std::size_t n = 0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const double dy = y + 0.5 - 8.0, dx = x + 0.5 - 8.0;
      n += dy * dy + dx * dx <= 9.0;
    }
  EXPECT_EQ(rasterize(disc, 16).count(), n);
  ShapeSpec sq{ShapeKind::square, Quadrant::upper_left, 8.0, 8.0, 3.0, 0.5};
  EXPECT_EQ(rasterize(sq, 16).count(), 36u);  // centers 5.5 .. 10.5
  ShapeSpec tri{ShapeKind::triangle, Quadrant::upper_left, 8.0, 8.0, 4.0, 0.5};
  Mask t = rasterize(tri, 16);
  EXPECT_EQ(t.at(4, 8), 0);  // center 4.5 is above... inside the apex band only near cx
  EXPECT_EQ(t.at(11, 8), 1);
  EXPECT_EQ(t.at(11, 4), 1);
  EXPECT_EQ(t.at(5, 5), 0);
}

TEST(Synth, DeterministicGivenSeed) {
  Dataset a = synth_generate(5, 24, 32), b = synth_generate(5, 24, 32), c = synth_generate(6, 24, 32);
  ASSERT_EQ(a.samples.size(), 24u);
  bool differs = false;
  for (std::size_t i = 0; i < 24; ++i) {
    EXPECT_TRUE(bit_equal(a.samples[i].image, b.samples[i].image));
    EXPECT_EQ(a.samples[i].mask, b.samples[i].mask);
    EXPECT_EQ(a.samples[i].caption, b.samples[i].caption);
    differs = differs || !bit_equal(a.samples[i].image, c.samples[i].image);
  }
  EXPECT_TRUE(differs);
}

TEST(Synth, SceneAndMaskConstraints) {
  const std::size_t H = 64;
  Dataset ds = synth_generate(7, 120, H);
  for (const Sample& s : ds.samples) {
    ASSERT_TRUE(s.scene.has_value());
    const Scene& sc = *s.scene;
    EXPECT_GE(sc.shapes.size(), 2u);
    EXPECT_LE(sc.shapes.size(), 3u);
    std::set<Quadrant> quads;
    std::set<double> grays;
    for (const ShapeSpec& sh : sc.shapes) {
      quads.insert(sh.quadrant);
      grays.insert(sh.gray);
    }
    EXPECT_EQ(quads.size(), sc.shapes.size());
    EXPECT_EQ(grays.size(), sc.shapes.size());
    // Rasterizing the named shape reproduces the stored mask exactly.
    const Mask m = mask_from_one_hot(s.mask);
    EXPECT_EQ(rasterize(sc.shapes[sc.target], H), m);
    EXPECT_GT(m.count(), 0u);
    EXPECT_LT(4 * m.count(), H * H);
    EXPECT_EQ(s.caption, caption_for(sc.shapes[sc.target]));
    EXPECT_EQ(s.tokens, tokenize(s.caption, 12));
    // Shapes do not overlap.
    Mask occ(H, H);
    for (const ShapeSpec& sh : sc.shapes) {
      Mask r = rasterize(sh, H);
      for (std::size_t i = 0; i < r.data.size(); ++i) {
        EXPECT_FALSE(r.data[i] && occ.data[i]);
        occ.data[i] |= r.data[i];
      }
    }
    // Image in [0, 1], channels identical, target region near its gray level.
    EXPECT_EQ(s.image.shape(), (Shape{3, H, H}));
    double sum = 0.0;
    for (std::size_t i = 0; i < H * H; ++i) {
      EXPECT_GE(s.image[i], 0.0);
      EXPECT_LE(s.image[i], 1.0);
      EXPECT_EQ(s.image[i], s.image[H * H + i]);
      EXPECT_EQ(s.image[i], s.image[2 * H * H + i]);
      if (m.data[i]) sum += s.image[i];
    }
    EXPECT_NEAR(sum / static_cast<double>(m.count()), sc.shapes[sc.target].gray, 0.03);
  }
}

TEST(Synth, NoiseLevel) {
  Dataset ds = synth_generate(8, 12, 64);
  double ss = 0.0;
  std::size_t n = 0;
  for (const Sample& s : ds.samples) {
    const Scene& sc = *s.scene;
    Mask occ(64, 64);
    for (const ShapeSpec& sh : sc.shapes) {
      Mask r = rasterize(sh, 64);
      for (std::size_t i = 0; i < r.data.size(); ++i) occ.data[i] |= r.data[i];
    }
    for (std::size_t i = 0; i < 64 * 64; ++i) {
      if (occ.data[i]) continue;
      const double d = s.image[i] - sc.background;
      ss += d * d;
      ++n;
    }
  }
  // Clamping at 0 only trims the low tail slightly for backgrounds >= 0.05.
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 0.05, 0.004);
}

TEST(Synth, CaptionClassesBalanced) {
  Dataset ds = synth_generate(9, 1000, 32);
  std::map<std::string, int> freq;
  for (const Sample& s : ds.samples) ++freq[s.caption];
  EXPECT_EQ(freq.size(), kCaptionClasses);
  const double uniform = 1000.0 / static_cast<double>(kCaptionClasses);
  for (const auto& [cap, n] : freq) {
    EXPECT_GE(n, 0.8 * uniform) << cap;
    EXPECT_LE(n, 1.2 * uniform) << cap;
  }
}

TEST(Synth, SplitsAndValidation) {
  Dataset ds = synth_generate(1, 200, 32);
  EXPECT_EQ(ds.manifest.val, 33u);
  EXPECT_EQ(ds.manifest.test, 33u);
  EXPECT_EQ(ds.manifest.train, 134u);
  EXPECT_EQ(ds.manifest.split_range("val"), (std::pair<std::size_t, std::size_t>{134, 167}));
  EXPECT_THROW(ds.manifest.split_range("dev"), ConfigError);
  EXPECT_THROW(synth_generate(1, 10, 48), ConfigError);
  EXPECT_THROW(synth_generate(1, 10, 16), ConfigError);
  EXPECT_THROW(synth_generate(1, 0, 32), ConfigError);
}

// ---------------------------------------------------------------------------
// Dataset directories

TEST(DatasetIo, RoundTrip) {
  Dataset ds = synth_generate(11, 13, 32);
  auto dir = temp_dir("dataset");
  save_dataset(dir.string(), ds);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "images" / "0012.seut"));
  EXPECT_TRUE(std::filesystem::exists(dir / "masks" / "0000.pgm"));
  Dataset back = load_dataset(dir.string());
  EXPECT_EQ(encode_manifest(back.manifest), encode_manifest(ds.manifest));
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_TRUE(bit_equal(back.samples[i].image, ds.samples[i].image));
    EXPECT_EQ(back.samples[i].mask, ds.samples[i].mask);
    EXPECT_EQ(back.samples[i].caption, ds.samples[i].caption);
    EXPECT_EQ(back.samples[i].tokens, ds.samples[i].tokens);
    EXPECT_FALSE(back.samples[i].scene.has_value());
  }
}

TEST(DatasetIo, ManifestValidation) {
  DatasetManifest m;
  m.count = 6;
  m.image_size = 32;
  m.max_tokens = 12;
  m.train = 4;
  m.val = m.test = 1;
  EXPECT_NO_THROW(decode_manifest(encode_manifest(m)));
  EXPECT_THROW(decode_manifest(encode_manifest(m) + "colour=red\n"), DataError);
  EXPECT_THROW(decode_manifest(encode_manifest(m) + "seed=4\n"), DataError);
  EXPECT_THROW(decode_manifest("seed=1\n"), DataError);
  m.train = 5;
  EXPECT_THROW(decode_manifest(encode_manifest(m)), DataError);
  std::string bad = encode_manifest(m);
  bad.replace(bad.find("seed=0"), 6, "seed=-1");
  EXPECT_THROW(decode_manifest(bad), DataError);
}

TEST(DatasetIo, BatchStacking) {
  Dataset ds = synth_generate(12, 6, 32);
  Batch b = make_batch(ds.samples, {4, 1});
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.masks.shape(), (Shape{2, 2, 32, 32}));
  EXPECT_EQ(b.images[3 * 32 * 32], ds.samples[1].image[0]);
  EXPECT_EQ(b.tokens[0], ds.samples[4].tokens);
  Batch nt = make_batch(ds.samples, {0}, true);
  EXPECT_EQ(nt.tokens[0], TokenIds(12, 0));
}
