#pragma once

// Synthetic referring segmentation: each image holds two or three shapes in
// distinct quadrants, and the caption names exactly one of them by shape and
// quadrant.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlseg/errors.hpp"
#include "vlseg/pgm.hpp"
#include "vlseg/random.hpp"
#include "vlseg/tensor.hpp"
#include "vlseg/vocab.hpp"

namespace vlseg {

enum class ShapeKind : std::uint8_t { disc, square, triangle };
enum class Quadrant : std::uint8_t { upper_left, upper_right, lower_left, lower_right };

inline constexpr std::array<ShapeKind, 3> kShapeKinds = {ShapeKind::disc, ShapeKind::square, ShapeKind::triangle};
inline constexpr std::array<Quadrant, 4> kQuadrants = {Quadrant::upper_left, Quadrant::upper_right,
                                                       Quadrant::lower_left, Quadrant::lower_right};
/// Shape x quadrant combinations a caption can name.
inline constexpr std::size_t kCaptionClasses = kShapeKinds.size() * kQuadrants.size();

inline const char* shape_word(ShapeKind k) {
  switch (k) {
    case ShapeKind::disc:
      return "disc";
    case ShapeKind::square:
      return "square";
    case ShapeKind::triangle:
      return "triangle";
  }
  return "?";
}

inline const char* quadrant_words(Quadrant q) {
  switch (q) {
    case Quadrant::upper_left:
      return "upper left";
    case Quadrant::upper_right:
      return "upper right";
    case Quadrant::lower_left:
      return "lower left";
    case Quadrant::lower_right:
      return "lower right";
  }
  return "?";
}

/// One placed shape. Geometry is in pixel units; pixel (y, x) is sampled at
/// its center (y + 0.5, x + 0.5).
struct ShapeSpec {
  ShapeKind kind = ShapeKind::disc;
  Quadrant quadrant = Quadrant::upper_left;
  double cy = 0.0, cx = 0.0;
  double size = 0.0;  // radius, half side, or half height of the triangle
  double gray = 0.0;

  /// Disc: inside the circle. Square: axis-aligned, half side `size`.
  /// Triangle: apex up at (cy - size, cx), base on y = cy + size spanning 2 size.
  bool contains(double py, double px) const {
    const double dy = py - cy, dx = px - cx;
    switch (kind) {
      case ShapeKind::disc:
        return dy * dy + dx * dx <= size * size;
      case ShapeKind::square:
        return std::abs(dy) <= size && std::abs(dx) <= size;
      case ShapeKind::triangle:
        return dy <= size && dy >= -size && std::abs(dx) <= (dy + size) / 2.0;
    }
    return false;
  }
};

inline Mask rasterize(const ShapeSpec& s, std::size_t H) {
  Mask m(H, H);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < H; ++x) {
      m.at(y, x) = s.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5) ? 1 : 0;
    }
  }
  return m;
}

struct Scene {
  std::vector<ShapeSpec> shapes;
  std::size_t target = 0;
  double background = 0.0;
};

inline std::string caption_for(const ShapeSpec& s) {
  return std::string("segment the ") + shape_word(s.kind) + " in the " + quadrant_words(s.quadrant);
}

struct Sample {
  Tensor image;  // [3, H, W] in [0, 1], the gray image replicated over channels
  TokenIds tokens;
  Tensor mask;  // one-hot [2, H, W]
  std::string caption;
  std::optional<Scene> scene;  // present for freshly generated samples
};

struct DatasetManifest {
  std::uint32_t format_version = 1;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::size_t image_size = 0;
  std::size_t max_tokens = 0;
  std::size_t train = 0, val = 0, test = 0;

  /// Sample indices [begin, end) of a named split.
  std::pair<std::size_t, std::size_t> split_range(const std::string& name) const {
    if (name == "train") return {0, train};
    if (name == "val") return {train, train + val};
    if (name == "test") return {train + val, train + val + test};
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
  }

  void validate() const {
    if (train + val + test != count) {
      throw DataError("split counts " + std::to_string(train) + "+" + std::to_string(val) + "+" +
                      std::to_string(test) + " do not sum to " + std::to_string(count));
    }
  }
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

struct SynthOptions {
  double noise_sigma = 0.05;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 3;
  double min_size_fraction = 0.55;  // shape size relative to a quarter of H
  double max_size_fraction = 0.85;
  std::size_t max_tokens = 12;
  std::size_t placement_retries = 100;
};

namespace detail {

// Shape gray levels; each scene draws distinct entries.
inline constexpr std::array<double, 4> kGrayLevels = {0.45, 0.6, 0.75, 0.9};

inline std::size_t quadrant_row(Quadrant q) { return q == Quadrant::lower_left || q == Quadrant::lower_right; }
inline std::size_t quadrant_col(Quadrant q) { return q == Quadrant::upper_right || q == Quadrant::lower_right; }

/// Places `kind` inside quadrant `q` leaving a one pixel margin, or nothing if
/// the drawn geometry does not fit.
inline std::optional<ShapeSpec> try_place(ShapeKind kind, Quadrant q, std::size_t H, Rng& rng,
                                          const SynthOptions& o) {
  const double half = static_cast<double>(H) / 2.0;
  const double size = rng.uniform(o.min_size_fraction, o.max_size_fraction) * half / 2.0;
  const double lo_y = static_cast<double>(quadrant_row(q)) * half, lo_x = static_cast<double>(quadrant_col(q)) * half;
  const double margin = 1.0 + size;
  if (half - 2.0 * margin <= 0.0) return std::nullopt;
  ShapeSpec s;
  s.kind = kind;
  s.quadrant = q;
  s.size = size;
  s.cy = rng.uniform(lo_y + margin, lo_y + half - margin);
  s.cx = rng.uniform(lo_x + margin, lo_x + half - margin);
  return s;
}

inline bool scene_valid(const Scene& scene, std::size_t H) {
  Mask occupied(H, H);
  for (const ShapeSpec& s : scene.shapes) {
    const Mask m = rasterize(s, H);
    const std::size_t n = m.count();
    if (n == 0 || 4 * n >= H * H) return false;
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      if (m.data[i] && occupied.data[i]) return false;
      occupied.data[i] |= m.data[i];
    }
  }
  return true;
}

}  // namespace detail

/// Scene whose target has the given shape and quadrant.
inline Scene generate_scene(ShapeKind target_kind, Quadrant target_quadrant, std::size_t H, Rng& rng,
                            const SynthOptions& o = {}) {
  for (;;) {
    Scene scene;
    scene.background = rng.uniform(0.05, 0.25);
    std::vector<Quadrant> others;
    for (Quadrant q : kQuadrants) {
      if (q != target_quadrant) others.push_back(q);
    }
    rng.shuffle(others);
    const std::size_t n_shapes = o.min_shapes + rng.index(o.max_shapes - o.min_shapes + 1);
    std::vector<double> grays(detail::kGrayLevels.begin(), detail::kGrayLevels.end());
    rng.shuffle(grays);
    bool ok = true;
    for (std::size_t k = 0; k < n_shapes && ok; ++k) {
      const Quadrant q = k == 0 ? target_quadrant : others[k - 1];
      const ShapeKind kind = k == 0 ? target_kind : kShapeKinds[rng.index(kShapeKinds.size())];
      std::optional<ShapeSpec> placed;
      for (std::size_t attempt = 0; attempt < o.placement_retries && !placed; ++attempt) {
        placed = detail::try_place(kind, q, H, rng, o);
      }
      if (!placed) {
        ok = false;
        break;
      }
      placed->gray = grays[k];
      scene.shapes.push_back(*placed);
    }
    if (ok && detail::scene_valid(scene, H)) return scene;
  }
}

inline Tensor render_scene(const Scene& scene, std::size_t H, Rng& rng, double noise_sigma) {
  Tensor gray({H, H}, scene.background);
  for (const ShapeSpec& s : scene.shapes) {
    const Mask m = rasterize(s, H);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      if (m.data[i]) gray[i] = s.gray;
    }
  }
  for (double& v : gray.data()) v = std::clamp(v + noise_sigma * rng.normal(), 0.0, 1.0);
  Tensor img({3, H, H});
  for (std::size_t c = 0; c < 3; ++c) {
    std::copy(gray.data().begin(), gray.data().end(), img.data().begin() + static_cast<std::ptrdiff_t>(c * H * H));
  }
  return img;
}

/// Deterministic dataset of `count` samples. Caption classes (shape x
/// quadrant) cycle through shuffled rounds of all twelve, so every class
/// appears count/12 times up to one. The last count/6 samples form the test
/// split and the count/6 before them the validation split.
inline Dataset synth_generate(std::uint64_t seed, std::size_t count, std::size_t H, const SynthOptions& o = {}) {
  if (H < 32 || (H & (H - 1)) != 0) throw ConfigError("image size must be a power of two >= 32, got " + std::to_string(H));
  if (count == 0) throw ConfigError("count must be positive");
  Rng rng(seed);
  std::vector<std::size_t> classes;
  while (classes.size() < count) {
    std::vector<std::size_t> round(kCaptionClasses);
    for (std::size_t c = 0; c < kCaptionClasses; ++c) round[c] = c;
    rng.shuffle(round);
    classes.insert(classes.end(), round.begin(), round.end());
  }
  Dataset ds;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng local(rng.fork());
    const ShapeKind kind = kShapeKinds[classes[i] / kQuadrants.size()];
    const Quadrant quad = kQuadrants[classes[i] % kQuadrants.size()];
    Sample s;
    s.scene = generate_scene(kind, quad, H, local, o);
    const ShapeSpec& target = s.scene->shapes[s.scene->target];
    s.image = render_scene(*s.scene, H, local, o.noise_sigma);
    s.caption = caption_for(target);
    s.tokens = tokenize(s.caption, o.max_tokens);
    s.mask = one_hot_from_mask(rasterize(target, H));
    ds.samples.push_back(std::move(s));
  }
  DatasetManifest& m = ds.manifest;
  m.seed = seed;
  m.count = count;
  m.image_size = H;
  m.max_tokens = o.max_tokens;
  m.val = count / 6;
  m.test = count / 6;
  m.train = count - m.val - m.test;
  return ds;
}

}  // namespace vlseg
