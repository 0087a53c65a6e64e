#pragma once

// Binary masks and their 8-bit PGM (P5) representation.

#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vlseg/errors.hpp"
#include "vlseg/tensor.hpp"
#include "vlseg/tensor_io.hpp"

namespace vlseg {

/// Row-major 0/1 mask.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

/// Foreground channel of a one-hot [2, H, W] tensor.
inline Mask mask_from_one_hot(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 2) throw DimensionError("expected a [2, H, W] mask, got " + shape_str(t.shape()));
  Mask m(t.dim(1), t.dim(2));
  const std::size_t hw = m.data.size();
  for (std::size_t i = 0; i < hw; ++i) m.data[i] = t[hw + i] > 0.5 ? 1 : 0;
  return m;
}

/// One-hot [2, H, W]: channel 0 background, channel 1 foreground.
inline Tensor one_hot_from_mask(const Mask& m) {
  Tensor t({2, m.height, m.width});
  const std::size_t hw = m.data.size();
  for (std::size_t i = 0; i < hw; ++i) {
    t[i] = m.data[i] ? 0.0 : 1.0;
    t[hw + i] = m.data[i] ? 1.0 : 0.0;
  }
  return t;
}

/// Channel argmax of probabilities [C, H, W] as a foreground mask (class != 0).
/// Ties resolve to the lower class index.
inline Mask argmax_mask(const Tensor& probs) {
  if (probs.rank() != 3) throw DimensionError("argmax_mask expects [C, H, W], got " + shape_str(probs.shape()));
  const std::size_t C = probs.dim(0);
  Mask m(probs.dim(1), probs.dim(2));
  const std::size_t hw = m.data.size();
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (probs[c * hw + i] > probs[best * hw + i]) best = c;
    }
    m.data[i] = best != 0 ? 1 : 0;
  }
  return m;
}

inline std::string encode_pgm(const Mask& m) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  out.reserve(out.size() + m.data.size());
  for (auto v : m.data) out.push_back(static_cast<char>(v ? 255 : 0));
  return out;
}

/// Parses a P5 file with maxval 255 whose pixels are all 0 or 255.
/// Header whitespace and '#' comments follow the netpbm rules.
inline Mask decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes.substr(0, 2) != "P5") throw FormatError("not a binary PGM: expected \"P5\"", 0);
  pos = 2;
  auto skip_space = [&] {
    bool any = false;
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        any = true;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
        any = true;
      } else {
        break;
      }
    }
    return any;
  };
  std::size_t start = 0;
  auto number = [&](const char* what) {
    if (!skip_space()) throw FormatError(std::string("expected whitespace before ") + what, pos);
    start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (std::size_t{1} << 31)) throw FormatError(std::string(what) + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("expected ") + what, start);
    return v;
  };
  const std::size_t width = number("width");
  if (width == 0) throw FormatError("PGM width must be positive", start);
  const std::size_t height = number("height");
  if (height == 0) throw FormatError("PGM height must be positive", start);
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw FormatError("maxval must be 255, got " + std::to_string(maxval), start);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("expected a single whitespace byte after maxval", pos);
  }
  ++pos;
  const std::size_t need = width * height;
  if (bytes.size() - pos != need) {
    throw FormatError("pixel data holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                          std::to_string(need),
                      bytes.size() - pos < need ? bytes.size() : pos + need);
  }
  Mask m(height, width);
  for (std::size_t i = 0; i < need; ++i) {
    const auto v = static_cast<unsigned char>(bytes[pos + i]);
    if (v != 0 && v != 255) throw FormatError("mask pixel value " + std::to_string(v) + " is not 0 or 255", pos + i);
    m.data[i] = v ? 1 : 0;
  }
  return m;
}

inline void write_pgm(const std::string& path, const Mask& m) { write_file_bytes(path, encode_pgm(m)); }

inline Mask read_pgm(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  try {
    return decode_pgm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.detail(), e.offset());
  }
}

}  // namespace vlseg
