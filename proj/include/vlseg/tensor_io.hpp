#pragma once

// SEUT container: named f64 tensors in one little-endian file.
//
//   "SEUT" | u32 version | u32 count | count x entry
//   entry: u16 name length | UTF-8 name | u8 rank | rank x u64 extent | f64 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vlseg/errors.hpp"
#include "vlseg/tensor.hpp"

namespace vlseg {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kSeutVersion = 1;
inline constexpr std::size_t kSeutHeaderBytes = 12;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

/// Cursor over a byte buffer; every read failure reports the offset it started at.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated file: expected ") + what + " (" + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left)",
                        pos_);
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xe0) == 0xc0) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) || cp > 0x10ffff ||
        (cp >= 0xd800 && cp <= 0xdfff)) {
      return false;
    }
    i += len;
  }
  return true;
}

}  // namespace detail

inline std::string encode_seut(const NamedTensors& tensors) {
  std::string out = "SEUT";
  detail::put_le<std::uint32_t>(out, kSeutVersion);
  if (tensors.size() > UINT32_MAX) throw ContractError("too many tensors for one container");
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > UINT16_MAX) throw ContractError("tensor name longer than 65535 bytes: " + name.substr(0, 32));
    if (!detail::valid_utf8(name)) throw ContractError("tensor name is not valid UTF-8");
    if (t.empty() || t.rank() == 0 || t.rank() > UINT8_MAX) {
      throw ContractError("cannot store tensor '" + name + "' of shape " + shape_str(t.shape()));
    }
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le<std::uint64_t>(out, e);
    for (double v : t.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline NamedTensors decode_seut(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.take(4, "magic") != "SEUT") throw FormatError("bad magic, expected \"SEUT\"", 0);
  const std::size_t version_at = in.offset();
  const auto version = in.le<std::uint32_t>("version");
  if (version != kSeutVersion) {
    throw FormatError("unsupported SEUT version " + std::to_string(version), version_at);
  }
  const auto count = in.le<std::uint32_t>("entry count");
  NamedTensors out;
  std::set<std::string, std::less<>> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.le<std::uint16_t>("name length");
    const std::size_t name_at = in.offset();
    const std::string_view name = in.take(name_len, "tensor name");
    if (!detail::valid_utf8(name)) throw FormatError("tensor name is not valid UTF-8", name_at);
    if (!seen.emplace(name).second) throw FormatError("duplicate tensor name '" + std::string(name) + "'", name_at);
    const std::size_t rank_at = in.offset();
    const auto rank = in.le<std::uint8_t>("rank");
    if (rank == 0) throw FormatError("tensor '" + std::string(name) + "' has rank 0", rank_at);
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t extent_at = in.offset();
      const auto e = in.le<std::uint64_t>("extent");
      if (e == 0) throw FormatError("tensor '" + std::string(name) + "' has a zero extent", extent_at);
      // Every element needs 8 payload bytes, so a product beyond that is already truncated.
      if (e > in.remaining() / 8 / numel + 1) {
        throw FormatError("tensor '" + std::string(name) + "' extents exceed the file size", extent_at);
      }
      shape[d] = static_cast<std::size_t>(e);
      numel *= shape[d];
    }
    std::vector<double> data(numel);
    const std::size_t payload_at = in.offset();
    if (in.remaining() / 8 < numel) {
      throw FormatError("truncated payload for tensor '" + std::string(name) + "': need " +
                            std::to_string(numel * 8) + " bytes, " + std::to_string(in.remaining()) + " left",
                        payload_at);
    }
    for (double& v : data) v = std::bit_cast<double>(in.le<std::uint64_t>("payload"));
    out.emplace_back(std::string(name), Tensor(std::move(shape), std::move(data)));
  }
  if (in.remaining() != 0) {
    throw FormatError(std::to_string(in.remaining()) + " trailing bytes after the last entry", in.offset());
  }
  return out;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path + "' failed");
}

inline void save_tensors(const std::string& path, const NamedTensors& tensors) {
  write_file_bytes(path, encode_seut(tensors));
}

/// Parse errors carry the file name in front of the positioned message.
inline NamedTensors load_tensors(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  try {
    return decode_seut(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.detail(), e.offset());
  }
}

/// Tensor with the given name, or DataError.
inline const Tensor& find_tensor(const NamedTensors& tensors, std::string_view name) {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw DataError("missing tensor '" + std::string(name) + "'");
}

}  // namespace vlseg
