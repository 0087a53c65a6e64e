#pragma once

// Dataset directories and batching.
//
//   manifest.txt       key=value lines
//   images/NNNN.seut   one tensor named "image", [3, H, W]
//   masks/NNNN.pgm     target mask, foreground 255
//   captions.txt       one caption per sample, in index order

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlseg/errors.hpp"
#include "vlseg/pgm.hpp"
#include "vlseg/synth.hpp"
#include "vlseg/tensor_io.hpp"
#include "vlseg/vocab.hpp"

namespace vlseg {

inline std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

namespace detail {

template <typename T>
T parse_unsigned(const std::string& key, const std::string& v, const std::string& where) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError(where + ": '" + key + "' needs a nonnegative integer, got '" + v + "'");
  }
  return out;
}

}  // namespace detail

inline std::string encode_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "format_version=" << m.format_version << '\n'
     << "seed=" << m.seed << '\n'
     << "count=" << m.count << '\n'
     << "image_size=" << m.image_size << '\n'
     << "max_tokens=" << m.max_tokens << '\n'
     << "train=" << m.train << '\n'
     << "val=" << m.val << '\n'
     << "test=" << m.test << '\n';
  return os.str();
}

inline DatasetManifest decode_manifest(const std::string& text, const std::string& where = "manifest") {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw DataError(where + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (!kv.emplace(key, trim(std::string_view(t).substr(eq + 1))).second) {
      throw DataError(where + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  DatasetManifest m;
  auto take = [&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError(where + ": missing key '" + std::string(key) + "'");
    field = detail::parse_unsigned<std::remove_reference_t<decltype(field)>>(key, it->second, where);
    kv.erase(it);
  };
  take("format_version", m.format_version);
  take("seed", m.seed);
  take("count", m.count);
  take("image_size", m.image_size);
  take("max_tokens", m.max_tokens);
  take("train", m.train);
  take("val", m.val);
  take("test", m.test);
  if (!kv.empty()) throw DataError(where + ": unknown key '" + kv.begin()->first + "'");
  if (m.format_version != 1) throw DataError(where + ": unsupported format_version " + std::to_string(m.format_version));
  m.validate();
  return m;
}

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir + "': " + ec.message());
  write_file_bytes((fs::path(dir) / "manifest.txt").string(), encode_manifest(ds.manifest));
  std::string captions;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    save_tensors((fs::path(dir) / "images" / (sample_stem(i) + ".seut")).string(), {{"image", s.image}});
    write_pgm((fs::path(dir) / "masks" / (sample_stem(i) + ".pgm")).string(), mask_from_one_hot(s.mask));
    captions += s.caption + '\n';
  }
  write_file_bytes((fs::path(dir) / "captions.txt").string(), captions);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.txt").string();
  Dataset ds;
  ds.manifest = decode_manifest(read_file_bytes(manifest_path), manifest_path);
  const DatasetManifest& m = ds.manifest;
  std::vector<std::string> captions;
  {
    std::istringstream in(read_file_bytes((fs::path(dir) / "captions.txt").string()));
    std::string line;
    while (std::getline(in, line)) captions.push_back(trim(line));
  }
  if (captions.size() != m.count) {
    throw DataError(dir + "/captions.txt: " + std::to_string(captions.size()) + " captions for " +
                    std::to_string(m.count) + " samples");
  }
  const std::size_t H = m.image_size;
  ds.samples.reserve(m.count);
  for (std::size_t i = 0; i < m.count; ++i) {
    const std::string img_path = (fs::path(dir) / "images" / (sample_stem(i) + ".seut")).string();
    const std::string mask_path = (fs::path(dir) / "masks" / (sample_stem(i) + ".pgm")).string();
    Sample s;
    s.image = find_tensor(load_tensors(img_path), "image");
    if (s.image.shape() != Shape{3, H, H}) {
      throw DataError(img_path + ": image shape " + shape_str(s.image.shape()) + ", expected [3, " +
                      std::to_string(H) + ", " + std::to_string(H) + "]");
    }
    const Mask mask = read_pgm(mask_path);
    if (mask.height != H || mask.width != H) throw DataError(mask_path + ": mask extent does not match image_size");
    s.mask = one_hot_from_mask(mask);
    s.caption = captions[i];
    s.tokens = tokenize(s.caption, m.max_tokens);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

struct Batch {
  Tensor images;  // [B, 3, H, W]
  std::vector<TokenIds> tokens;
  Tensor masks;  // [B, 2, H, W]
};

/// Stacks the listed samples; `drop_text` replaces every caption with padding.
inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx,
                        bool drop_text = false) {
  if (idx.empty()) throw ContractError("make_batch: empty index list");
  const Sample& first = samples.at(idx[0]);
  const std::size_t H = first.image.dim(1), W = first.image.dim(2), N = first.tokens.size();
  Batch b;
  b.images = Tensor({idx.size(), 3, H, W});
  b.masks = Tensor({idx.size(), 2, H, W});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Sample& s = samples.at(idx[k]);
    if (s.image.shape() != first.image.shape() || s.mask.shape() != first.mask.shape()) {
      throw DimensionError("make_batch: samples differ in shape");
    }
    std::copy(s.image.data().begin(), s.image.data().end(),
              b.images.data().begin() + static_cast<std::ptrdiff_t>(k * s.image.numel()));
    std::copy(s.mask.data().begin(), s.mask.data().end(),
              b.masks.data().begin() + static_cast<std::ptrdiff_t>(k * s.mask.numel()));
    b.tokens.push_back(drop_text ? TokenIds(N, Vocab::kPad) : s.tokens);
  }
  return b;
}

}  // namespace vlseg
