#pragma once

// Overlap metrics on binary masks.

#include "vlseg/errors.hpp"
#include "vlseg/pgm.hpp"

namespace vlseg {

namespace detail {

inline void require_same_extent(const Mask& a, const Mask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(op) + ": masks " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " and " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

inline double iou_of(const Mask& p, const Mask& g, std::uint8_t cls) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const bool a = p.data[i] == cls, b = g.data[i] == cls;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

/// 2|P and G| / (|P| + |G|); two empty masks score 1.
inline double dice_score(const Mask& pred, const Mask& gt) {
  detail::require_same_extent(pred, gt, "dice_score");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    inter += pred.data[i] && gt.data[i];
    p += pred.data[i];
    g += gt.data[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

/// Mean of foreground and background IoU; a class absent from both scores 1.
inline double miou(const Mask& pred, const Mask& gt) {
  detail::require_same_extent(pred, gt, "miou");
  return 0.5 * (detail::iou_of(pred, gt, 1) + detail::iou_of(pred, gt, 0));
}

}  // namespace vlseg
