#pragma once

#include <span>
#include <vector>

#include "teddy/core.hpp"
#include "teddy/masks.hpp"

namespace teddy {

/// Mask-to-class assignment. Row-major [masks x classes].
struct MaskAssignment {
  int masks = 0;
  int classes = 0;
  std::vector<std::uint8_t> K;
  std::vector<double> ratio;
  std::vector<int> intersection;
  // Masks that had more than one class above the threshold.
  int dual_candidates = 0;

  std::uint8_t k(int m, int c) const { return K[static_cast<std::size_t>(m) * classes + c]; }
  double r(int m, int c) const { return ratio[static_cast<std::size_t>(m) * classes + c]; }
  int row_sum(int m) const {
    int s = 0;
    for (int c = 0; c < classes; ++c) s += k(m, c);
    return s;
  }
};

inline void check_threshold(double t) {
  if (!(t >= 0.5 && t <= 1.0)) throw ConfigError("binarization threshold must lie in [0.5, 1]");
}

/// A mask belongs to class c when |pred_c & M| / min(|pred_c|, |M|) > alpha.
/// The ratio is 0 when either area is 0. When several classes qualify, the
/// largest intersection wins, then the lowest class id.
inline MaskAssignment assign_masks(const ScoreMap& pred_onehot, const BinaryMaskSet& masks,
                                   double alpha, std::span<const int> class_ids) {
  check_threshold(alpha);
  if (pred_onehot.height() != masks.height() || pred_onehot.width() != masks.width())
    throw ShapeError("prediction and masks differ in H x W");
  if (static_cast<int>(class_ids.size()) != pred_onehot.channels())
    throw ShapeError("class id list does not match prediction channels");
  MaskAssignment a;
  a.masks = masks.count();
  a.classes = pred_onehot.channels();
  const std::size_t cells = static_cast<std::size_t>(a.masks) * a.classes;
  a.K.assign(cells, 0);
  a.ratio.assign(cells, 0.0);
  a.intersection.assign(cells, 0);

  std::vector<int> pred_area(a.classes, 0);
  for (int c = 0; c < a.classes; ++c)
    for (double v : pred_onehot.channel(c)) pred_area[c] += v != 0.0;

  for (int m = 0; m < a.masks; ++m) {
    const Mask& mask = masks.mask(m);
    int best = -1;
    int candidates = 0;
    for (int c = 0; c < a.classes; ++c) {
      auto pc = pred_onehot.channel(c);
      int inter = 0;
      for (int i = 0; i < masks.pixels(); ++i) inter += (mask[i] && pc[i] != 0.0);
      const int denom = std::min(pred_area[c], masks.area(m));
      const double ratio = denom == 0 ? 0.0 : static_cast<double>(inter) / denom;
      const std::size_t idx = static_cast<std::size_t>(m) * a.classes + c;
      a.ratio[idx] = ratio;
      a.intersection[idx] = inter;
      if (ratio > alpha) {
        ++candidates;
        if (best < 0) {
          best = c;
        } else {
          const int bi = a.intersection[static_cast<std::size_t>(m) * a.classes + best];
          if (inter > bi || (inter == bi && class_ids[c] < class_ids[best])) best = c;
        }
      }
    }
    if (candidates > 1) ++a.dual_candidates;
    if (best >= 0) a.K[static_cast<std::size_t>(m) * a.classes + best] = 1;
  }
  return a;
}

enum class PredictionSource { OldModel, SeedMap };

struct BinaryPrediction {
  ScoreMap map;                // Binary, one channel per class id
  std::vector<int> class_ids;  // class carried by each channel
  double threshold = 0.0;
  PredictionSource source = PredictionSource::OldModel;
  MaskAssignment assignment;
  int conflict_pixels = 0;     // pixels where several classes collided

  // 1 if pixel i carries any foreground class.
  int norm(int i) const {
    int s = 0;
    for (int c = 0; c < map.channels(); ++c) s += map.at(c, i) != 0.0;
    return s;
  }
};

/// Projects a dense prediction onto class-assigned unions of masks.
/// input channel 0 is background; `channels` lists the foreground channels
/// of input to binarize, and class_ids names them. The argmax is taken over
/// {0} + channels with background dropped.
inline BinaryPrediction binarize(const ScoreMap& input, const BinaryMaskSet& masks,
                                 double threshold, std::span<const int> channels,
                                 std::span<const int> class_ids,
                                 PredictionSource source = PredictionSource::OldModel) {
  check_threshold(threshold);
  if (input.height() != masks.height() || input.width() != masks.width())
    throw ShapeError("prediction and masks differ in H x W");
  if (channels.size() != class_ids.size()) throw ShapeError("channels and class ids differ");
  std::vector<int> with_bg{0};
  with_bg.insert(with_bg.end(), channels.begin(), channels.end());
  const ScoreMap onehot = one_hot(select_channels(input, with_bg), /*drop_background=*/true);

  BinaryPrediction out;
  out.class_ids.assign(class_ids.begin(), class_ids.end());
  out.threshold = threshold;
  out.source = source;
  out.assignment = assign_masks(onehot, masks, threshold, class_ids);
  const int n = onehot.channels();
  out.map = ScoreMap(n, input.height(), input.width(), Semantics::Binary);

  for (int m = 0; m < masks.count(); ++m)
    for (int c = 0; c < n; ++c) {
      if (!out.assignment.k(m, c)) continue;
      const Mask& mask = masks.mask(m);
      for (int i = 0; i < masks.pixels(); ++i)
        if (mask[i]) out.map.at(c, i) = 1.0;  // clamp_unit of the mask sum
    }

  // Overlapping masks may give a pixel several classes: keep the class of the
  // pixel's own argmax if it is among them, else the lowest class id.
  for (int i = 0; i < out.map.pixels(); ++i) {
    if (out.norm(i) <= 1) continue;
    ++out.conflict_pixels;
    int keep = -1;
    for (int c = 0; c < n; ++c)
      if (out.map.at(c, i) != 0.0 && onehot.at(c, i) != 0.0) keep = c;
    if (keep < 0)
      for (int c = 0; c < n; ++c)
        if (out.map.at(c, i) != 0.0 && (keep < 0 || class_ids[c] < class_ids[keep])) keep = c;
    for (int c = 0; c < n; ++c) out.map.at(c, i) = c == keep ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace teddy
