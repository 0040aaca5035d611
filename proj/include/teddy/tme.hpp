#pragma once

#include <span>
#include <vector>

#include "teddy/binarize.hpp"
#include "teddy/core.hpp"
#include "teddy/localizer.hpp"

namespace teddy {

struct TmeReport {
  int violating_pixels = 0;
  std::vector<std::uint8_t> violation_mask;
  bool enforced = false;
};

/// A pixel violates mutual exclusivity when the binarized old prediction is
/// foreground there and the new-class one-hot of the seed map is too.
/// new_channels addresses the C^t channels of the seed map (channel 0 is b).
inline TmeReport tme_check(const BinaryPrediction& r_old, const SeedMap& seed,
                           std::span<const int> new_channels) {
  if (!r_old.map.same_extent(seed.scores)) throw ShapeError("R_old and S differ in H x W");
  std::vector<int> with_bg{0};
  with_bg.insert(with_bg.end(), new_channels.begin(), new_channels.end());
  const ScoreMap delta = one_hot(select_channels(seed.scores, with_bg), /*drop_background=*/true);
  TmeReport rep;
  rep.enforced = seed.tme_mask.has_value();
  rep.violation_mask.assign(seed.scores.pixels(), 0);
  for (int i = 0; i < seed.scores.pixels(); ++i) {
    if (r_old.norm(i) == 0) continue;
    bool fg = false;
    for (int c = 0; c < delta.channels(); ++c) fg = fg || delta.at(c, i) != 0.0;
    if (fg) {
      rep.violation_mask[i] = 1;
      ++rep.violating_pixels;
    }
  }
  return rep;
}

/// Zeros every channel of S at pixels where R_old is foreground and marks
/// them in tme_mask. Other pixels are copied unchanged.
inline SeedMap tme_enforce(const BinaryPrediction& r_old, const SeedMap& seed) {
  if (!r_old.map.same_extent(seed.scores)) throw ShapeError("R_old and S differ in H x W");
  SeedMap out = seed;
  std::vector<std::uint8_t> mask =
      seed.tme_mask ? *seed.tme_mask : std::vector<std::uint8_t>(seed.scores.pixels(), 0);
  for (int i = 0; i < seed.scores.pixels(); ++i) {
    if (r_old.norm(i) == 0) continue;
    mask[i] = 1;
    for (int c = 0; c < out.scores.channels(); ++c) out.scores.at(c, i) = 0.0;
  }
  out.tme_mask = std::move(mask);
  return out;
}

}  // namespace teddy
