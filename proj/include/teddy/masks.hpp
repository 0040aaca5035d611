#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "teddy/core.hpp"

namespace teddy {

enum class Provenance { Partitioner, OracleGT, Ingested };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::Partitioner: return "partitioner";
    case Provenance::OracleGT: return "oracle";
    case Provenance::Ingested: return "ingested";
  }
  return "ingested";
}

inline Provenance provenance_from_string(std::string_view s) {
  if (s == "partitioner") return Provenance::Partitioner;
  if (s == "oracle") return Provenance::OracleGT;
  if (s == "ingested") return Provenance::Ingested;
  throw Error("unknown mask provenance '" + std::string(s) + "'");
}

using Mask = std::vector<std::uint8_t>;

/// m class-agnostic binary masks over an H x W grid.
class BinaryMaskSet {
 public:
  BinaryMaskSet() = default;
  BinaryMaskSet(int height, int width, Provenance provenance)
      : height_(height), width_(width), provenance_(provenance) {}

  int height() const { return height_; }
  int width() const { return width_; }
  int pixels() const { return height_ * width_; }
  int count() const { return static_cast<int>(masks_.size()); }
  bool empty() const { return masks_.empty(); }
  Provenance provenance() const { return provenance_; }
  void set_provenance(Provenance p) { provenance_ = p; }

  const Mask& mask(int k) const { return masks_.at(k); }
  int area(int k) const { return areas_.at(k); }
  const std::vector<Mask>& masks() const { return masks_; }

  void add(Mask m) {
    if (static_cast<int>(m.size()) != pixels()) throw ShapeError("mask size does not match set");
    int a = 0;
    for (auto v : m) {
      if (v > 1) throw Error("mask values must be 0 or 1");
      a += v;
    }
    masks_.push_back(std::move(m));
    areas_.push_back(a);
  }

  // Non-fatal notes from the provider, e.g. everything was filtered out.
  std::vector<std::string>& warnings() { return warnings_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  bool valid(int min_area = 1) const {
    for (int k = 0; k < count(); ++k) {
      const int a = std::accumulate(masks_[k].begin(), masks_[k].end(), 0);
      if (a != areas_[k] || a < min_area) return false;
    }
    return true;
  }

  // Provenance and warnings do not take part in equality.
  friend bool operator==(const BinaryMaskSet& a, const BinaryMaskSet& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.masks_ == b.masks_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  Provenance provenance_ = Provenance::Ingested;
  std::vector<Mask> masks_;
  std::vector<int> areas_;
  std::vector<std::string> warnings_;
};

namespace detail {

// 4-connected components of equal key, discovered in raster order.
inline std::vector<std::vector<int>> components(const std::vector<int>& key, int H, int W) {
  std::vector<int> comp(key.size(), -1);
  std::vector<std::vector<int>> out;
  std::vector<int> stack;
  for (int start = 0; start < H * W; ++start) {
    if (comp[start] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    comp[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      out[id].push_back(p);
      const int h = p / W, w = p % W;
      const int nbr[4][2] = {{h - 1, w}, {h + 1, w}, {h, w - 1}, {h, w + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= H || n[1] < 0 || n[1] >= W) continue;
        const int q = n[0] * W + n[1];
        if (comp[q] < 0 && key[q] == key[p]) {
          comp[q] = id;
          stack.push_back(q);
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic stand-in for a class-agnostic proposal model: quantize each
/// channel to quant_levels levels and return the 4-connected components of
/// equal quantized color with area >= min_area. Masks are pairwise disjoint.
inline BinaryMaskSet partition_components(const ScoreMap& image, int quant_levels, int min_area) {
  if (quant_levels < 2) throw ConfigError("partitioner needs at least 2 quantization levels");
  const int H = image.height(), W = image.width();
  std::vector<int> key(H * W, 0);
  for (int i = 0; i < H * W; ++i) {
    int k = 0;
    for (int c = 0; c < image.channels(); ++c) {
      const double v = std::clamp(image.at(c, i), 0.0, 1.0);
      const int q = std::min(quant_levels - 1, static_cast<int>(v * quant_levels));
      k = k * quant_levels + q;
    }
    key[i] = k;
  }
  BinaryMaskSet set(H, W, Provenance::Partitioner);
  for (const auto& comp : detail::components(key, H, W)) {
    if (static_cast<int>(comp.size()) < min_area) continue;
    Mask m(H * W, 0);
    for (int p : comp) m[p] = 1;
    set.add(std::move(m));
  }
  if (set.empty())
    set.warnings().push_back("partitioner produced no masks (min_area " +
                             std::to_string(min_area) + ")");
  return set;
}

/// One mask per connected component of every foreground class of gt.
inline BinaryMaskSet oracle_masks(const LabelMap& gt) {
  BinaryMaskSet set(gt.height, gt.width, Provenance::OracleGT);
  for (const auto& comp : detail::components(gt.labels, gt.height, gt.width)) {
    if (gt.labels[comp.front()] == ClassSpace::kBackground) continue;
    Mask m(gt.pixels(), 0);
    for (int p : comp) m[p] = 1;
    set.add(std::move(m));
  }
  return set;
}

}  // namespace teddy
