#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "teddy/core.hpp"
#include "teddy/rng.hpp"

namespace teddy {

class GtAccessError : public Error {
 public:
  using Error::Error;
};

enum class ShapeKind { Rectangle, Disc, Triangle, Diamond };

inline std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Disc: return "disc";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Diamond: return "diamond";
  }
  return "rectangle";
}

inline ShapeKind shape_kind_from_string(std::string_view s) {
  if (s == "rectangle") return ShapeKind::Rectangle;
  if (s == "disc") return ShapeKind::Disc;
  if (s == "triangle") return ShapeKind::Triangle;
  if (s == "diamond") return ShapeKind::Diamond;
  throw ConfigError("unknown shape kind '" + std::string(s) + "'");
}

struct CatalogEntry {
  int class_id = 0;
  ShapeKind shape = ShapeKind::Rectangle;
  std::array<double, 3> color{0.0, 0.0, 0.0};

  friend bool operator==(const CatalogEntry&, const CatalogEntry&) = default;
};

struct DatasetConfig {
  int height = 32;
  int width = 32;
  int min_shapes = 1;
  int max_shapes = 3;
  int min_size = 6;
  int max_size = 12;
  std::vector<CatalogEntry> catalog;
  std::array<double, 3> background_color{0.15, 0.15, 0.15};
  double background_noise = 0.1;
  // Per-shape uniform color offset; each shape stays flat.
  double color_jitter = 0.0;
  std::uint64_t seed = 7;

  // Six classes, colors at distinct RGB cube corners.
  static DatasetConfig shapes_world() {
    DatasetConfig cfg;
    cfg.catalog = {
        {1, ShapeKind::Rectangle, {0.9, 0.1, 0.1}}, {2, ShapeKind::Disc, {0.1, 0.9, 0.1}},
        {3, ShapeKind::Triangle, {0.1, 0.1, 0.9}},  {4, ShapeKind::Diamond, {0.9, 0.9, 0.1}},
        {5, ShapeKind::Disc, {0.9, 0.1, 0.9}},      {6, ShapeKind::Rectangle, {0.1, 0.9, 0.9}},
    };
    return cfg;
  }

  void validate() const {
    if (height < 8 || width < 8) throw ConfigError("dataset H and W must be >= 8");
    if (catalog.empty()) throw ConfigError("class catalog is empty");
    if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("bad shapes-per-image range");
    if (min_size < 2 || max_size < min_size || max_size > std::min(height, width))
      throw ConfigError("bad shape size range");
    std::set<int> ids;
    for (const auto& e : catalog) {
      if (e.class_id <= 0 || e.class_id > 255) throw ConfigError("class ids must be in [1,255]");
      if (!ids.insert(e.class_id).second) throw ConfigError("duplicate class id in catalog");
    }
  }

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ImageSample {
  std::string id;
  ScoreMap pixels;  // [3 x H x W] in [0,1]
  LabelMap gt_labels;
  // Binary vector; over the catalog after generation, over C^t after a split.
  std::vector<int> image_level;

  std::set<int> present_classes() const {
    std::set<int> s;
    for (int l : gt_labels.labels)
      if (l != ClassSpace::kBackground) s.insert(l);
    return s;
  }

  friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

/// y over class list: 1 where gt_labels contains the class.
inline std::vector<int> image_level_of(const ImageSample& sample, std::span<const int> classes) {
  const auto present = sample.present_classes();
  std::vector<int> y(classes.size(), 0);
  for (std::size_t k = 0; k < classes.size(); ++k) y[k] = present.count(classes[k]) ? 1 : 0;
  return y;
}

inline std::vector<int> image_level_of(const ImageSample& sample, const ClassSpace& space) {
  return image_level_of(sample, space.new_classes());
}

namespace detail {

inline bool shape_covers(ShapeKind kind, int size, int dy, int dx) {
  const double half = size / 2.0;
  const double cy = dy + 0.5 - half;
  const double cx = dx + 0.5 - half;
  switch (kind) {
    case ShapeKind::Rectangle: return true;
    case ShapeKind::Disc: return cy * cy + cx * cx <= half * half;
    case ShapeKind::Diamond: return std::abs(cy) + std::abs(cx) <= half;
    case ShapeKind::Triangle: {
      // Apex at the top row, base along the bottom row.
      const double rel = (dy + 1.0) / size;
      return std::abs(cx) <= half * rel;
    }
  }
  return false;
}

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Renders n images of non-overlapping flat shapes on a noisy background.
/// Output is a deterministic function of (cfg, n); pixel values are
/// f32-representable so they survive f32 storage exactly.
inline std::vector<ImageSample> gen_shapes(const DatasetConfig& cfg, int n) {
  cfg.validate();
  if (n < 1) throw ConfigError("gen_shapes needs n >= 1");
  Rng rng(cfg.seed);
  std::vector<ImageSample> out;
  out.reserve(n);
  const int H = cfg.height, W = cfg.width;
  for (int s = 0; s < n; ++s) {
    ImageSample sample;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05d", s);
    sample.id = buf;
    sample.pixels = ScoreMap(3, H, W, Semantics::Scores);
    sample.gt_labels = LabelMap(H, W, ClassSpace::kBackground);
    for (int i = 0; i < H * W; ++i)
      for (int c = 0; c < 3; ++c) {
        const double v = cfg.background_color[c] +
                         rng.uniform(-cfg.background_noise, cfg.background_noise);
        sample.pixels.at(c, i) = detail::to_f32(std::clamp(v, 0.0, 1.0));
      }

    struct Box {
      int y0, x0, size;
    };
    std::vector<Box> placed;
    const int count = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
    for (int k = 0; k < count; ++k) {
      const auto& entry = cfg.catalog[rng.uniform_int(0, static_cast<int>(cfg.catalog.size()) - 1)];
      const int size = rng.uniform_int(cfg.min_size, cfg.max_size);
      std::array<double, 3> color = entry.color;
      for (double& ch : color)
        ch = detail::to_f32(std::clamp(ch + rng.uniform(-cfg.color_jitter, cfg.color_jitter), 0.0, 1.0));
      bool ok = false;
      Box box{};
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        box = {rng.uniform_int(0, H - size), rng.uniform_int(0, W - size), size};
        ok = true;
        // One-pixel gap keeps distinct shapes in distinct 4-connected components.
        for (const Box& b : placed) {
          const bool apart = box.y0 >= b.y0 + b.size + 1 || b.y0 >= box.y0 + box.size + 1 ||
                             box.x0 >= b.x0 + b.size + 1 || b.x0 >= box.x0 + box.size + 1;
          if (!apart) {
            ok = false;
            break;
          }
        }
      }
      if (!ok) continue;
      placed.push_back(box);
      for (int dy = 0; dy < size; ++dy)
        for (int dx = 0; dx < size; ++dx) {
          if (!detail::shape_covers(entry.shape, size, dy, dx)) continue;
          const int h = box.y0 + dy, w = box.x0 + dx;
          sample.gt_labels.at(h, w) = entry.class_id;
          for (int c = 0; c < 3; ++c) sample.pixels.at(c, h, w) = color[c];
        }
    }
    std::vector<int> ids;
    for (const auto& e : cfg.catalog) ids.push_back(e.class_id);
    sample.image_level = image_level_of(sample, ids);
    out.push_back(std::move(sample));
  }
  return out;
}

enum class SplitMode { Disjoint, Overlap };

inline std::string_view to_string(SplitMode m) {
  return m == SplitMode::Disjoint ? "disjoint" : "overlap";
}

inline SplitMode split_mode_from_string(std::string_view s) {
  if (s == "disjoint") return SplitMode::Disjoint;
  if (s == "overlap") return SplitMode::Overlap;
  throw ConfigError("unknown split mode '" + std::string(s) + "'");
}

class StepDataset;

// While alive, eval-only ground truth of the dataset cannot be read.
class TrainingGuard {
 public:
  explicit TrainingGuard(const StepDataset& ds);
  ~TrainingGuard();
  TrainingGuard(const TrainingGuard&) = delete;
  TrainingGuard& operator=(const TrainingGuard&) = delete;

 private:
  const StepDataset& ds_;
};

/// Samples of one incremental step. For t > 0 the pixel labels are
/// eval-only: reading them while a TrainingGuard is alive throws.
class StepDataset {
 public:
  StepDataset() = default;
  StepDataset(int step, ClassSpace space, SplitMode mode, std::vector<ImageSample> samples)
      : step_(step), space_(std::move(space)), mode_(mode), samples_(std::move(samples)) {}

  int step() const { return step_; }
  const ClassSpace& class_space() const { return space_; }
  SplitMode mode() const { return mode_; }
  int size() const { return static_cast<int>(samples_.size()); }
  bool gt_eval_only() const { return step_ > 0; }
  bool training() const { return training_depth_ > 0; }

  const std::string& id(int i) const { return samples_.at(i).id; }
  const ScoreMap& pixels(int i) const { return samples_.at(i).pixels; }
  const std::vector<int>& image_level(int i) const { return samples_.at(i).image_level; }

  // Full ground truth, for evaluation and for mask oracles run ahead of training.
  const LabelMap& gt(int i) const {
    check_gt_access();
    return samples_.at(i).gt_labels;
  }

  // Step-0 supervision: gt with every class outside Y^0 mapped to background.
  LabelMap training_labels(int i) const {
    if (step_ != 0) throw GtAccessError("pixel labels are only available at step 0");
    LabelMap l = samples_.at(i).gt_labels;
    for (int& v : l.labels)
      if (space_.channel_of(v) < 0) v = ClassSpace::kBackground;
    return l;
  }

  const std::vector<ImageSample>& samples() const {
    check_gt_access();
    return samples_;
  }

  friend bool operator==(const StepDataset& a, const StepDataset& b) {
    return a.step_ == b.step_ && a.space_ == b.space_ && a.mode_ == b.mode_ &&
           a.samples_ == b.samples_;
  }

 private:
  friend class TrainingGuard;

  void check_gt_access() const {
    if (gt_eval_only() && training())
      throw GtAccessError("step " + std::to_string(step_) +
                          " ground truth is eval-only and was read during training");
  }

  int step_ = 0;
  ClassSpace space_;
  SplitMode mode_ = SplitMode::Overlap;
  std::vector<ImageSample> samples_;
  mutable int training_depth_ = 0;
};

inline TrainingGuard::TrainingGuard(const StepDataset& ds) : ds_(ds) { ++ds_.training_depth_; }
inline TrainingGuard::~TrainingGuard() { --ds_.training_depth_; }

/// Filters the pool independently for every step: a sample belongs to step t
/// when it contains a class of C^t and, in Disjoint mode, nothing outside
/// Y^t. A sample may therefore appear in several steps. image_level is
/// rewritten over each step's C^t.
inline std::vector<StepDataset> split_incremental(const std::vector<ImageSample>& samples,
                                                  const std::vector<std::vector<int>>& steps,
                                                  SplitMode mode) {
  if (steps.empty()) throw ConfigError("no steps given");
  std::set<int> seen_ids;
  for (const auto& st : steps) {
    if (st.empty()) throw ConfigError("a step has no classes");
    for (int c : st)
      if (!seen_ids.insert(c).second)
        throw ConfigError("class " + std::to_string(c) + " listed in more than one step");
  }
  std::vector<ClassSpace> spaces;
  spaces.emplace_back(std::vector<int>{}, steps[0]);
  for (std::size_t t = 1; t < steps.size(); ++t) spaces.push_back(spaces.back().advance(steps[t]));

  // Y^t for every t, used for the disjoint predicate.
  std::vector<std::set<int>> seen(steps.size());
  for (std::size_t t = 0; t < steps.size(); ++t) {
    if (t > 0) seen[t] = seen[t - 1];
    seen[t].insert(steps[t].begin(), steps[t].end());
  }

  std::vector<std::vector<ImageSample>> buckets(steps.size());
  for (const auto& s : samples) {
    const auto present = s.present_classes();
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const bool has_new = std::any_of(steps[t].begin(), steps[t].end(),
                                       [&](int c) { return present.count(c) > 0; });
      if (!has_new) continue;
      if (mode == SplitMode::Disjoint &&
          !std::all_of(present.begin(), present.end(), [&](int c) { return seen[t].count(c); }))
        continue;
      ImageSample copy = s;
      copy.image_level = image_level_of(copy, spaces[t]);
      buckets[t].push_back(std::move(copy));
    }
  }
  std::vector<StepDataset> out;
  for (std::size_t t = 0; t < steps.size(); ++t)
    out.emplace_back(static_cast<int>(t), spaces[t], mode, std::move(buckets[t]));
  return out;
}

/// Training pool, held-out test pool and the incremental split of the
/// training pool.
struct Dataset {
  DatasetConfig config;
  SplitMode mode = SplitMode::Overlap;
  std::vector<std::vector<int>> steps;
  std::vector<ImageSample> train;
  std::vector<ImageSample> test;
  std::vector<StepDataset> splits;
};

// Test images use a derived seed and ids prefixed with 't'.
inline Dataset make_dataset(const DatasetConfig& cfg, int n_train, int n_test,
                            const std::vector<std::vector<int>>& steps, SplitMode mode) {
  Dataset d{cfg, mode, steps, gen_shapes(cfg, n_train), {}, {}};
  if (n_test > 0) {
    DatasetConfig tc = cfg;
    tc.seed = cfg.seed ^ 0x9E3779B97F4A7C15ULL;
    d.test = gen_shapes(tc, n_test);
    for (auto& s : d.test) s.id[0] = 't';
  }
  d.splits = split_incremental(d.train, steps, mode);
  return d;
}

}  // namespace teddy
