#pragma once

#include <cstdint>
#include <vector>

#include "teddy/data.hpp"
#include "teddy/eval.hpp"
#include "teddy/providers.hpp"
#include "teddy/trainer.hpp"

namespace teddy {

// Ground truth as seen by a model: classes outside its space become background.
inline LabelMap visible_labels(const LabelMap& gt, const ClassSpace& space) {
  LabelMap out = gt;
  for (int& v : out.labels)
    if (space.channel_of(v) < 0) v = ClassSpace::kBackground;
  return out;
}

/// mIoU of a model on raw samples, grouped into old (Y^{t-1}), new (C^t)
/// and all classes of its space.
inline MetricsReport evaluate_model(const ToyModel& m, const std::vector<ImageSample>& samples,
                                    const std::vector<MetricGroup>& groups) {
  IouAccumulator acc;
  for (const auto& s : samples) {
    const auto fw = model_forward(m, pixel_features(s.pixels));
    acc.add(predict_labelmap(fw.seg_logits, m.space), visible_labels(s.gt_labels, m.space));
  }
  return make_report(acc, groups);
}

inline MetricsReport evaluate_model(const ToyModel& m, const std::vector<ImageSample>& samples) {
  return evaluate_model(m, samples, standard_groups(m.space.old_classes(), m.space.new_classes()));
}

/// Two-step ablation benchmark: 4 old + 2 new classes, overlap protocol,
/// oracle masks.
struct BenchmarkConfig {
  DatasetConfig data = DatasetConfig::shapes_world();
  int n_train = 200;
  int n_test = 100;
  std::vector<std::vector<int>> steps{{1, 2, 3, 4}, {5, 6}};
  SplitMode mode = SplitMode::Overlap;
  TrainConfig train = [] {
    TrainConfig c;
    c.lr0 = 1.0;
    c.weight_decay = 1e-7;
    return c;
  }();
  MaskProvider masks;  // oracle
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::uint64_t data_seed_base = 100;
};

struct BenchmarkRun {
  std::uint64_t seed = 0;
  MetricsReport step0;
  MetricsReport baseline;  // TME off, fusion off
  MetricsReport full;      // TME on, fusion on
};

inline BenchmarkRun run_benchmark_seed(const BenchmarkConfig& cfg, std::uint64_t seed) {
  DatasetConfig dc = cfg.data;
  dc.seed = cfg.data_seed_base + seed;
  const Dataset d = make_dataset(dc, cfg.n_train, cfg.n_test, cfg.steps, cfg.mode);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  BenchmarkRun run;
  run.seed = seed;
  const auto base = run_step0(d.splits.at(0), tc);
  run.step0 = evaluate_model(base.model, d.test, standard_groups(cfg.steps.at(0), {}));
  const auto masks = provide_masks(cfg.masks, d.splits.at(1));
  for (bool on : {false, true}) {
    TrainConfig ti = tc;
    ti.tme = ti.fusion = on;
    const auto res = run_increment(base.model, d.splits.at(1), masks, ti);
    (on ? run.full : run.baseline) = evaluate_model(res.model, d.test);
  }
  return run;
}

}  // namespace teddy
