#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "teddy/core.hpp"
#include "teddy/data.hpp"
#include "teddy/fusion.hpp"
#include "teddy/localizer.hpp"
#include "teddy/masks.hpp"
#include "teddy/rng.hpp"

namespace teddy {

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kFeatureDims = 6;

/// Per-pixel features: r, g, b, x / (W-1), y / (H-1), 1.
inline ScoreMap pixel_features(const ScoreMap& pixels) {
  if (pixels.channels() != 3) throw ShapeError("pixel_features expects a 3-channel image");
  const int H = pixels.height(), W = pixels.width();
  ScoreMap f(kFeatureDims, H, W, Semantics::Scores);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      for (int c = 0; c < 3; ++c) f.at(c, h, w) = pixels.at(c, h, w);
      f.at(3, h, w) = W > 1 ? static_cast<double>(w) / (W - 1) : 0.0;
      f.at(4, h, w) = H > 1 ? static_cast<double>(h) / (H - 1) : 0.0;
      f.at(5, h, w) = 1.0;
    }
  return f;
}

/// Trainable parameters of the toy segmentation head and localizer head.
struct ModelParams {
  LinearScorer seg;
  LinearScorer loc;

  static ModelParams zeros(int rows, int dims) { return {LinearScorer(rows, dims), LinearScorer(rows, dims)}; }

  std::vector<double> flatten() const {
    std::vector<double> v;
    v.insert(v.end(), seg.weights.begin(), seg.weights.end());
    v.insert(v.end(), seg.bias.begin(), seg.bias.end());
    v.insert(v.end(), loc.weights.begin(), loc.weights.end());
    v.insert(v.end(), loc.bias.begin(), loc.bias.end());
    return v;
  }

  void unflatten(std::span<const double> v) {
    if (v.size() != size()) throw ShapeError("parameter vector length mismatch");
    auto it = v.begin();
    for (auto* dst : {&seg.weights, &seg.bias, &loc.weights, &loc.bias}) {
      std::copy(it, it + static_cast<std::ptrdiff_t>(dst->size()), dst->begin());
      it += static_cast<std::ptrdiff_t>(dst->size());
    }
  }

  std::size_t size() const {
    return seg.weights.size() + seg.bias.size() + loc.weights.size() + loc.bias.size();
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ToyModel {
  ClassSpace space;
  int step = 0;
  ModelParams params;
  ModelParams velocity;

  static ToyModel initial(const ClassSpace& space, int dims = kFeatureDims) {
    const int rows = space.num_channels();
    return {space, 0, ModelParams::zeros(rows, dims), ModelParams::zeros(rows, dims)};
  }

  // Moves to the next step's class space, appending zero rows for C^{t+1}.
  // Existing rows keep their values; momentum restarts at zero.
  ToyModel expanded(const ClassSpace& next) const {
    std::vector<int> seen = space.old_classes();
    seen.insert(seen.end(), space.new_classes().begin(), space.new_classes().end());
    if (next.old_classes() != seen) throw ConfigError("next class space does not extend Y^t");
    ToyModel m = *this;
    m.space = next;
    m.step = step + 1;
    const int extra = next.num_channels() - space.num_channels();
    m.params.seg.grow(extra);
    m.params.loc.grow(extra);
    m.velocity = ModelParams::zeros(next.num_channels(), params.seg.dims);
    return m;
  }

  friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

struct ForwardResult {
  ScoreMap seg_logits;
  SeedMap seed;
};

inline ForwardResult model_forward(const ModelParams& p, const ScoreMap& features) {
  return {apply_scorer(p.seg, features, Semantics::Logits), seed_scores(p.loc, features)};
}

inline ForwardResult model_forward(const ToyModel& m, const ScoreMap& features) {
  return model_forward(m.params, features);
}

struct LossWeights {
  double cls = 1.0;
  double loc = 1.0;
  double seg = 1.0;
};

struct LossReport {
  double cls = 0.0;
  double loc = 0.0;
  double seg = 0.0;
  double total = 0.0;
};

/// Constant supervision for one image. Empty members switch the loss off:
/// y -> L_cls, old_logits -> L_loc, G -> L_seg.
struct LossInputs {
  std::vector<int> y;
  std::optional<ScoreMap> old_logits;
  std::optional<ScoreMap> G;
  std::vector<int> new_channels;
  std::vector<int> old_channels;
};

inline LossReport compute_losses(const ModelParams& p, const ScoreMap& features,
                                 const LossInputs& in, const PoolingConfig& pool,
                                 const LossWeights& wts = {}) {
  const auto fw = model_forward(p, features);
  LossReport r;
  if (!in.y.empty()) r.cls = loss_cls(in.y, fw.seed.scores, in.new_channels, pool);
  if (in.old_logits) r.loc = loss_loc(*in.old_logits, fw.seed.scores, in.old_channels);
  if (in.G) r.seg = loss_seg(*in.G, fw.seg_logits);
  r.total = wts.cls * r.cls + wts.loc * r.loc + wts.seg * r.seg;
  return r;
}

struct GradientResult {
  LossReport losses;
  ModelParams grads;
};

/// Exact gradient of the weighted active losses. All inputs in `in` are
/// constants; nothing flows into the previous model or the pseudo labels.
inline GradientResult compute_gradients(const ModelParams& p, const ScoreMap& features,
                                        const LossInputs& in, const PoolingConfig& pool,
                                        const LossWeights& wts = {}) {
  const auto fw = model_forward(p, features);
  GradientResult out;
  out.grads = ModelParams::zeros(p.seg.rows, p.seg.dims);
  const ScoreMap& S = fw.seed.scores;
  ScoreMap dS(S.channels(), S.height(), S.width(), Semantics::Scores);
  bool any_loc = false;
  if (!in.y.empty()) {
    out.losses.cls = loss_cls(in.y, S, in.new_channels, pool);
    const ScoreMap g = loss_cls_grad(in.y, S, in.new_channels, pool);
    for (std::size_t k = 0; k < g.data().size(); ++k) dS.data()[k] += wts.cls * g.data()[k];
    any_loc = true;
  }
  if (in.old_logits) {
    out.losses.loc = loss_loc(*in.old_logits, S, in.old_channels);
    const ScoreMap g = loss_loc_grad(*in.old_logits, S, in.old_channels);
    for (std::size_t k = 0; k < g.data().size(); ++k) dS.data()[k] += wts.loc * g.data()[k];
    any_loc = true;
  }
  if (any_loc) accumulate_scorer_grad(features, dS, out.grads.loc);
  if (in.G) {
    out.losses.seg = loss_seg(*in.G, fw.seg_logits);
    ScoreMap g = loss_seg_grad(*in.G, fw.seg_logits);
    for (double& v : g.data()) v *= wts.seg;
    accumulate_scorer_grad(features, g, out.grads.seg);
  }
  out.losses.total = wts.cls * out.losses.cls + wts.loc * out.losses.loc + wts.seg * out.losses.seg;
  return out;
}

struct TrainConfig {
  int epochs = 40;
  int warmup_epochs = 5;
  double lr0 = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  std::uint64_t seed = 0;  // batch order
  bool tme = true;
  bool fusion = true;
  FusionConfig fusion_cfg;
  PoolingConfig pooling;
  LossWeights weights;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs))
      throw ConfigError("warmup_epochs must be smaller than epochs");
    if (!(lr0 > 0)) throw ConfigError("learning rate must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
    if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
    fusion_cfg.validate();
    pooling.validate();
  }
};

/// lr0 during warm-up, then lr0 * (1 - k/K)^power with k = epoch - warmup,
/// K = epochs - warmup.
inline double poly_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs) return cfg.lr0;
  const double k = epoch - cfg.warmup_epochs;
  const double K = cfg.epochs - cfg.warmup_epochs;
  return cfg.lr0 * std::pow(1.0 - k / K, cfg.poly_power);
}

/// velocity = momentum * velocity + grad + weight_decay * param;
/// param -= lr * velocity.
inline void sgd_step(ModelParams& params, ModelParams& velocity, const ModelParams& grads,
                     double lr, double momentum, double weight_decay) {
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  const auto g = grads.flatten();
  for (std::size_t k = 0; k < g.size(); ++k)
    if (!std::isfinite(g[k]))
      throw NonFiniteError("non-finite gradient at parameter index " + std::to_string(k));
  auto p = params.flatten();
  auto v = velocity.flatten();
  for (std::size_t k = 0; k < p.size(); ++k) {
    v[k] = momentum * v[k] + g[k] + weight_decay * p[k];
    p[k] -= lr * v[k];
  }
  params.unflatten(p);
  velocity.unflatten(v);
}

struct EpochReport {
  int epoch = 0;
  double lr = 0.0;
  LossReport mean;  // mean over images
  int tme_violations_before = 0;  // summed over images, seg path only
  int dual_candidates = 0;
};

// Called after every epoch with that epoch's report and the model state.
using EpochHook = std::function<void(const EpochReport&, const ToyModel&)>;

struct TrainResult {
  ToyModel model;
  std::vector<EpochReport> epochs;
};

// One-hot supervision over the class space from a label map.
inline ScoreMap one_hot_labels(const LabelMap& labels, const ClassSpace& space) {
  ScoreMap G(space.num_channels(), labels.height, labels.width, Semantics::Probabilities);
  for (int i = 0; i < labels.pixels(); ++i) {
    const int ch = space.channel_of(labels.labels[i]);
    G.at(ch < 0 ? 0 : ch, i) = 1.0;
  }
  return G;
}

inline std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  return order;
}

inline void check_finite(const LossReport& r, const std::string& image_id) {
  if (!std::isfinite(r.cls) || !std::isfinite(r.loc) || !std::isfinite(r.seg))
    throw NonFiniteError("non-finite loss on image " + image_id);
}

/// Fully supervised step-0 training of the segmentation head.
inline TrainResult run_step0(const StepDataset& ds, const TrainConfig& cfg,
                             const EpochHook& on_epoch = {}) {
  cfg.validate();
  if (ds.step() != 0) throw ConfigError("run_step0 needs the step-0 dataset");
  TrainResult res{ToyModel::initial(ds.class_space()), {}};
  const int n = ds.size();
  std::vector<ScoreMap> feats, targets;
  for (int i = 0; i < n; ++i) {
    feats.push_back(pixel_features(ds.pixels(i)));
    targets.push_back(one_hot_labels(ds.training_labels(i), ds.class_space()));
  }
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochReport rep{epoch, poly_lr(epoch, cfg), {}, 0, 0};
    for (int idx : epoch_order(n, cfg.seed, epoch)) {
      LossInputs in;
      in.G = targets[idx];
      auto g = compute_gradients(res.model.params, feats[idx], in, cfg.pooling, cfg.weights);
      check_finite(g.losses, ds.id(idx));
      sgd_step(res.model.params, res.model.velocity, g.grads, rep.lr, cfg.momentum,
               cfg.weight_decay);
      rep.mean.seg += g.losses.seg / n;
      rep.mean.total += g.losses.total / n;
    }
    if (on_epoch) on_epoch(rep, res.model);
    res.epochs.push_back(rep);
  }
  return res;
}

/// Weakly supervised incremental step. Every epoch trains the localizer with
/// L_cls + L_loc on the unenforced seed map; from epoch warmup_epochs on it
/// also builds pseudo labels (binarize, enforce, P, U/V from the current
/// logits, Z, G) and adds L_seg. One SGD step per image.
/// masks[i] belongs to sample i of ds.
inline TrainResult run_increment(const ToyModel& previous, const StepDataset& ds,
                                 const std::vector<BinaryMaskSet>& masks, const TrainConfig& cfg,
                                 const EpochHook& on_epoch = {}) {
  cfg.validate();
  if (ds.step() < 1) throw ConfigError("run_increment needs a step t > 0 dataset");
  if (static_cast<int>(masks.size()) != ds.size())
    throw ShapeError("one mask set per sample is required");
  const ClassSpace& space = ds.class_space();
  TrainResult res{previous.expanded(space), {}};
  const ModelParams frozen = previous.params;
  const TrainingGuard guard(ds);

  PseudoLabelOptions opt;
  opt.fusion = cfg.fusion_cfg;
  opt.tme = cfg.tme;
  opt.use_fusion = cfg.fusion;

  const int n = ds.size();
  std::vector<ScoreMap> feats, old_logits;
  for (int i = 0; i < n; ++i) {
    feats.push_back(pixel_features(ds.pixels(i)));
    old_logits.push_back(apply_scorer(frozen.seg, feats.back(), Semantics::Logits));
  }
  const auto new_ch = space.new_channels();
  const auto old_ch = space.old_channels();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochReport rep{epoch, poly_lr(epoch, cfg), {}, 0, 0};
    for (int idx : epoch_order(n, cfg.seed, epoch)) {
      LossInputs in;
      in.y = ds.image_level(idx);
      in.new_channels = new_ch;
      in.old_channels = old_ch;
      in.old_logits = old_logits[idx];
      if (epoch >= cfg.warmup_epochs) {
        const auto fw = model_forward(res.model.params, feats[idx]);
        auto bundle = build_pseudo_labels(old_logits[idx], fw.seed, fw.seg_logits, masks[idx],
                                          space, in.y, opt);
        rep.tme_violations_before +=
            tme_check(bundle.r_old, fw.seed, new_ch).violating_pixels;
        rep.dual_candidates += bundle.r_old.assignment.dual_candidates;
        in.G = std::move(bundle.G);
      }
      auto g = compute_gradients(res.model.params, feats[idx], in, cfg.pooling, cfg.weights);
      check_finite(g.losses, ds.id(idx));
      sgd_step(res.model.params, res.model.velocity, g.grads, rep.lr, cfg.momentum,
               cfg.weight_decay);
      rep.mean.cls += g.losses.cls / n;
      rep.mean.loc += g.losses.loc / n;
      rep.mean.seg += g.losses.seg / n;
      rep.mean.total += g.losses.total / n;
    }
    if (on_epoch) on_epoch(rep, res.model);
    res.epochs.push_back(rep);
  }
  return res;
}

}  // namespace teddy
