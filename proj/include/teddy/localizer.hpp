#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "teddy/core.hpp"

namespace teddy {

/// Per-pixel affine map from d feature channels to `rows` output channels.
/// weights is row-major [rows x d].
struct LinearScorer {
  int rows = 0;
  int dims = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  LinearScorer() = default;
  LinearScorer(int rows_, int dims_)
      : rows(rows_), dims(dims_), weights(static_cast<std::size_t>(rows_) * dims_, 0.0),
        bias(rows_, 0.0) {}

  double& w(int r, int k) { return weights[static_cast<std::size_t>(r) * dims + k]; }
  double w(int r, int k) const { return weights[static_cast<std::size_t>(r) * dims + k]; }

  // Appends zero rows.
  void grow(int extra) {
    rows += extra;
    weights.resize(static_cast<std::size_t>(rows) * dims, 0.0);
    bias.resize(rows, 0.0);
  }

  friend bool operator==(const LinearScorer&, const LinearScorer&) = default;
};

inline ScoreMap apply_scorer(const LinearScorer& scorer, const ScoreMap& features,
                             Semantics semantics) {
  if (features.channels() != scorer.dims)
    throw ShapeError("feature dimension " + std::to_string(features.channels()) +
                     " does not match scorer dimension " + std::to_string(scorer.dims));
  ScoreMap out(scorer.rows, features.height(), features.width(), semantics);
  for (int r = 0; r < scorer.rows; ++r) {
    auto dst = out.channel(r);
    std::fill(dst.begin(), dst.end(), scorer.bias[r]);
    for (int k = 0; k < scorer.dims; ++k) {
      const double wk = scorer.w(r, k);
      if (wk == 0.0) continue;
      auto src = features.channel(k);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += wk * src[i];
    }
  }
  return out;
}

// Accumulates d(loss)/d(params) given d(loss)/d(output map).
inline void accumulate_scorer_grad(const ScoreMap& features, const ScoreMap& d_out,
                                   LinearScorer& grad) {
  for (int r = 0; r < d_out.channels(); ++r) {
    auto g = d_out.channel(r);
    double gb = 0.0;
    for (double v : g) gb += v;
    grad.bias[r] += gb;
    for (int k = 0; k < features.channels(); ++k) {
      auto x = features.channel(k);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      grad.w(r, k) += acc;
    }
  }
}

/// Seed-area score map over {b} + Y^{t-1} + C^t. tme_mask marks pixels that
/// the mutual-exclusivity enforcement zeroed.
struct SeedMap {
  ScoreMap scores;
  std::optional<std::vector<std::uint8_t>> tme_mask;

  bool forced(int i) const { return tme_mask && (*tme_mask)[i] != 0; }
};

inline SeedMap seed_scores(const LinearScorer& localizer, const ScoreMap& features) {
  return SeedMap{apply_scorer(localizer, features, Semantics::Scores), std::nullopt};
}

struct PoolingConfig {
  double focal_lambda = 0.01;
  double focal_p = 3.0;
  double epsilon = 1e-5;

  void validate() const {
    if (focal_lambda < 0 || focal_p < 1 || epsilon <= 0)
      throw ConfigError("pooling needs lambda >= 0, p >= 1, epsilon > 0");
  }
};

namespace detail {

struct PoolTerms {
  double pooled = 0.0;
  double focal = 0.0;
  double weight_sum = 0.0;
  double mean_weight = 0.0;
};

inline PoolTerms pool_channel(const ScoreMap& s, const ScoreMap& softmax, int c,
                              const PoolingConfig& cfg) {
  PoolTerms t;
  double num = 0.0;
  for (int i = 0; i < s.pixels(); ++i) {
    num += softmax.at(c, i) * s.at(c, i);
    t.weight_sum += softmax.at(c, i);
  }
  t.pooled = num / (cfg.epsilon + t.weight_sum);
  t.mean_weight = t.weight_sum / s.pixels();
  t.focal = cfg.focal_lambda * std::pow(1.0 - t.mean_weight, cfg.focal_p) *
            std::log(t.mean_weight + cfg.epsilon);
  return t;
}

}  // namespace detail

/// Normalized global weighted pooling with a focal penalty, one value per
/// requested channel. Pixel weights are the channel softmax of S.
inline std::vector<double> gwp_pool(const ScoreMap& s, std::span<const int> channels,
                                    const PoolingConfig& cfg) {
  if (channels.empty()) throw Error("gwp_pool needs at least one channel");
  cfg.validate();
  const ScoreMap sm = softmax_channels(s);
  std::vector<double> out;
  out.reserve(channels.size());
  for (int c : channels) {
    if (c < 0 || c >= s.channels()) throw ShapeError("pooling channel out of range");
    const auto t = detail::pool_channel(s, sm, c, cfg);
    out.push_back(t.pooled + t.focal);
  }
  return out;
}

/// d(sum_k upstream[k] * pooled[k]) / dS for the channels of gwp_pool.
inline ScoreMap gwp_pool_backward(const ScoreMap& s, std::span<const int> channels,
                                  const PoolingConfig& cfg, std::span<const double> upstream) {
  const ScoreMap sm = softmax_channels(s);
  ScoreMap grad(s.channels(), s.height(), s.width(), Semantics::Scores);
  const int N = s.pixels();
  for (std::size_t k = 0; k < channels.size(); ++k) {
    const int c = channels[k];
    const double up = upstream[k];
    if (up == 0.0) continue;
    const auto t = detail::pool_channel(s, sm, c, cfg);
    const double B = cfg.epsilon + t.weight_sum;
    const double m = t.mean_weight;
    const double dfocal_dm =
        cfg.focal_lambda * (-cfg.focal_p * std::pow(1.0 - m, cfg.focal_p - 1.0) *
                                std::log(m + cfg.epsilon) +
                            std::pow(1.0 - m, cfg.focal_p) / (m + cfg.epsilon));
    for (int i = 0; i < N; ++i) {
      const double w = sm.at(c, i);
      // d out / d w_i
      const double g = (s.at(c, i) - t.pooled) / B + dfocal_dm / N;
      grad.at(c, i) += up * w / B;
      for (int j = 0; j < s.channels(); ++j) {
        const double dw = w * ((j == c ? 1.0 : 0.0) - sm.at(j, i));
        grad.at(j, i) += up * g * dw;
      }
    }
  }
  return grad;
}

// Mean over classes of bce(y_c, sigmoid(pooled_c)).
inline double loss_cls_pooled(std::span<const int> y, std::span<const double> pooled) {
  if (pooled.empty()) throw Error("loss_cls needs at least one new class");
  if (y.size() != pooled.size()) throw ShapeError("image-level label length mismatch");
  double total = 0.0;
  for (std::size_t k = 0; k < pooled.size(); ++k) total += bce(y[k], sigmoid(pooled[k]));
  return total / static_cast<double>(pooled.size());
}

/// Image-level classification loss: mean over new-class channels of
/// bce(y_c, sigmoid(gwp_pool(S)_c)).
inline double loss_cls(std::span<const int> y, const ScoreMap& s, std::span<const int> new_channels,
                       const PoolingConfig& cfg) {
  if (new_channels.empty()) throw Error("loss_cls needs at least one new class");
  if (y.size() != new_channels.size()) throw ShapeError("image-level label length mismatch");
  return loss_cls_pooled(y, gwp_pool(s, new_channels, cfg));
}

inline ScoreMap loss_cls_grad(std::span<const int> y, const ScoreMap& s,
                              std::span<const int> new_channels, const PoolingConfig& cfg) {
  const auto pooled = gwp_pool(s, new_channels, cfg);
  std::vector<double> up(pooled.size());
  for (std::size_t k = 0; k < pooled.size(); ++k)
    up[k] = bce_logit_grad(y[k], pooled[k]) / static_cast<double>(pooled.size());
  return gwp_pool_backward(s, new_channels, cfg, up);
}

/// Localization loss against the previous model: mean over the listed
/// channels and over pixels of bce(sigmoid(old), sigmoid(S)). Channel
/// indices address both maps.
inline double loss_loc(const ScoreMap& old_logits, const ScoreMap& s,
                       std::span<const int> channels) {
  if (channels.empty()) throw Error("loss_loc needs at least one old class");
  if (!old_logits.same_extent(s)) throw ShapeError("loss_loc maps differ in H x W");
  double total = 0.0;
  for (int c : channels) {
    double acc = 0.0;
    for (int i = 0; i < s.pixels(); ++i)
      acc += bce(sigmoid(old_logits.at(c, i)), sigmoid(s.at(c, i)));
    total += acc / s.pixels();
  }
  return total / static_cast<double>(channels.size());
}

inline ScoreMap loss_loc_grad(const ScoreMap& old_logits, const ScoreMap& s,
                              std::span<const int> channels) {
  ScoreMap grad(s.channels(), s.height(), s.width(), Semantics::Scores);
  const double scale = 1.0 / (static_cast<double>(channels.size()) * s.pixels());
  for (int c : channels)
    for (int i = 0; i < s.pixels(); ++i)
      grad.at(c, i) = scale * bce_logit_grad(sigmoid(old_logits.at(c, i)), s.at(c, i));
  return grad;
}

}  // namespace teddy
