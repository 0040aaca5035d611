#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "teddy/core.hpp"
#include "teddy/rng.hpp"
#include "teddy/trainer.hpp"

namespace teddy {

// |a - n| / max(|a|, |n|, floor); the floor keeps round-off on near-zero
// entries from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

enum LossMask : unsigned { kCls = 1, kLoc = 2, kSeg = 4, kAllLosses = 7 };

struct GradCheckCase {
  ModelParams params;
  ScoreMap features;
  LossInputs inputs;
  PoolingConfig pooling;
  LossWeights weights;
};

/// Random small instance. `losses` picks which terms are active.
inline GradCheckCase random_grad_case(Rng& rng, unsigned losses) {
  const int n_old = rng.uniform_int((losses & kLoc) ? 1 : 0, 3);
  const int n_new = rng.uniform_int(1, 3);
  const int rows = 1 + n_old + n_new;
  const int H = rng.uniform_int(2, 5), W = rng.uniform_int(2, 5);

  GradCheckCase c;
  c.params = ModelParams::zeros(rows, kFeatureDims);
  for (auto* v : {&c.params.seg.weights, &c.params.seg.bias, &c.params.loc.weights,
                  &c.params.loc.bias})
    for (double& x : *v) x = rng.normal(0.0, 0.7);

  ScoreMap px(3, H, W, Semantics::Scores);
  for (double& x : px.data()) x = rng.uniform();
  c.features = pixel_features(px);

  c.pooling.focal_lambda = rng.uniform(0.0, 0.5);
  c.pooling.focal_p = rng.uniform_int(1, 3);
  c.weights = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};

  for (int k = 0; k < n_old; ++k) c.inputs.old_channels.push_back(1 + k);
  for (int k = 0; k < n_new; ++k) c.inputs.new_channels.push_back(1 + n_old + k);
  if (losses & kCls) {
    for (int k = 0; k < n_new; ++k) c.inputs.y.push_back(rng.uniform_int(0, 1));
    c.inputs.y[rng.uniform_int(0, n_new - 1)] = 1;
  }
  if (losses & kLoc) {
    ScoreMap old(1 + n_old, H, W, Semantics::Logits);
    for (double& x : old.data()) x = rng.normal(0.0, 2.0);
    c.inputs.old_logits = std::move(old);
  }
  if (losses & kSeg) {
    ScoreMap G(rows, H, W, Semantics::Probabilities);
    for (double& x : G.data()) x = rng.uniform();
    c.inputs.G = std::move(G);
  }
  return c;
}

struct GradCheckReport {
  int configs = 0;
  long long entries = 0;
  double max_rel_error = 0.0;
};

/// Central differences of the weighted total against compute_gradients.
inline double grad_check_case(const GradCheckCase& c, double h, long long* entries = nullptr) {
  const auto analytic = compute_gradients(c.params, c.features, c.inputs, c.pooling, c.weights)
                            .grads.flatten();
  auto theta = c.params.flatten();
  ModelParams probe = c.params;
  double worst = 0.0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double keep = theta[k];
    theta[k] = keep + h;
    probe.unflatten(theta);
    const double up = compute_losses(probe, c.features, c.inputs, c.pooling, c.weights).total;
    theta[k] = keep - h;
    probe.unflatten(theta);
    const double down = compute_losses(probe, c.features, c.inputs, c.pooling, c.weights).total;
    theta[k] = keep;
    worst = std::max(worst, relative_error(analytic[k], (up - down) / (2.0 * h)));
  }
  if (entries) *entries += static_cast<long long>(theta.size());
  return worst;
}

// Cycles cls only, loc only, seg only, and all three.
inline GradCheckReport run_grad_check(int configs, std::uint64_t seed, double h = 1e-5) {
  static constexpr unsigned kCycle[] = {kCls, kLoc, kSeg, kAllLosses};
  Rng rng(seed);
  GradCheckReport rep;
  for (int k = 0; k < configs; ++k) {
    const GradCheckCase c = random_grad_case(rng, kCycle[k % 4]);
    rep.max_rel_error = std::max(rep.max_rel_error, grad_check_case(c, h, &rep.entries));
    ++rep.configs;
  }
  return rep;
}

}  // namespace teddy
