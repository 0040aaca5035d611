#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <span>
#include <utility>
#include <vector>

#include "teddy/binarize.hpp"
#include "teddy/core.hpp"
#include "teddy/localizer.hpp"
#include "teddy/masks.hpp"
#include "teddy/rng.hpp"
#include "teddy/tme.hpp"

namespace teddy {

struct FusionConfig {
  double alpha = 0.8;
  double beta = 0.5;
  double eta = 0.5;  // one-hot weight in P; softmax gets 1 - eta

  void validate() const {
    if (!(alpha >= 0.5 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0.5, 1]");
    if (!(beta >= 0.5 && beta <= 1.0)) throw ConfigError("beta must lie in [0.5, 1]");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  }
};

/// Soft pseudo label over {b} + C^t: eta * one_hot + (1 - eta) * softmax of
/// the seed scores restricted to those channels. Channels whose `active`
/// entry is 0 (class absent from the image-level label) are excluded and
/// get P = 0; an empty `active` means all are active. Pixels marked in
/// tme_mask become pure background.
inline ScoreMap soft_pseudo_P(const SeedMap& seed, std::span<const int> new_channels, double eta,
                              std::span<const int> active = {}) {
  const int n = static_cast<int>(new_channels.size());
  if (!active.empty() && static_cast<int>(active.size()) != n)
    throw ShapeError("active flags do not match new channels");
  std::vector<int> src{0};
  std::vector<int> dst{0};
  for (int k = 0; k < n; ++k)
    if (active.empty() || active[k]) {
      src.push_back(new_channels[k]);
      dst.push_back(k + 1);
    }
  const ScoreMap sub = select_channels(seed.scores, src);
  const ScoreMap oh = one_hot(sub, /*drop_background=*/false);
  const ScoreMap sm = softmax_channels(sub);
  ScoreMap P(n + 1, seed.scores.height(), seed.scores.width(), Semantics::Probabilities);
  for (int i = 0; i < P.pixels(); ++i) {
    if (seed.forced(i)) {
      P.at(0, i) = 1.0;
      continue;
    }
    for (std::size_t k = 0; k < src.size(); ++k)
      P.at(dst[k], i) = eta * oh.at(static_cast<int>(k), i) +
                        (1.0 - eta) * sm.at(static_cast<int>(k), i);
  }
  return P;
}

/// Pair of binary coefficient maps over {b} + C^t.
struct FusionCoefficients {
  ScoreMap U;
  ScoreMap V;

  bool feasible() const {
    if (U.data().size() != V.data().size()) return false;
    for (std::size_t k = 0; k < U.data().size(); ++k) {
      const double u = U.data()[k], v = V.data()[k];
      if (u > 1.0 || v > 1.0 || u + v < 1.0) return false;
    }
    return true;
  }

  // U = 0, V = 1: Z reduces to P.
  static FusionCoefficients p_only(int channels, int height, int width) {
    return {ScoreMap(channels, height, width, Semantics::Binary, 0.0),
            ScoreMap(channels, height, width, Semantics::Binary, 1.0)};
  }
};

using UV = std::pair<int, int>;

/// Closed-form minimizer of bce(u*r + v*p, sigmoid(logit)) over the vertices
/// of u <= 1, v <= 1, u + v >= 1.
inline UV solve_uv_scalar(double logit, double r, double p) {
  if (logit > 0.0) return {1, 1};
  if (r <= p) return {1, 0};
  return {0, 1};
}

inline double uv_objective(int u, int v, double logit, double r, double p) {
  return bce(clamp_unit(u * r + v * p), sigmoid(logit));
}

/// Vertex enumeration oracle. Ties keep the earlier vertex in the order
/// (1,0), (0,1), (1,1).
inline UV oracle_uv(double logit, double r, double p) {
  constexpr std::array<UV, 3> vertices{UV{1, 0}, UV{0, 1}, UV{1, 1}};
  UV best = vertices[0];
  double best_loss = uv_objective(best.first, best.second, logit, r, p);
  for (std::size_t k = 1; k < vertices.size(); ++k) {
    const double l = uv_objective(vertices[k].first, vertices[k].second, logit, r, p);
    if (l < best_loss) {
      best_loss = l;
      best = vertices[k];
    }
  }
  return best;
}

struct UvFuzzReport {
  long long trials = 0;
  long long mismatches = 0;
  long long exceptions = 0;
  double max_gap = 0.0;
};

/// Compares the closed form with the vertex oracle on random triples:
/// logit ~ N(0, 2) with |logit| > 1e-9, r in {0, 1}, p ~ U[0, 1].
inline UvFuzzReport fuzz_uv(long long trials, std::uint64_t seed, double tol = 1e-12) {
  Rng rng(seed);
  UvFuzzReport rep;
  for (long long k = 0; k < trials; ++k) {
    double logit = rng.normal(0.0, 2.0);
    while (std::abs(logit) <= 1e-9) logit = rng.normal(0.0, 2.0);
    const double r = rng.uniform_int(0, 1);
    const double p = rng.uniform();
    ++rep.trials;
    try {
      const auto [u, v] = solve_uv_scalar(logit, r, p);
      const auto [ou, ov] = oracle_uv(logit, r, p);
      const double gap =
          std::abs(uv_objective(u, v, logit, r, p) - uv_objective(ou, ov, logit, r, p));
      rep.max_gap = std::max(rep.max_gap, gap);
      if (!(gap <= tol)) ++rep.mismatches;
    } catch (const std::exception&) {
      ++rep.exceptions;
    }
  }
  return rep;
}

/// Element-wise closed form on maps. current_logits and P cover {b} + C^t;
/// R_beta covers C^t only. The background channel is fixed to (U,V) = (0,1).
inline FusionCoefficients solve_uv(const ScoreMap& current_logits, const ScoreMap& r_beta,
                                   const ScoreMap& P) {
  const int n = r_beta.channels();
  if (current_logits.channels() != n + 1 || P.channels() != n + 1)
    throw ShapeError("solve_uv channel spaces are not aligned");
  if (!current_logits.same_extent(r_beta) || !current_logits.same_extent(P))
    throw ShapeError("solve_uv maps differ in H x W");
  auto co = FusionCoefficients::p_only(n + 1, P.height(), P.width());
  for (int c = 0; c < n; ++c)
    for (int i = 0; i < P.pixels(); ++i) {
      const auto [u, v] = solve_uv_scalar(current_logits.at(c + 1, i), r_beta.at(c, i),
                                          P.at(c + 1, i));
      co.U.at(c + 1, i) = u;
      co.V.at(c + 1, i) = v;
    }
  return co;
}

/// Z = clamp_unit(U * R_beta + V * P); R_beta is extended with a zero
/// background channel, so Z_b = P_b under the fixed background coefficients.
inline ScoreMap fuse_Z(const FusionCoefficients& co, const ScoreMap& r_beta, const ScoreMap& P) {
  if (!co.feasible()) throw Error("fusion coefficients violate U <= 1, V <= 1, U + V >= 1");
  const int n = r_beta.channels();
  if (co.U.channels() != n + 1 || P.channels() != n + 1 || !P.same_extent(r_beta))
    throw ShapeError("fuse_Z channel spaces are not aligned");
  ScoreMap Z(n + 1, P.height(), P.width(), Semantics::Probabilities);
  for (int c = 0; c <= n; ++c)
    for (int i = 0; i < P.pixels(); ++i) {
      const double r = c == 0 ? 0.0 : r_beta.at(c - 1, i);
      Z.at(c, i) = clamp_unit(co.U.at(c, i) * r + co.V.at(c, i) * P.at(c, i));
    }
  return Z;
}

/// Final supervision over {b} + Y^{t-1} + C^t from the previous model's
/// logits over {b} + Y^{t-1} and Z over {b} + C^t.
inline ScoreMap assemble_G(const ScoreMap& old_logits, const ScoreMap& Z) {
  if (old_logits.channels() < 1 || Z.channels() < 1) throw ShapeError("missing background channel");
  if (!old_logits.same_extent(Z)) throw ShapeError("assemble_G maps differ in H x W");
  const int n_old = old_logits.channels() - 1;
  const int n_new = Z.channels() - 1;
  ScoreMap G(1 + n_old + n_new, Z.height(), Z.width(), Semantics::Probabilities);
  for (int i = 0; i < Z.pixels(); ++i) {
    G.at(0, i) = std::min(sigmoid(old_logits.at(0, i)), Z.at(0, i));
    for (int c = 1; c <= n_old; ++c) G.at(c, i) = sigmoid(old_logits.at(c, i));
    for (int c = 1; c <= n_new; ++c) G.at(n_old + c, i) = Z.at(c, i);
  }
  return G;
}

/// Mean over channels and pixels of bce(G, sigmoid(current_logits)).
inline double loss_seg(const ScoreMap& G, const ScoreMap& current_logits) {
  if (G.channels() != current_logits.channels() || !G.same_extent(current_logits))
    throw ShapeError("loss_seg maps are not aligned");
  double total = 0.0;
  for (int c = 0; c < G.channels(); ++c) {
    double acc = 0.0;
    for (int i = 0; i < G.pixels(); ++i) acc += bce(G.at(c, i), sigmoid(current_logits.at(c, i)));
    total += acc / G.pixels();
  }
  return total / G.channels();
}

inline ScoreMap loss_seg_grad(const ScoreMap& G, const ScoreMap& current_logits) {
  ScoreMap grad(G.channels(), G.height(), G.width(), Semantics::Scores);
  const double scale = 1.0 / (static_cast<double>(G.channels()) * G.pixels());
  for (int c = 0; c < G.channels(); ++c)
    for (int i = 0; i < G.pixels(); ++i)
      grad.at(c, i) = scale * bce_logit_grad(G.at(c, i), current_logits.at(c, i));
  return grad;
}

/// All intermediate pseudo-label products for one image.
struct PseudoLabelBundle {
  BinaryPrediction r_old;
  SeedMap s_enforced;
  ScoreMap P;
  BinaryPrediction r_beta;
  FusionCoefficients uv;
  ScoreMap Z;
  ScoreMap G;
  TmeReport tme_report;
};

struct PseudoLabelOptions {
  FusionConfig fusion;
  bool tme = true;
  bool use_fusion = true;
};

/// Runs binarization, mutual-exclusivity enforcement, P, U/V, Z and G for
/// one image. Maps use the ClassSpace channel layout: old_logits over
/// {b} + Y^{t-1}; seed and current_logits over {b} + Y^{t-1} + C^t. y is the
/// image-level label over C^t.
inline PseudoLabelBundle build_pseudo_labels(const ScoreMap& old_logits, const SeedMap& seed,
                                             const ScoreMap& current_logits,
                                             const BinaryMaskSet& masks, const ClassSpace& space,
                                             std::span<const int> y,
                                             const PseudoLabelOptions& opt) {
  opt.fusion.validate();
  if (old_logits.channels() != space.num_old_channels() ||
      seed.scores.channels() != space.num_channels() ||
      current_logits.channels() != space.num_channels())
    throw ShapeError("pseudo-label inputs do not match the class space");
  if (y.size() != space.new_classes().size()) throw ShapeError("image-level label length mismatch");

  PseudoLabelBundle b;
  const auto old_ch = space.old_channels();
  b.r_old = binarize(old_logits, masks, opt.fusion.alpha, old_ch, space.old_classes(),
                     PredictionSource::OldModel);
  b.s_enforced = opt.tme ? tme_enforce(b.r_old, seed) : seed;

  const auto new_ch = space.new_channels();
  const auto& new_ids = space.new_classes();
  b.P = soft_pseudo_P(b.s_enforced, new_ch, opt.fusion.eta, y);

  std::vector<int> act_ch, act_ids, act_pos;
  for (std::size_t k = 0; k < new_ch.size(); ++k)
    if (y[k]) {
      act_ch.push_back(new_ch[k]);
      act_ids.push_back(new_ids[k]);
      act_pos.push_back(static_cast<int>(k));
    }
  const int n = static_cast<int>(new_ch.size());
  const int H = seed.scores.height(), W = seed.scores.width();
  BinaryPrediction rb = binarize(b.s_enforced.scores, masks, opt.fusion.beta, act_ch, act_ids,
                                 PredictionSource::SeedMap);
  b.r_beta = rb;
  b.r_beta.class_ids = new_ids;
  b.r_beta.map = ScoreMap(n, H, W, Semantics::Binary);
  for (std::size_t k = 0; k < act_pos.size(); ++k) {
    auto src = rb.map.channel(static_cast<int>(k));
    std::copy(src.begin(), src.end(), b.r_beta.map.channel(act_pos[k]).begin());
  }

  std::vector<int> cur_sel{0};
  cur_sel.insert(cur_sel.end(), new_ch.begin(), new_ch.end());
  const ScoreMap cur_new = select_channels(current_logits, cur_sel);
  b.uv = opt.use_fusion ? solve_uv(cur_new, b.r_beta.map, b.P)
                        : FusionCoefficients::p_only(n + 1, H, W);
  b.Z = fuse_Z(b.uv, b.r_beta.map, b.P);
  b.G = assemble_G(old_logits, b.Z);
  b.tme_report = tme_check(b.r_old, b.s_enforced, new_ch);
  return b;
}

}  // namespace teddy
