#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "teddy/eval.hpp"
#include "teddy/rng.hpp"

using namespace teddy;

namespace {

LabelMap labels(int h, int w, std::vector<int> v) {
  LabelMap l(h, w);
  l.labels = std::move(v);
  return l;
}

MetricsReport report_with(std::map<int, double> per_class) {
  MetricsReport r;
  r.per_class = std::move(per_class);
  return r;
}

// Straight pixel-counting IoU for one class.
double ref_iou(const LabelMap& p, const LabelMap& g, int c) {
  int inter = 0, uni = 0;
  for (int i = 0; i < g.pixels(); ++i) {
    inter += p.labels[i] == c && g.labels[i] == c;
    uni += p.labels[i] == c || g.labels[i] == c;
  }
  return static_cast<double>(inter) / uni;
}

}  // namespace

TEST(PredictLabelmap, DominantChannelGivesConstantMap) {
  const ClassSpace space({3}, {7});
  ScoreMap s(3, 2, 2, Semantics::Logits);
  for (int i = 0; i < 4; ++i) s.at(2, i) = 5.0;
  EXPECT_EQ(predict_labelmap(s, space).labels, (std::vector<int>{7, 7, 7, 7}));
}

TEST(PredictLabelmap, EqualLogitsGiveBackground) {
  const ClassSpace space({}, {1, 2});
  EXPECT_EQ(predict_labelmap(ScoreMap(3, 2, 2, Semantics::Logits, 0.3), space).labels,
            (std::vector<int>(4, 0)));
}

TEST(PredictLabelmap, HandTwoByTwo) {
  const ClassSpace space({4}, {5});
  // Pixel-wise (b, 4, 5): (1,0,0), (0,2,1), (0,1,3), (2,2,0).
  const ScoreMap s(3, 2, 2, Semantics::Logits, {1, 0, 0, 2, 0, 2, 1, 2, 0, 1, 3, 0});
  EXPECT_EQ(predict_labelmap(s, space).labels, (std::vector<int>{0, 4, 5, 0}));
  EXPECT_THROW(predict_labelmap(ScoreMap(2, 2, 2, Semantics::Logits), space), ShapeError);
}

TEST(Miou, PerfectPredictionIsOne) {
  const auto gt = labels(2, 3, {0, 1, 1, 2, 2, 0});
  const auto r = miou(gt, gt, {{"fg", {1, 2}}, {"all", {0, 1, 2}}});
  EXPECT_EQ(r.per_class.at(1), 1.0);
  EXPECT_EQ(r.per_class.at(2), 1.0);
  EXPECT_EQ(r.group("all"), 1.0);
}

TEST(Miou, DisjointClassIsZero) {
  const auto gt = labels(1, 4, {1, 1, 0, 0});
  const auto pred = labels(1, 4, {0, 0, 1, 1});
  EXPECT_EQ(miou(pred, gt, {{"fg", {1}}}).per_class.at(1), 0.0);
}

TEST(Miou, OverlappingSquaresGiveOneThird) {
  // 2x2 squares on a 4x4 grid sharing 1x2 pixels.
  LabelMap gt(4, 4), pred(4, 4);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      gt.at(y, x) = 1;
      pred.at(y + 1, x) = 1;
    }
  const auto r = miou(pred, gt, {{"fg", {1}}});
  EXPECT_DOUBLE_EQ(r.per_class.at(1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.per_class.at(1), ref_iou(pred, gt, 1));
}

TEST(Miou, AbsentClassesLeftOutOfMeans) {
  const auto gt = labels(1, 4, {1, 1, 0, 0});
  const auto r = miou(gt, gt, {{"g", {1, 9}}, {"empty", {9}}});
  EXPECT_EQ(r.group("g"), 1.0);
  EXPECT_TRUE(std::isnan(r.group("empty")));
  EXPECT_EQ(r.per_class.count(9), 0u);
}

TEST(Miou, PoolsCountsOverImages) {
  const auto g1 = labels(1, 2, {1, 1}), p1 = labels(1, 2, {1, 0});
  const auto g2 = labels(1, 2, {0, 0}), p2 = labels(1, 2, {1, 1});
  const auto r = miou(std::vector<LabelMap>{p1, p2}, std::vector<LabelMap>{g1, g2}, {{"fg", {1}}});
  EXPECT_DOUBLE_EQ(r.per_class.at(1), 1.0 / 4.0);
  EXPECT_THROW(miou(std::vector<LabelMap>{p1}, std::vector<LabelMap>{}, {}), ShapeError);
}

TEST(Miou, MatchesPixelCountingAndSingletonGroups) {
  Rng rng(61);
  LabelMap gt(6, 7), pred(6, 7);
  for (int i = 0; i < gt.pixels(); ++i) {
    gt.labels[i] = rng.uniform_int(0, 3);
    pred.labels[i] = rng.uniform_int(0, 3);
  }
  std::vector<MetricGroup> groups;
  for (int c = 0; c <= 3; ++c) groups.push_back({std::to_string(c), {c}});
  groups.push_back({"all", {0, 1, 2, 3}});
  const auto r = miou(pred, gt, groups);
  double sum = 0.0;
  for (int c = 0; c <= 3; ++c) {
    EXPECT_DOUBLE_EQ(r.per_class.at(c), ref_iou(pred, gt, c));
    EXPECT_EQ(r.group(std::to_string(c)), r.per_class.at(c));
    sum += r.per_class.at(c);
  }
  EXPECT_NEAR(r.group("all"), sum / 4, 1e-15);
}

TEST(Miou, InvariantUnderConsistentRelabeling) {
  Rng rng(62);
  const std::map<int, int> perm{{0, 0}, {1, 6}, {2, 3}, {3, 1}};
  for (int trial = 0; trial < 50; ++trial) {
    LabelMap gt(5, 5), pred(5, 5);
    for (int i = 0; i < 25; ++i) {
      gt.labels[i] = rng.uniform_int(0, 3);
      pred.labels[i] = rng.uniform_int(0, 3);
    }
    LabelMap gt2 = gt, pred2 = pred;
    for (int& v : gt2.labels) v = perm.at(v);
    for (int& v : pred2.labels) v = perm.at(v);
    const auto a = miou(pred, gt, {{"all", {0, 1, 2, 3}}});
    const auto b = miou(pred2, gt2, {{"all", {0, 6, 3, 1}}});
    EXPECT_DOUBLE_EQ(a.group("all"), b.group("all"));
    for (const auto& [c, v] : a.per_class) EXPECT_EQ(b.per_class.at(perm.at(c)), v);
  }
}

TEST(StandardGroups, Layout) {
  const auto g = standard_groups({1, 2}, {5});
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].name, "old");
  EXPECT_EQ(g[1].classes, (std::vector<int>{5}));
  EXPECT_EQ(g[2].classes, (std::vector<int>{0, 1, 2, 5}));
}

TEST(Forgetting, ConstantHistoryHasNoDrop) {
  const auto d = forgetting({report_with({{1, 0.7}}), report_with({{1, 0.7}}),
                             report_with({{1, 0.7}})});
  EXPECT_EQ(d.at(1), 0.0);
}

TEST(Forgetting, DropFromBestPastValue) {
  const auto d = forgetting({report_with({{1, 0.8}}), report_with({{1, 0.5}})});
  EXPECT_NEAR(d.at(1), 0.3, 1e-15);
  const auto d3 = forgetting({report_with({{1, 0.6}}), report_with({{1, 0.9}}),
                              report_with({{1, 0.5}})});
  EXPECT_NEAR(d3.at(1), 0.4, 1e-15);
}

TEST(Forgetting, MonotoneIncreaseHasNoDrop) {
  const auto d = forgetting({report_with({{1, 0.2}, {2, 0.4}}), report_with({{1, 0.5}, {2, 0.6}}),
                             report_with({{1, 0.9}, {2, 0.7}})});
  EXPECT_EQ(d.at(1), 0.0);
  EXPECT_EQ(d.at(2), 0.0);
}

TEST(Forgetting, NeedsTwoSteps) {
  EXPECT_THROW(forgetting({report_with({{1, 0.5}})}), Error);
}
