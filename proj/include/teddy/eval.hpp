#pragma once

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "teddy/core.hpp"

namespace teddy {

/// Per-pixel argmax over all channels (background included) mapped to class
/// ids through the class space. Lowest channel wins ties.
inline LabelMap predict_labelmap(const ScoreMap& seg_logits, const ClassSpace& space) {
  if (seg_logits.channels() != space.num_channels())
    throw ShapeError("logits do not match the class space");
  LabelMap out(seg_logits.height(), seg_logits.width());
  std::vector<double> v(seg_logits.channels());
  for (int i = 0; i < seg_logits.pixels(); ++i) {
    for (int c = 0; c < seg_logits.channels(); ++c) v[c] = seg_logits.at(c, i);
    out.labels[i] = space.class_of_channel(argmax(v));
  }
  return out;
}

// Intersection and union pixel counts per class id, accumulated over images.
class IouAccumulator {
 public:
  void add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
      throw ShapeError("prediction and ground truth differ in H x W");
    for (int i = 0; i < gt.pixels(); ++i) {
      const int p = pred.labels[i], g = gt.labels[i];
      if (p == g) {
        ++counts_[p].inter;
        ++counts_[p].uni;
      } else {
        ++counts_[p].uni;
        ++counts_[g].uni;
      }
    }
  }

  // nullopt when the class is absent from both prediction and gt.
  std::optional<double> iou(int class_id) const {
    auto it = counts_.find(class_id);
    if (it == counts_.end() || it->second.uni == 0) return std::nullopt;
    return static_cast<double>(it->second.inter) / static_cast<double>(it->second.uni);
  }

 private:
  struct Counts {
    long long inter = 0;
    long long uni = 0;
  };
  std::map<int, Counts> counts_;
};

struct MetricGroup {
  std::string name;
  std::vector<int> classes;
};

struct MetricsReport {
  std::map<int, double> per_class;          // classes present in pred or gt
  std::map<std::string, double> group_mean; // NaN when no member is present
  std::vector<MetricGroup> groups;

  double group(const std::string& name) const { return group_mean.at(name); }
};

inline MetricsReport make_report(const IouAccumulator& acc, const std::vector<MetricGroup>& groups) {
  MetricsReport rep;
  rep.groups = groups;
  for (const auto& g : groups) {
    double sum = 0.0;
    int n = 0;
    for (int c : g.classes) {
      const auto v = acc.iou(c);
      if (!v) continue;
      rep.per_class[c] = *v;
      sum += *v;
      ++n;
    }
    rep.group_mean[g.name] = n ? sum / n : std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

/// IoU_c = |pred=c & gt=c| / |pred=c | gt=c|, pooled over all image pairs.
/// Classes absent from both are left out of the group means.
inline MetricsReport miou(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                          const std::vector<MetricGroup>& groups) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and gt counts differ");
  IouAccumulator acc;
  for (std::size_t k = 0; k < pred.size(); ++k) acc.add(pred[k], gt[k]);
  return make_report(acc, groups);
}

inline MetricsReport miou(const LabelMap& pred, const LabelMap& gt,
                          const std::vector<MetricGroup>& groups) {
  return miou(std::vector<LabelMap>{pred}, std::vector<LabelMap>{gt}, groups);
}

// old = step-0 foreground classes, new = classes added later, all = b + both.
inline std::vector<MetricGroup> standard_groups(const std::vector<int>& base_classes,
                                                const std::vector<int>& added_classes) {
  std::vector<int> all{ClassSpace::kBackground};
  all.insert(all.end(), base_classes.begin(), base_classes.end());
  all.insert(all.end(), added_classes.begin(), added_classes.end());
  return {{"old", base_classes}, {"new", added_classes}, {"all", all}};
}

/// For each class of the first report: best IoU over all but the last step
/// minus the final IoU, floored at 0. Needs at least two steps.
inline std::map<int, double> forgetting(const std::vector<MetricsReport>& history) {
  if (history.size() < 2) throw Error("forgetting needs at least two steps");
  std::map<int, double> drop;
  for (const auto& [c, first] : history.front().per_class) {
    double best = first;
    for (std::size_t k = 1; k + 1 < history.size(); ++k) {
      auto it = history[k].per_class.find(c);
      if (it != history[k].per_class.end()) best = std::max(best, it->second);
    }
    auto fin = history.back().per_class.find(c);
    const double final_iou = fin == history.back().per_class.end() ? 0.0 : fin->second;
    drop[c] = std::max(0.0, best - final_iou);
  }
  return drop;
}

}  // namespace teddy
