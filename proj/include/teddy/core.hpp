#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace teddy {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kProbEpsilon = 1e-7;

enum class Semantics { Logits, Probabilities, Scores, Binary };

inline std::string_view to_string(Semantics s) {
  switch (s) {
    case Semantics::Logits: return "logits";
    case Semantics::Probabilities: return "probabilities";
    case Semantics::Scores: return "scores";
    case Semantics::Binary: return "binary";
  }
  return "scores";
}

inline Semantics semantics_from_string(std::string_view s) {
  if (s == "logits") return Semantics::Logits;
  if (s == "probabilities") return Semantics::Probabilities;
  if (s == "scores") return Semantics::Scores;
  if (s == "binary") return Semantics::Binary;
  throw Error("unknown semantics '" + std::string(s) + "'");
}

/// Dense [channels x height x width] real tensor stored row-major as [c][h][w].
/// Pixel index i = h * width + w.
class ScoreMap {
 public:
  ScoreMap() = default;
  ScoreMap(int channels, int height, int width, Semantics semantics = Semantics::Scores,
           double fill = 0.0)
      : channels_(channels), height_(height), width_(width), semantics_(semantics) {
    if (channels < 0 || height < 0 || width < 0) throw ShapeError("negative ScoreMap extent");
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }
  ScoreMap(int channels, int height, int width, Semantics semantics, std::vector<double> data)
      : channels_(channels), height_(height), width_(width), semantics_(semantics),
        data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(channels) * height * width)
      throw ShapeError("ScoreMap data length does not match shape");
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int pixels() const { return height_ * width_; }
  bool empty() const { return data_.empty(); }
  Semantics semantics() const { return semantics_; }
  void set_semantics(Semantics s) { semantics_ = s; }

  double& at(int c, int i) { return data_[static_cast<std::size_t>(c) * pixels() + i]; }
  double at(int c, int i) const { return data_[static_cast<std::size_t>(c) * pixels() + i]; }
  double& at(int c, int h, int w) { return at(c, h * width_ + w); }
  double at(int c, int h, int w) const { return at(c, h * width_ + w); }

  std::span<double> channel(int c) {
    return {data_.data() + static_cast<std::size_t>(c) * pixels(),
            static_cast<std::size_t>(pixels())};
  }
  std::span<const double> channel(int c) const {
    return {data_.data() + static_cast<std::size_t>(c) * pixels(),
            static_cast<std::size_t>(pixels())};
  }

  // Copies the channel vector at pixel i.
  std::vector<double> pixel(int i) const {
    std::vector<double> v(channels_);
    for (int c = 0; c < channels_; ++c) v[c] = at(c, i);
    return v;
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_extent(const ScoreMap& o) const {
    return height_ == o.height_ && width_ == o.width_;
  }

  // Checks the semantics-dependent value invariants.
  bool valid() const {
    if (data_.size() != static_cast<std::size_t>(channels_) * height_ * width_) return false;
    for (double v : data_) {
      if (semantics_ == Semantics::Probabilities && !(v >= 0.0 && v <= 1.0)) return false;
      if (semantics_ == Semantics::Binary && v != 0.0 && v != 1.0) return false;
    }
    return true;
  }

  friend bool operator==(const ScoreMap&, const ScoreMap&) = default;

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  Semantics semantics_ = Semantics::Scores;
  std::vector<double> data_;
};

/// Integer class-id map [height x width]; 0 is background.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  int pixels() const { return height * width; }
  int& at(int h, int w) { return labels[static_cast<std::size_t>(h) * width + w]; }
  int at(int h, int w) const { return labels[static_cast<std::size_t>(h) * width + w]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Ordered class registry for one incremental step. Channel 0 is always the
/// background; old classes follow in order, then new classes.
class ClassSpace {
 public:
  static constexpr int kBackground = 0;

  ClassSpace() = default;
  ClassSpace(std::vector<int> old_classes, std::vector<int> new_classes)
      : old_(std::move(old_classes)), new_(std::move(new_classes)) {
    std::vector<int> all = old_;
    all.insert(all.end(), new_.begin(), new_.end());
    for (int id : all)
      if (id <= 0) throw ConfigError("class ids must be positive (0 is background)");
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
      throw ConfigError("old and new class lists overlap");
  }

  const std::vector<int>& old_classes() const { return old_; }
  const std::vector<int>& new_classes() const { return new_; }

  // Background + old + new.
  int num_channels() const { return 1 + static_cast<int>(old_.size() + new_.size()); }
  int num_old_channels() const { return 1 + static_cast<int>(old_.size()); }

  // Class id carried by a channel of a {b} + old + new map.
  int class_of_channel(int channel) const {
    if (channel == 0) return kBackground;
    int k = channel - 1;
    if (k < static_cast<int>(old_.size())) return old_[k];
    k -= static_cast<int>(old_.size());
    if (k < static_cast<int>(new_.size())) return new_[k];
    throw ShapeError("channel out of class space");
  }

  // Channel index of a class id, or -1 if the id is not in Y^t.
  int channel_of(int class_id) const {
    if (class_id == kBackground) return 0;
    for (std::size_t k = 0; k < old_.size(); ++k)
      if (old_[k] == class_id) return 1 + static_cast<int>(k);
    for (std::size_t k = 0; k < new_.size(); ++k)
      if (new_[k] == class_id) return 1 + static_cast<int>(old_.size() + k);
    return -1;
  }

  std::vector<int> old_channels() const {
    std::vector<int> v;
    for (std::size_t k = 0; k < old_.size(); ++k) v.push_back(1 + static_cast<int>(k));
    return v;
  }
  std::vector<int> new_channels() const {
    std::vector<int> v;
    for (std::size_t k = 0; k < new_.size(); ++k)
      v.push_back(1 + static_cast<int>(old_.size() + k));
    return v;
  }

  // Y^t as the class space of the next step, with next_new as C^{t+1}.
  ClassSpace advance(std::vector<int> next_new) const {
    std::vector<int> seen = old_;
    seen.insert(seen.end(), new_.begin(), new_.end());
    return ClassSpace(std::move(seen), std::move(next_new));
  }

  friend bool operator==(const ClassSpace&, const ClassSpace&) = default;

 private:
  std::vector<int> old_;
  std::vector<int> new_;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline ScoreMap logistic(const ScoreMap& x) {
  ScoreMap out = x;
  out.set_semantics(Semantics::Probabilities);
  for (double& v : out.data()) v = sigmoid(v);
  return out;
}

/// Index of the strictly largest value; lowest index wins ties.
inline int argmax(std::span<const double> v) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(v.size()); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

/// Per-pixel one-hot of the argmax channel. A pixel whose channels are all
/// exactly 0 maps to the zero vector. With drop_background, channel 0 is
/// removed from the output.
inline ScoreMap one_hot(const ScoreMap& s, bool drop_background) {
  if (s.channels() < 1 || s.pixels() == 0) throw ShapeError("one_hot of an empty map");
  const int first = drop_background ? 1 : 0;
  ScoreMap out(s.channels() - first, s.height(), s.width(), Semantics::Binary);
  std::vector<double> v(s.channels());
  for (int i = 0; i < s.pixels(); ++i) {
    bool all_zero = true;
    for (int c = 0; c < s.channels(); ++c) {
      v[c] = s.at(c, i);
      if (v[c] != 0.0) all_zero = false;
    }
    if (all_zero) continue;
    const int k = argmax(v);
    if (k >= first) out.at(k - first, i) = 1.0;
  }
  return out;
}

/// Softmax over channels at every pixel.
inline ScoreMap softmax_channels(const ScoreMap& s) {
  ScoreMap out(s.channels(), s.height(), s.width(), Semantics::Probabilities);
  for (int i = 0; i < s.pixels(); ++i) {
    double mx = s.at(0, i);
    for (int c = 1; c < s.channels(); ++c) mx = std::max(mx, s.at(c, i));
    double z = 0.0;
    for (int c = 0; c < s.channels(); ++c) z += std::exp(s.at(c, i) - mx);
    for (int c = 0; c < s.channels(); ++c) out.at(c, i) = std::exp(s.at(c, i) - mx) / z;
  }
  return out;
}

// Keeps only the listed channels, in the order given.
inline ScoreMap select_channels(const ScoreMap& s, std::span<const int> channels) {
  ScoreMap out(static_cast<int>(channels.size()), s.height(), s.width(), s.semantics());
  for (std::size_t k = 0; k < channels.size(); ++k) {
    if (channels[k] < 0 || channels[k] >= s.channels())
      throw ShapeError("channel index out of range");
    auto src = s.channel(channels[k]);
    std::copy(src.begin(), src.end(), out.channel(static_cast<int>(k)).begin());
  }
  return out;
}

inline double clamp_unit(double a) {
  if (a < 0.0) throw Error("clamp_unit expects a non-negative value");
  return std::min(1.0, a);
}

inline std::vector<double> clamp_unit(std::span<const double> a) {
  std::vector<double> out(a.size());
  std::transform(a.begin(), a.end(), out.begin(), [](double v) { return clamp_unit(v); });
  return out;
}

inline double clip_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

/// Binary cross-entropy -(t ln p + (1-t) ln(1-p)) with p clipped to
/// [1e-7, 1 - 1e-7].
inline double bce(double target, double prob) {
  const double p = clip_prob(prob);
  return -(target * std::log(p) + (1.0 - target) * std::log1p(-p));
}

// d bce(t, sigmoid(z)) / dz. Zero where the clip is active.
inline double bce_logit_grad(double target, double logit) {
  const double p = sigmoid(logit);
  if (p <= kProbEpsilon || p >= 1.0 - kProbEpsilon) return 0.0;
  return p - target;
}

}  // namespace teddy
