#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "teddy/core.hpp"
#include "teddy/data.hpp"
#include "teddy/eval.hpp"
#include "teddy/masks.hpp"
#include "teddy/trainer.hpp"

namespace teddy {

using json = nlohmann::json;

class FormatError : public Error {
 public:
  using Error::Error;
};

class TruncatedError : public Error {
 public:
  using Error::Error;
};

class SemanticsMismatchError : public Error {
 public:
  using Error::Error;
};

enum class ElementKind { F32, F64, U8 };

inline std::string_view to_string(ElementKind k) {
  switch (k) {
    case ElementKind::F32: return "f32";
    case ElementKind::F64: return "f64";
    case ElementKind::U8: return "u8";
  }
  return "f32";
}

inline std::size_t element_size(ElementKind k) {
  switch (k) {
    case ElementKind::F32: return 4;
    case ElementKind::F64: return 8;
    case ElementKind::U8: return 1;
  }
  return 4;
}

inline ElementKind element_kind_from_string(std::string_view s) {
  if (s == "f32") return ElementKind::F32;
  if (s == "f64") return ElementKind::F64;
  if (s == "u8") return ElementKind::U8;
  throw FormatError("unknown element kind '" + std::string(s) + "'");
}

/// Decoded TDY1 block: shape [c,h,w], values widened to double.
struct RawTensor {
  ElementKind kind = ElementKind::F32;
  std::array<int, 3> shape{0, 0, 0};
  std::string semantics;
  std::vector<double> values;

  std::size_t count() const {
    return static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  }
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t bits, int bytes) {
  for (int b = 0; b < bytes; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

inline std::string read_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line) || in.eof())
    throw TruncatedError(std::string(what) + ": missing header line");
  return line;
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  char buf[4] = {0, 0, 0, 0};
  in.read(buf, 4);
  if (in.gcount() < 4) {
    if (in.gcount() == 0 && magic.empty()) return;
    throw TruncatedError("file shorter than its magic");
  }
  if (std::string_view(buf, 4) != magic)
    throw FormatError("bad magic: expected '" + std::string(magic) + "'");
}

inline json parse_header(const std::string& line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
}

inline std::string read_payload(std::istream& in, std::size_t bytes) {
  std::string buf(bytes, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes)
    throw TruncatedError("payload truncated: expected " + std::to_string(bytes) + " bytes, got " +
                         std::to_string(in.gcount()));
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  return f;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  return f;
}

}  // namespace detail

// ---- TDY1 tensors ---------------------------------------------------------

/// "TDY1" + one JSON header line + little-endian row-major payload.
inline void write_tensor(std::ostream& out, const RawTensor& t) {
  if (t.values.size() != t.count()) throw ShapeError("tensor values do not match shape");
  json h;
  h["kind"] = std::string(to_string(t.kind));
  h["shape"] = {t.shape[0], t.shape[1], t.shape[2]};
  h["semantics"] = t.semantics;
  std::string buf = "TDY1" + h.dump() + "\n";
  buf.reserve(buf.size() + t.count() * element_size(t.kind));
  for (double v : t.values) {
    switch (t.kind) {
      case ElementKind::F32:
        detail::put_le(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
        break;
      case ElementKind::F64: detail::put_le(buf, std::bit_cast<std::uint64_t>(v), 8); break;
      case ElementKind::U8:
        if (v < 0 || v > 255 || v != std::floor(v)) throw Error("u8 tensor value out of range");
        buf.push_back(static_cast<char>(static_cast<unsigned char>(v)));
        break;
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline RawTensor read_tensor(std::istream& in) {
  detail::expect_magic(in, "TDY1");
  const json h = detail::parse_header(detail::read_line(in, "tensor"));
  RawTensor t;
  try {
    t.kind = element_kind_from_string(h.at("kind").get<std::string>());
    const auto shape = h.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw FormatError("tensor shape must have three extents");
    for (int k = 0; k < 3; ++k) {
      if (shape[k] < 0) throw FormatError("negative tensor extent");
      t.shape[k] = shape[k];
    }
    t.semantics = h.at("semantics").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad tensor header: ") + e.what());
  }
  const std::size_t es = element_size(t.kind);
  const std::string payload = detail::read_payload(in, t.count() * es);
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  t.values.resize(t.count());
  for (std::size_t k = 0; k < t.count(); ++k, p += es) {
    switch (t.kind) {
      case ElementKind::F32:
        t.values[k] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p, 4)));
        break;
      case ElementKind::F64: t.values[k] = std::bit_cast<double>(detail::get_le(p, 8)); break;
      case ElementKind::U8: t.values[k] = *p; break;
    }
  }
  return t;
}

inline void save_tensor(const std::filesystem::path& path, const ScoreMap& map,
                        ElementKind kind = ElementKind::F32) {
  auto f = detail::open_out(path);
  write_tensor(f, {kind, {map.channels(), map.height(), map.width()},
                   std::string(to_string(map.semantics())), map.data()});
}

inline ScoreMap to_score_map(RawTensor t) {
  Semantics s;
  try {
    s = semantics_from_string(t.semantics);
  } catch (const Error&) {
    throw SemanticsMismatchError("tensor semantics '" + t.semantics + "' is not a score map");
  }
  ScoreMap m(t.shape[0], t.shape[1], t.shape[2], s, std::move(t.values));
  if (!m.valid()) throw SemanticsMismatchError("tensor values violate their semantics");
  return m;
}

inline ScoreMap load_tensor(const std::filesystem::path& path) {
  auto f = detail::open_in(path);
  return to_score_map(read_tensor(f));
}

// Loads and checks the expected semantics.
inline ScoreMap load_tensor(const std::filesystem::path& path, Semantics expected) {
  ScoreMap m = load_tensor(path);
  if (m.semantics() != expected)
    throw SemanticsMismatchError("expected " + std::string(to_string(expected)) + " tensor, got " +
                                 std::string(to_string(m.semantics())));
  return m;
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& l) {
  auto f = detail::open_out(path);
  write_tensor(f, {ElementKind::U8, {1, l.height, l.width}, "labels",
                   std::vector<double>(l.labels.begin(), l.labels.end())});
}

inline LabelMap load_labels(const std::filesystem::path& path) {
  auto f = detail::open_in(path);
  RawTensor t = read_tensor(f);
  if (t.semantics != "labels") throw SemanticsMismatchError("expected a label tensor");
  if (t.shape[0] != 1) throw ShapeError("label tensor must have one channel");
  LabelMap l(t.shape[1], t.shape[2]);
  for (std::size_t k = 0; k < t.values.size(); ++k) l.labels[k] = static_cast<int>(t.values[k]);
  return l;
}

// ---- TDYM mask sets -------------------------------------------------------

inline void write_masks(std::ostream& out, const BinaryMaskSet& set) {
  json h;
  h["m"] = set.count();
  h["h"] = set.height();
  h["w"] = set.width();
  std::string buf = "TDYM" + h.dump() + "\n";
  for (const auto& m : set.masks())
    for (auto v : m) buf.push_back(static_cast<char>(v));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

/// Reads a mask set; expected_h/expected_w < 0 skip the shape check.
inline BinaryMaskSet read_masks(std::istream& in, int expected_h = -1, int expected_w = -1) {
  detail::expect_magic(in, "TDYM");
  const json h = detail::parse_header(detail::read_line(in, "mask set"));
  int m, hh, ww;
  try {
    m = h.at("m").get<int>();
    hh = h.at("h").get<int>();
    ww = h.at("w").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad mask header: ") + e.what());
  }
  if (m < 0 || hh < 0 || ww < 0) throw FormatError("negative mask header extent");
  if ((expected_h >= 0 && hh != expected_h) || (expected_w >= 0 && ww != expected_w))
    throw ShapeError("mask set is " + std::to_string(hh) + "x" + std::to_string(ww) +
                     ", expected " + std::to_string(expected_h) + "x" + std::to_string(expected_w));
  const std::size_t plane = static_cast<std::size_t>(hh) * ww;
  const std::string payload = detail::read_payload(in, plane * m);
  BinaryMaskSet set(hh, ww, Provenance::Ingested);
  for (int k = 0; k < m; ++k) {
    Mask mask(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      const auto v = static_cast<unsigned char>(payload[k * plane + i]);
      if (v > 1) throw FormatError("mask payload is not binary");
      mask[i] = v;
    }
    set.add(std::move(mask));
  }
  return set;
}

inline void save_masks(const BinaryMaskSet& set, const std::filesystem::path& path) {
  auto f = detail::open_out(path);
  write_masks(f, set);
}

inline BinaryMaskSet load_masks(const std::filesystem::path& path, int expected_h = -1,
                                int expected_w = -1) {
  auto f = detail::open_in(path);
  return read_masks(f, expected_h, expected_w);
}

// ---- JSON conversions -----------------------------------------------------

inline json to_json(const ClassSpace& s) {
  return {{"old", s.old_classes()}, {"new", s.new_classes()}};
}

inline ClassSpace class_space_from_json(const json& j) {
  return ClassSpace(j.at("old").get<std::vector<int>>(), j.at("new").get<std::vector<int>>());
}

inline json to_json(const DatasetConfig& c) {
  json cat = json::array();
  for (const auto& e : c.catalog)
    cat.push_back({{"class_id", e.class_id},
                   {"shape", std::string(to_string(e.shape))},
                   {"color", e.color}});
  return {{"height", c.height},
          {"width", c.width},
          {"min_shapes", c.min_shapes},
          {"max_shapes", c.max_shapes},
          {"min_size", c.min_size},
          {"max_size", c.max_size},
          {"catalog", cat},
          {"background_color", c.background_color},
          {"background_noise", c.background_noise},
          {"color_jitter", c.color_jitter},
          {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.min_shapes = j.at("min_shapes");
  c.max_shapes = j.at("max_shapes");
  c.min_size = j.at("min_size");
  c.max_size = j.at("max_size");
  for (const auto& e : j.at("catalog"))
    c.catalog.push_back({e.at("class_id").get<int>(),
                         shape_kind_from_string(e.at("shape").get<std::string>()),
                         e.at("color").get<std::array<double, 3>>()});
  c.background_color = j.at("background_color").get<std::array<double, 3>>();
  c.background_noise = j.at("background_noise");
  c.color_jitter = j.at("color_jitter");
  c.seed = j.at("seed");
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"lr0", c.lr0},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"poly_power", c.poly_power},
          {"seed", c.seed},
          {"tme", c.tme},
          {"fusion", c.fusion},
          {"alpha", c.fusion_cfg.alpha},
          {"beta", c.fusion_cfg.beta},
          {"eta", c.fusion_cfg.eta},
          {"focal_lambda", c.pooling.focal_lambda},
          {"focal_p", c.pooling.focal_p},
          {"pool_epsilon", c.pooling.epsilon},
          {"w_cls", c.weights.cls},
          {"w_loc", c.weights.loc},
          {"w_seg", c.weights.seg}};
}

// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("epochs", c.epochs);
  get("warmup_epochs", c.warmup_epochs);
  get("lr0", c.lr0);
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("poly_power", c.poly_power);
  get("seed", c.seed);
  get("tme", c.tme);
  get("fusion", c.fusion);
  get("alpha", c.fusion_cfg.alpha);
  get("beta", c.fusion_cfg.beta);
  get("eta", c.fusion_cfg.eta);
  get("focal_lambda", c.pooling.focal_lambda);
  get("focal_p", c.pooling.focal_p);
  get("pool_epsilon", c.pooling.epsilon);
  get("w_cls", c.weights.cls);
  get("w_loc", c.weights.loc);
  get("w_seg", c.weights.seg);
  return c;
}

inline json to_json(const MetricsReport& r) {
  json per = json::object();
  for (const auto& [c, v] : r.per_class) per[std::to_string(c)] = v;
  json groups = json::object();
  for (const auto& [name, v] : r.group_mean)
    groups[name] = std::isnan(v) ? json(nullptr) : json(v);
  json members = json::object();
  for (const auto& g : r.groups) members[g.name] = g.classes;
  return {{"per_class", per}, {"groups", groups}, {"group_members", members}};
}

// 64-bit FNV-1a of a string, hex encoded.
inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---- checkpoints ----------------------------------------------------------

namespace detail {

inline RawTensor scorer_block(const std::vector<double>& v, int rows, int cols, const char* what) {
  return {ElementKind::F64, {1, rows, cols}, what, v};
}

}  // namespace detail

/// "TDYC" + JSON header line + eight f64 TDY1 blocks: seg weights, seg bias,
/// localizer weights, localizer bias, then the same four momentum buffers.
inline void save_checkpoint(const ToyModel& m, const std::filesystem::path& path,
                            const std::string& config_hash = "") {
  json h;
  h["format"] = "teddy-checkpoint";
  h["version"] = 1;
  h["step"] = m.step;
  h["class_space"] = to_json(m.space);
  h["dims"] = m.params.seg.dims;
  h["config_hash"] = config_hash;
  h["blocks"] = {"seg_w", "seg_b", "loc_w", "loc_b", "seg_w_vel", "seg_b_vel", "loc_w_vel",
                 "loc_b_vel"};
  std::ostringstream os;
  os << "TDYC" << h.dump() << "\n";
  for (const ModelParams* p : {&m.params, &m.velocity}) {
    const int rows = p->seg.rows, d = p->seg.dims;
    write_tensor(os, detail::scorer_block(p->seg.weights, rows, d, "params"));
    write_tensor(os, detail::scorer_block(p->seg.bias, 1, rows, "params"));
    write_tensor(os, detail::scorer_block(p->loc.weights, rows, d, "params"));
    write_tensor(os, detail::scorer_block(p->loc.bias, 1, rows, "params"));
  }
  auto f = detail::open_out(path);
  const std::string s = os.str();
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Checkpoint {
  ToyModel model;
  std::string config_hash;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto f = detail::open_in(path);
  detail::expect_magic(f, "TDYC");
  const json h = detail::parse_header(detail::read_line(f, "checkpoint"));
  Checkpoint ck;
  int dims;
  try {
    if (h.at("format") != "teddy-checkpoint") throw FormatError("not a teddy checkpoint");
    ck.model.step = h.at("step");
    ck.model.space = class_space_from_json(h.at("class_space"));
    dims = h.at("dims");
    ck.config_hash = h.at("config_hash");
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  const int rows = ck.model.space.num_channels();
  auto take = [&](std::vector<double>& dst, int r, int c) {
    RawTensor t = read_tensor(f);
    if (t.kind != ElementKind::F64 || t.shape[0] != 1 || t.shape[1] != r || t.shape[2] != c)
      throw ShapeError("checkpoint block has an unexpected shape");
    dst = std::move(t.values);
  };
  for (ModelParams* p : {&ck.model.params, &ck.model.velocity}) {
    *p = ModelParams::zeros(rows, dims);
    take(p->seg.weights, rows, dims);
    take(p->seg.bias, 1, rows);
    take(p->loc.weights, rows, dims);
    take(p->loc.bias, 1, rows);
  }
  return ck;
}

// ---- datasets -------------------------------------------------------------

/// Writes dataset.json plus one pixel tensor (f32) and one label tensor (u8)
/// per sample under dir.
inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write_pool = [&](const std::vector<ImageSample>& pool, const std::string& sub) {
    json arr = json::array();
    for (const auto& s : pool) {
      const std::string px = sub + "/" + s.id + "_pixels.tdy";
      const std::string lb = sub + "/" + s.id + "_labels.tdy";
      save_tensor(dir / px, s.pixels, ElementKind::F32);
      save_labels(dir / lb, s.gt_labels);
      arr.push_back({{"id", s.id}, {"pixels", px}, {"labels", lb}});
    }
    return arr;
  };
  json m;
  m["format"] = "teddy-dataset";
  m["version"] = 1;
  m["config"] = to_json(d.config);
  m["mode"] = std::string(to_string(d.mode));
  m["steps"] = d.steps;
  m["train"] = write_pool(d.train, "train");
  m["test"] = write_pool(d.test, "test");
  json splits = json::array();
  for (const auto& s : d.splits) {
    std::vector<std::string> ids;
    for (int i = 0; i < s.size(); ++i) ids.push_back(s.id(i));
    splits.push_back({{"step", s.step()}, {"class_space", to_json(s.class_space())}, {"samples", ids}});
  }
  m["splits"] = splits;
  auto f = detail::open_out(dir / "dataset.json");
  f << m.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f = detail::open_in(dir / "dataset.json");
  json m;
  try {
    m = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
  if (m.value("format", "") != "teddy-dataset") throw FormatError("not a teddy dataset manifest");
  Dataset d;
  d.config = dataset_config_from_json(m.at("config"));
  d.mode = split_mode_from_string(m.at("mode").get<std::string>());
  d.steps = m.at("steps").get<std::vector<std::vector<int>>>();
  std::vector<int> catalog_ids;
  for (const auto& e : d.config.catalog) catalog_ids.push_back(e.class_id);
  auto read_pool = [&](const json& arr) {
    std::vector<ImageSample> pool;
    for (const auto& e : arr) {
      ImageSample s;
      s.id = e.at("id");
      s.pixels = load_tensor(dir / e.at("pixels").get<std::string>());
      s.gt_labels = load_labels(dir / e.at("labels").get<std::string>());
      s.image_level = image_level_of(s, catalog_ids);
      pool.push_back(std::move(s));
    }
    return pool;
  };
  d.train = read_pool(m.at("train"));
  d.test = read_pool(m.at("test"));
  std::map<std::string, const ImageSample*> by_id;
  for (const auto& s : d.train) by_id[s.id] = &s;
  for (const auto& sp : m.at("splits")) {
    const ClassSpace space = class_space_from_json(sp.at("class_space"));
    std::vector<ImageSample> samples;
    for (const auto& id : sp.at("samples")) {
      auto it = by_id.find(id.get<std::string>());
      if (it == by_id.end()) throw FormatError("split references unknown sample " + id.dump());
      ImageSample s = *it->second;
      s.image_level = image_level_of(s, space);
      samples.push_back(std::move(s));
    }
    d.splits.emplace_back(sp.at("step").get<int>(), space, d.mode, std::move(samples));
  }
  return d;
}

// ---- PGM export -----------------------------------------------------------

/// Plain (P2) PGM, maxval 255, value round(v * 255) with halves rounded up.
inline void export_pgm(const ScoreMap& map, const std::filesystem::path& path) {
  if (map.channels() != 1) throw ShapeError("export_pgm needs a single-channel map");
  auto f = detail::open_out(path);
  f << "P2\n" << map.width() << " " << map.height() << "\n255\n";
  for (int h = 0; h < map.height(); ++h) {
    for (int w = 0; w < map.width(); ++w) {
      const double v = map.at(0, h, w);
      if (!(v >= 0.0 && v <= 1.0)) throw Error("export_pgm values must lie in [0, 1]");
      f << (w ? " " : "") << static_cast<int>(std::floor(v * 255.0 + 0.5));
    }
    f << "\n";
  }
}

// Gray level of class id k in label-map exports.
inline int label_gray(int class_id) { return std::min(255, class_id * 36); }

inline void export_pgm(const LabelMap& labels, const std::filesystem::path& path) {
  auto f = detail::open_out(path);
  f << "P2\n" << labels.width << " " << labels.height << "\n255\n";
  for (int h = 0; h < labels.height; ++h) {
    for (int w = 0; w < labels.width; ++w) f << (w ? " " : "") << label_gray(labels.at(h, w));
    f << "\n";
  }
}

}  // namespace teddy
