#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "teddy/io.hpp"
#include "teddy/rng.hpp"

using namespace teddy;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = TEDDY_FIXTURE_DIR;

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            (std::string("teddy_io_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ScoreMap random_map(Rng& rng, Semantics s) {
  ScoreMap m(rng.uniform_int(1, 4), rng.uniform_int(1, 6), rng.uniform_int(1, 6), s);
  for (double& v : m.data()) {
    switch (s) {
      case Semantics::Binary: v = rng.uniform_int(0, 1); break;
      case Semantics::Probabilities: v = rng.uniform(); break;
      default: v = rng.normal(0.0, 5.0);
    }
  }
  return m;
}

}  // namespace

TEST(TensorFile, F64RoundTripIsBitwise) {
  TempDir dir;
  Rng rng(71);
  for (auto s : {Semantics::Logits, Semantics::Probabilities, Semantics::Scores, Semantics::Binary}) {
    const auto m = random_map(rng, s);
    save_tensor(dir / "t.tdy", m, ElementKind::F64);
    const auto back = load_tensor(dir / "t.tdy");
    EXPECT_EQ(back.semantics(), s);
    ASSERT_EQ(back.data().size(), m.data().size());
    for (std::size_t k = 0; k < m.data().size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back.data()[k]), std::bit_cast<std::uint64_t>(m.data()[k]));
  }
}

TEST(TensorFile, F32RoundTripOfFloatValuesIsBitwise) {
  TempDir dir;
  Rng rng(72);
  auto m = random_map(rng, Semantics::Scores);
  for (double& v : m.data()) v = static_cast<float>(v);
  save_tensor(dir / "t.tdy", m);
  EXPECT_EQ(load_tensor(dir / "t.tdy"), m);
  save_tensor(dir / "u.tdy", load_tensor(dir / "t.tdy"));
  EXPECT_EQ(slurp(dir / "t.tdy"), slurp(dir / "u.tdy"));
}

TEST(TensorFile, ByteLayout) {
  std::ostringstream os;
  write_tensor(os, {ElementKind::U8, {1, 1, 2}, "labels", {3, 250}});
  EXPECT_EQ(os.str(), std::string("TDY1{\"kind\":\"u8\",\"semantics\":\"labels\",\"shape\":[1,1,2]}\n") +
                          "\x03\xfa");
  std::ostringstream f;
  write_tensor(f, {ElementKind::F32, {1, 1, 1}, "scores", {1.0}});
  EXPECT_EQ(f.str().substr(f.str().size() - 4), std::string("\x00\x00\x80\x3f", 4));
}

TEST(TensorFile, TruncatedPayloadThrows) {
  TempDir dir;
  save_tensor(dir / "t.tdy", ScoreMap(2, 3, 3, Semantics::Scores, 0.5));
  const std::string bytes = slurp(dir / "t.tdy");
  spit(dir / "cut.tdy", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_tensor(dir / "cut.tdy"), TruncatedError);
  spit(dir / "nohdr.tdy", bytes.substr(0, 10));
  EXPECT_THROW(load_tensor(dir / "nohdr.tdy"), TruncatedError);
}

TEST(TensorFile, WrongMagicThrows) {
  TempDir dir;
  save_tensor(dir / "t.tdy", ScoreMap(1, 2, 2, Semantics::Scores));
  std::string bytes = slurp(dir / "t.tdy");
  bytes[3] = '2';
  spit(dir / "bad.tdy", bytes);
  EXPECT_THROW(load_tensor(dir / "bad.tdy"), FormatError);
  EXPECT_THROW(load_masks(dir / "t.tdy"), FormatError);
}

TEST(TensorFile, MalformedHeaderThrows) {
  std::istringstream a(std::string("TDY1{\"kind\":\"f16\",\"semantics\":\"scores\",\"shape\":[1,1,1]}\n") +
                       std::string(2, '\0'));
  EXPECT_THROW(read_tensor(a), FormatError);
  std::istringstream b("TDY1{\"kind\":\"u8\",\"shape\":[1,1]}\n\x01");
  EXPECT_THROW(read_tensor(b), FormatError);
  std::istringstream c("TDY1not json\n");
  EXPECT_THROW(read_tensor(c), FormatError);
}

TEST(TensorFile, SemanticsMismatchThrows) {
  TempDir dir;
  save_tensor(dir / "p.tdy", ScoreMap(1, 1, 2, Semantics::Probabilities, {0.2, 0.3}));
  EXPECT_NO_THROW(load_tensor(dir / "p.tdy", Semantics::Probabilities));
  EXPECT_THROW(load_tensor(dir / "p.tdy", Semantics::Logits), SemanticsMismatchError);
  save_labels(dir / "l.tdy", LabelMap(2, 2));
  EXPECT_THROW(load_tensor(dir / "l.tdy"), SemanticsMismatchError);
  std::ostringstream os;
  write_tensor(os, {ElementKind::F32, {1, 1, 1}, "probabilities", {1.5}});
  std::istringstream in(os.str());
  EXPECT_THROW(to_score_map(read_tensor(in)), SemanticsMismatchError);
}

TEST(TensorFile, MissingFileIsAnError) {
  EXPECT_THROW(load_tensor("/nonexistent/dir/x.tdy"), Error);
}

TEST(LabelFile, RoundTrip) {
  TempDir dir;
  LabelMap l(3, 5);
  for (int i = 0; i < l.pixels(); ++i) l.labels[i] = i % 7;
  save_labels(dir / "l.tdy", l);
  EXPECT_EQ(load_labels(dir / "l.tdy"), l);
  save_tensor(dir / "s.tdy", ScoreMap(1, 1, 1, Semantics::Scores));
  EXPECT_THROW(load_labels(dir / "s.tdy"), SemanticsMismatchError);
}

TEST(MaskFile, RoundTripAndChecks) {
  TempDir dir;
  BinaryMaskSet set(2, 3, Provenance::Ingested);
  set.add({1, 0, 1, 0, 1, 0});
  set.add({0, 0, 0, 1, 1, 1});
  save_masks(set, dir / "m.tdym");
  EXPECT_EQ(load_masks(dir / "m.tdym", 2, 3), set);
  EXPECT_EQ(load_masks(dir / "m.tdym").provenance(), Provenance::Ingested);
  EXPECT_THROW(load_masks(dir / "m.tdym", 3, 2), ShapeError);
  std::string bytes = slurp(dir / "m.tdym");
  spit(dir / "cut.tdym", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_masks(dir / "cut.tdym"), TruncatedError);
  bytes.back() = 2;
  spit(dir / "nb.tdym", bytes);
  EXPECT_THROW(load_masks(dir / "nb.tdym"), FormatError);
}

TEST(MaskFile, EmptySetRoundTrips) {
  TempDir dir;
  const BinaryMaskSet set(4, 4, Provenance::Partitioner);
  save_masks(set, dir / "e.tdym");
  const auto back = load_masks(dir / "e.tdym");
  EXPECT_EQ(back.count(), 0);
  EXPECT_EQ(back.height(), 4);
}

TEST(GoldenFixtures, ScoresF32) {
  const auto m = load_tensor(kFixtures / "golden_scores_f32.tdy", Semantics::Scores);
  ASSERT_EQ(m.channels(), 2);
  ASSERT_EQ(m.height(), 2);
  ASSERT_EQ(m.width(), 3);
  const std::vector<float> want{0.0f, -1.5f, 0.1f, 3.25f, 1e-3f, -0.0f,
                                7.0f, 0.5f,  -2.75f, 1.0f, 65504.0f, 0.2f};
  for (std::size_t k = 0; k < want.size(); ++k)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(m.data()[k]),
              std::bit_cast<std::uint64_t>(static_cast<double>(want[k])));
}

TEST(GoldenFixtures, ProbabilitiesF64) {
  const auto m = load_tensor(kFixtures / "golden_probs_f64.tdy", Semantics::Probabilities);
  EXPECT_EQ(m.data(), (std::vector<double>{0.0, 0.1, 0.5, 1.0}));
}

TEST(GoldenFixtures, LabelsU8) {
  const auto l = load_labels(kFixtures / "golden_labels_u8.tdy");
  EXPECT_EQ(l.height, 3);
  EXPECT_EQ(l.width, 4);
  EXPECT_EQ(l.labels, (std::vector<int>{0, 0, 1, 1, 0, 2, 2, 1, 5, 5, 0, 0}));
}

TEST(GoldenFixtures, Masks) {
  const auto s = load_masks(kFixtures / "golden_masks.tdym", 3, 3);
  ASSERT_EQ(s.count(), 2);
  EXPECT_EQ(s.mask(0), (Mask{1, 1, 0, 1, 1, 0, 0, 0, 0}));
  EXPECT_EQ(s.mask(1), (Mask{0, 0, 0, 0, 1, 1, 0, 1, 1}));
}

TEST(GoldenFixtures, ResaveIsByteIdentical) {
  TempDir dir;
  save_tensor(dir / "s.tdy", load_tensor(kFixtures / "golden_scores_f32.tdy"), ElementKind::F32);
  EXPECT_EQ(slurp(dir / "s.tdy"), slurp(kFixtures / "golden_scores_f32.tdy"));
  save_tensor(dir / "p.tdy", load_tensor(kFixtures / "golden_probs_f64.tdy"), ElementKind::F64);
  EXPECT_EQ(slurp(dir / "p.tdy"), slurp(kFixtures / "golden_probs_f64.tdy"));
  save_labels(dir / "l.tdy", load_labels(kFixtures / "golden_labels_u8.tdy"));
  EXPECT_EQ(slurp(dir / "l.tdy"), slurp(kFixtures / "golden_labels_u8.tdy"));
  save_masks(load_masks(kFixtures / "golden_masks.tdym"), dir / "m.tdym");
  EXPECT_EQ(slurp(dir / "m.tdym"), slurp(kFixtures / "golden_masks.tdym"));
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir;
  auto m = ToyModel::initial(ClassSpace({1, 2}, {5}));
  m.step = 1;
  Rng rng(73);
  for (ModelParams* p : {&m.params, &m.velocity})
    for (auto* v : {&p->seg.weights, &p->seg.bias, &p->loc.weights, &p->loc.bias})
      for (double& x : *v) x = rng.normal(0.0, 1.0);
  save_checkpoint(m, dir / "c.tdyc", "abc123");
  const auto ck = load_checkpoint(dir / "c.tdyc");
  EXPECT_EQ(ck.model, m);
  EXPECT_EQ(ck.config_hash, "abc123");
  save_checkpoint(ck.model, dir / "d.tdyc", "abc123");
  EXPECT_EQ(slurp(dir / "c.tdyc"), slurp(dir / "d.tdyc"));
  const std::string bytes = slurp(dir / "c.tdyc");
  spit(dir / "cut.tdyc", bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_checkpoint(dir / "cut.tdyc"), TruncatedError);
  EXPECT_THROW(load_checkpoint(kFixtures / "golden_masks.tdym"), FormatError);
}

TEST(Dataset, RoundTripRebuildsSplits) {
  TempDir dir;
  auto cfg = DatasetConfig::shapes_world();
  cfg.seed = 3;
  const auto d = make_dataset(cfg, 12, 5, {{1, 2, 3, 4}, {5, 6}}, SplitMode::Overlap);
  save_dataset(d, dir.path());
  const auto back = load_dataset(dir.path());
  ASSERT_EQ(back.train.size(), d.train.size());
  ASSERT_EQ(back.test.size(), d.test.size());
  for (std::size_t k = 0; k < d.train.size(); ++k) {
    EXPECT_EQ(back.train[k].id, d.train[k].id);
    EXPECT_EQ(back.train[k].gt_labels, d.train[k].gt_labels);
    for (std::size_t i = 0; i < d.train[k].pixels.data().size(); ++i)
      EXPECT_EQ(back.train[k].pixels.data()[i], static_cast<float>(d.train[k].pixels.data()[i]));
  }
  ASSERT_EQ(back.splits.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(back.splits[s].class_space(), d.splits[s].class_space());
    ASSERT_EQ(back.splits[s].size(), d.splits[s].size());
    for (int i = 0; i < d.splits[s].size(); ++i) {
      EXPECT_EQ(back.splits[s].id(i), d.splits[s].id(i));
      EXPECT_EQ(back.splits[s].image_level(i), d.splits[s].image_level(i));
    }
  }
  EXPECT_EQ(back.mode, SplitMode::Overlap);
  EXPECT_EQ(back.steps, d.steps);
}

TEST(Dataset, BadManifestThrows) {
  TempDir dir;
  spit(dir / "dataset.json", "{not json");
  EXPECT_THROW(load_dataset(dir.path()), FormatError);
  spit(dir / "dataset.json", "{\"format\":\"other\"}");
  EXPECT_THROW(load_dataset(dir.path()), FormatError);
}

TEST(ConfigJson, TrainConfigRoundTripAndDefaults) {
  TrainConfig c;
  c.epochs = 12;
  c.lr0 = 0.25;
  c.tme = false;
  c.fusion_cfg.beta = 0.7;
  c.pooling.focal_p = 2.0;
  c.weights.seg = 0.5;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  const auto partial = train_config_from_json(json{{"epochs", 9}});
  EXPECT_EQ(partial.epochs, 9);
  EXPECT_EQ(partial.lr0, TrainConfig{}.lr0);
}

TEST(ConfigJson, DatasetConfigAndClassSpace) {
  const auto cfg = DatasetConfig::shapes_world();
  EXPECT_EQ(to_json(dataset_config_from_json(to_json(cfg))), to_json(cfg));
  const ClassSpace s({1, 4}, {6});
  EXPECT_EQ(class_space_from_json(to_json(s)), s);
}

TEST(ConfigJson, MetricsReportWritesNullForMissingGroups) {
  MetricsReport r;
  r.per_class[1] = 0.5;
  r.group_mean["old"] = 0.5;
  r.group_mean["new"] = std::nan("");
  r.groups = {{"old", {1}}, {"new", {2}}};
  const json j = to_json(r);
  EXPECT_TRUE(j.at("groups").at("new").is_null());
  EXPECT_EQ(j.at("groups").at("old"), 0.5);
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Pgm, Examples) {
  TempDir dir;
  export_pgm(ScoreMap(1, 2, 2, Semantics::Probabilities, 0.0), dir / "z.pgm");
  EXPECT_EQ(slurp(dir / "z.pgm"), "P2\n2 2\n255\n0 0\n0 0\n");
  export_pgm(ScoreMap(1, 1, 3, Semantics::Probabilities, {1.0, 0.5, 0.2}), dir / "v.pgm");
  EXPECT_EQ(slurp(dir / "v.pgm"), "P2\n3 1\n255\n255 128 51\n");
  EXPECT_THROW(export_pgm(ScoreMap(2, 1, 1, Semantics::Probabilities), dir / "x.pgm"), ShapeError);
  EXPECT_THROW(export_pgm(ScoreMap(1, 1, 1, Semantics::Scores, {1.5}), dir / "x.pgm"), Error);
}

TEST(Pgm, LabelPalette) {
  TempDir dir;
  export_pgm(LabelMap(1, 3), dir / "l.pgm");
  EXPECT_EQ(slurp(dir / "l.pgm"), "P2\n3 1\n255\n0 0 0\n");
  LabelMap l(1, 3);
  l.labels = {0, 1, 6};
  export_pgm(l, dir / "k.pgm");
  EXPECT_EQ(slurp(dir / "k.pgm"), "P2\n3 1\n255\n0 36 216\n");
}
