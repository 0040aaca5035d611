// teddy: command-line driver for data generation, training, pseudo-label
// dumps, evaluation and the verification suites.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "teddy/data.hpp"
#include "teddy/eval.hpp"
#include "teddy/fusion.hpp"
#include "teddy/gradcheck.hpp"
#include "teddy/io.hpp"
#include "teddy/pipeline.hpp"
#include "teddy/providers.hpp"
#include "teddy/tme.hpp"
#include "teddy/trainer.hpp"

namespace fs = std::filesystem;
using teddy::json;

namespace {

struct RunConfig {
  std::string command;
  teddy::DatasetConfig data = teddy::DatasetConfig::shapes_world();
  int n_train = 200;
  int n_test = 100;
  std::string steps = "1,2,3,4;5,6";
  std::string mode = "overlap";
  teddy::TrainConfig train = teddy::BenchmarkConfig{}.train;
  std::string tme = "on";
  std::string fusion = "on";
  std::string mask_provider = "oracle";
  int quant_levels = 4;
  int min_area = 4;
  std::string out = "teddy-out";
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string data_dir;
  std::string checkpoint;
  std::string current;
  int step = -1;
  int index = 0;
  long long trials = 100000;
  int configs = 20;
  std::string input;
  int channel = -1;
};

json to_json(const RunConfig& rc) {
  teddy::TrainConfig tc = rc.train;
  return {{"command", rc.command},
          {"dataset", teddy::to_json(rc.data)},
          {"n_train", rc.n_train},
          {"n_test", rc.n_test},
          {"steps", rc.steps},
          {"mode", rc.mode},
          {"train", teddy::to_json(tc)},
          {"tme", rc.tme},
          {"fusion", rc.fusion},
          {"mask_provider", rc.mask_provider},
          {"quant_levels", rc.quant_levels},
          {"min_area", rc.min_area},
          {"out", rc.out},
          {"seed", rc.seed},
          {"jobs", rc.jobs},
          {"data", rc.data_dir},
          {"checkpoint", rc.checkpoint},
          {"current", rc.current},
          {"step", rc.step},
          {"index", rc.index},
          {"trials", rc.trials},
          {"configs", rc.configs},
          {"input", rc.input},
          {"channel", rc.channel}};
}

void merge_json(const json& j, RunConfig& rc, bool& seed_given) {
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  if (j.contains("dataset")) rc.data = teddy::dataset_config_from_json(j.at("dataset"));
  if (j.contains("train")) rc.train = teddy::train_config_from_json(j.at("train"), rc.train);
  get("n_train", rc.n_train);
  get("n_test", rc.n_test);
  get("steps", rc.steps);
  get("mode", rc.mode);
  get("tme", rc.tme);
  get("fusion", rc.fusion);
  get("mask_provider", rc.mask_provider);
  get("quant_levels", rc.quant_levels);
  get("min_area", rc.min_area);
  get("out", rc.out);
  get("jobs", rc.jobs);
  get("data", rc.data_dir);
  get("checkpoint", rc.checkpoint);
  get("current", rc.current);
  get("step", rc.step);
  get("index", rc.index);
  get("trials", rc.trials);
  get("configs", rc.configs);
  get("input", rc.input);
  get("channel", rc.channel);
  if (j.contains("seed")) {
    rc.seed = j.at("seed").get<std::uint64_t>();
    seed_given = true;
  }
}

// "1,2,3,4;5,6" -> {{1,2,3,4},{5,6}}
std::vector<std::vector<int>> parse_steps(const std::string& s) {
  std::vector<std::vector<int>> out;
  std::stringstream steps(s);
  std::string step;
  while (std::getline(steps, step, ';')) {
    std::vector<int> ids;
    std::stringstream ss(step);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        std::size_t used = 0;
        ids.push_back(std::stoi(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::logic_error&) {
        throw teddy::ConfigError("bad class id '" + tok + "' in --steps");
      }
    }
    out.push_back(std::move(ids));
  }
  if (out.empty()) throw teddy::ConfigError("--steps lists no step");
  return out;
}

bool on_off(const std::string& v) { return v == "on"; }

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw teddy::Error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

std::string config_hash(const RunConfig& rc) {
  return teddy::fnv1a_hex(teddy::to_json(rc.train).dump() + "|" + rc.mask_provider);
}

json losses_json(const std::vector<teddy::EpochReport>& epochs) {
  json arr = json::array();
  for (const auto& e : epochs)
    arr.push_back({{"epoch", e.epoch},
                   {"lr", e.lr},
                   {"cls", e.mean.cls},
                   {"loc", e.mean.loc},
                   {"seg", e.mean.seg},
                   {"total", e.mean.total},
                   {"tme_violations_before", e.tme_violations_before},
                   {"dual_candidates", e.dual_candidates}});
  return arr;
}

const teddy::StepDataset& split_at(const teddy::Dataset& d, int step) {
  if (step < 0 || step >= static_cast<int>(d.splits.size()))
    throw teddy::ConfigError("dataset has no step " + std::to_string(step));
  return d.splits[step];
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw teddy::ConfigError(std::string("missing required ") + flag);
}

json cmd_gen_data(const RunConfig& rc) {
  teddy::DatasetConfig dc = rc.data;
  dc.seed = rc.seed;
  const auto d = teddy::make_dataset(dc, rc.n_train, rc.n_test, parse_steps(rc.steps),
                                     teddy::split_mode_from_string(rc.mode));
  teddy::save_dataset(d, rc.out);
  json sizes = json::array();
  for (const auto& s : d.splits) sizes.push_back(s.size());
  return {{"train", d.train.size()}, {"test", d.test.size()}, {"step_sizes", sizes},
          {"dataset", (fs::path(rc.out) / "dataset.json").string()}};
}

json cmd_pretrain(const RunConfig& rc) {
  require(rc.data_dir, "--data");
  const auto d = teddy::load_dataset(rc.data_dir);
  teddy::TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  const auto res = teddy::run_step0(split_at(d, 0), tc);
  const fs::path ck = fs::path(rc.out) / "model.tdyc";
  teddy::save_checkpoint(res.model, ck, config_hash(rc));
  const auto metrics = teddy::to_json(teddy::evaluate_model(res.model, d.test));
  write_json(fs::path(rc.out) / "metrics.json", metrics);
  write_json(fs::path(rc.out) / "losses.json", losses_json(res.epochs));
  return {{"checkpoint", ck.string()}, {"step", 0}, {"metrics", metrics}};
}

json cmd_increment(const RunConfig& rc) {
  require(rc.data_dir, "--data");
  require(rc.checkpoint, "--checkpoint");
  const auto provider = teddy::parse_mask_provider(rc.mask_provider);
  const auto prev = teddy::load_checkpoint(rc.checkpoint);
  const auto d = teddy::load_dataset(rc.data_dir);
  const int step = rc.step >= 0 ? rc.step : prev.model.step + 1;
  if (step != prev.model.step + 1)
    throw teddy::ConfigError("checkpoint is at step " + std::to_string(prev.model.step) +
                             ", cannot train step " + std::to_string(step));
  const auto& ds = split_at(d, step);
  teddy::MaskProvider mp = provider;
  mp.quant_levels = rc.quant_levels;
  mp.min_area = rc.min_area;
  const auto masks = teddy::provide_masks(mp, ds, rc.jobs);
  teddy::TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  const auto res = teddy::run_increment(prev.model, ds, masks, tc);
  const fs::path ck = fs::path(rc.out) / "model.tdyc";
  teddy::save_checkpoint(res.model, ck, config_hash(rc));
  const auto metrics = teddy::to_json(teddy::evaluate_model(res.model, d.test));
  write_json(fs::path(rc.out) / "metrics.json", metrics);
  write_json(fs::path(rc.out) / "losses.json", losses_json(res.epochs));
  return {{"checkpoint", ck.string()}, {"step", step}, {"metrics", metrics}};
}

json cmd_pseudo(const RunConfig& rc) {
  require(rc.data_dir, "--data");
  require(rc.checkpoint, "--checkpoint");
  const auto old_ck = teddy::load_checkpoint(rc.checkpoint);
  const auto d = teddy::load_dataset(rc.data_dir);
  const int step = rc.step >= 0 ? rc.step : old_ck.model.step + 1;
  const auto& ds = split_at(d, step);
  if (step != old_ck.model.step + 1)
    throw teddy::ConfigError("--checkpoint must hold the step " + std::to_string(step - 1) +
                             " model");
  if (rc.index < 0 || rc.index >= ds.size())
    throw teddy::ConfigError("--index out of range for step " + std::to_string(step));
  const teddy::ToyModel current = rc.current.empty()
                                      ? old_ck.model.expanded(ds.class_space())
                                      : teddy::load_checkpoint(rc.current).model;
  if (!(current.space == ds.class_space()))
    throw teddy::ConfigError("--current model does not match the step class space");

  teddy::MaskProvider mp = teddy::parse_mask_provider(rc.mask_provider);
  mp.quant_levels = rc.quant_levels;
  mp.min_area = rc.min_area;
  teddy::StepDataset one(step, ds.class_space(), ds.mode(), {ds.samples()[rc.index]});
  const auto masks = teddy::provide_masks(mp, one).front();

  const auto feats = teddy::pixel_features(ds.pixels(rc.index));
  const auto old_logits = teddy::apply_scorer(old_ck.model.params.seg, feats,
                                              teddy::Semantics::Logits);
  const auto fw = teddy::model_forward(current, feats);
  teddy::PseudoLabelOptions opt;
  opt.fusion = rc.train.fusion_cfg;
  opt.tme = rc.train.tme;
  opt.use_fusion = rc.train.fusion;
  const auto b = teddy::build_pseudo_labels(old_logits, fw.seed, fw.seg_logits, masks,
                                            ds.class_space(), ds.image_level(rc.index), opt);
  const auto recheck = teddy::tme_check(b.r_old, b.s_enforced, ds.class_space().new_channels());
  if (opt.tme && recheck.violating_pixels != 0)
    throw teddy::Error("mutual-exclusivity check failed on the dumped bundle");

  const fs::path out(rc.out);
  using teddy::ElementKind;
  teddy::save_tensor(out / "r_old.tdy", b.r_old.map, ElementKind::F64);
  teddy::save_tensor(out / "s.tdy", b.s_enforced.scores, ElementKind::F64);
  teddy::save_tensor(out / "P.tdy", b.P, ElementKind::F64);
  teddy::save_tensor(out / "r_beta.tdy", b.r_beta.map, ElementKind::F64);
  teddy::save_tensor(out / "U.tdy", b.uv.U, ElementKind::F64);
  teddy::save_tensor(out / "V.tdy", b.uv.V, ElementKind::F64);
  teddy::save_tensor(out / "Z.tdy", b.Z, ElementKind::F64);
  teddy::save_tensor(out / "G.tdy", b.G, ElementKind::F64);
  teddy::save_masks(masks, out / "masks.tdym");
  const json summary = {{"sample", ds.id(rc.index)},
                        {"step", step},
                        {"masks", masks.count()},
                        {"dual_candidates", b.r_old.assignment.dual_candidates},
                        {"tme_violations_before", b.tme_report.violating_pixels},
                        {"tme_violations_after", recheck.violating_pixels},
                        {"tme", opt.tme},
                        {"fusion", opt.use_fusion}};
  write_json(out / "bundle.json", summary);
  return summary;
}

json cmd_eval(const RunConfig& rc) {
  require(rc.data_dir, "--data");
  require(rc.checkpoint, "--checkpoint");
  const auto ck = teddy::load_checkpoint(rc.checkpoint);
  const auto d = teddy::load_dataset(rc.data_dir);
  const auto metrics = teddy::to_json(teddy::evaluate_model(ck.model, d.test));
  write_json(fs::path(rc.out) / "metrics.json", metrics);
  return {{"step", ck.model.step}, {"metrics", metrics}};
}

json cmd_verify_uv(const RunConfig& rc) {
  if (rc.trials < 1) throw teddy::ConfigError("--trials must be >= 1");
  const auto r = teddy::fuzz_uv(rc.trials, rc.seed);
  std::cout << "trials=" << r.trials << " mismatches=" << r.mismatches
            << " exceptions=" << r.exceptions << "\n";
  return {{"trials", r.trials}, {"mismatches", r.mismatches}, {"exceptions", r.exceptions},
          {"max_gap", r.max_gap}, {"pass", r.mismatches == 0 && r.exceptions == 0}};
}

json cmd_check_grad(const RunConfig& rc) {
  if (rc.configs < 1) throw teddy::ConfigError("--configs must be >= 1");
  const auto r = teddy::run_grad_check(rc.configs, rc.seed);
  return {{"configs", r.configs}, {"entries", r.entries}, {"max_rel_error", r.max_rel_error},
          {"tolerance", 1e-4}, {"pass", r.max_rel_error <= 1e-4}};
}

json cmd_export_pgm(const RunConfig& rc) {
  require(rc.input, "--input");
  std::ifstream f(rc.input, std::ios::binary);
  if (!f) throw teddy::Error("cannot open '" + rc.input + "'");
  const auto raw = teddy::read_tensor(f);
  const fs::path dst = fs::path(rc.out) / (fs::path(rc.input).stem().string() + ".pgm");
  if (raw.semantics == "labels") {
    teddy::export_pgm(teddy::load_labels(rc.input), dst);
  } else {
    teddy::ScoreMap m = teddy::to_score_map(raw);
    if (rc.channel >= 0) {
      if (rc.channel >= m.channels()) throw teddy::ConfigError("--channel out of range");
      const int c = rc.channel;
      m = teddy::select_channels(m, std::span<const int>(&c, 1));
    }
    teddy::export_pgm(m, dst);
  }
  return {{"pgm", dst.string()}};
}

int emit_error(const std::string& kind, const std::string& message, const std::string& command,
               int code) {
  json e = {{"ok", false},
            {"error", {{"kind", kind}, {"message", message}, {"command", command}}}};
  std::cerr << e.dump() << "\n";
  return code;
}

// Value following --config, if any.
std::string find_config_path(int argc, char** argv) {
  for (int k = 1; k < argc; ++k) {
    const std::string a = argv[k];
    if (a == "--config" && k + 1 < argc) return argv[k + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig rc;
  bool seed_given = false;
  try {
    if (const auto path = find_config_path(argc, argv); !path.empty()) {
      std::ifstream f(path);
      if (!f) throw teddy::ConfigError("cannot open config '" + path + "'");
      merge_json(json::parse(f), rc, seed_given);
    }
    if (const char* env = std::getenv("TEDDY_SEED"); env && !seed_given)
      rc.seed = std::stoull(env);
  } catch (const std::exception& e) {
    return emit_error("config_error", e.what(), "", 2);
  }

  CLI::App app{"teddy: weakly incremental segmentation toolkit"};
  app.require_subcommand(1);
  std::string config_path;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run.json of a previous run");
    sub->add_option("--out", rc.out, "output directory");
    sub->add_option("--seed", rc.seed, "seed (falls back to TEDDY_SEED)");
  };
  auto training = [&](CLI::App* sub) {
    auto& t = rc.train;
    sub->add_option("--epochs", t.epochs);
    sub->add_option("--warmup", t.warmup_epochs);
    sub->add_option("--lr", t.lr0);
    sub->add_option("--momentum", t.momentum);
    sub->add_option("--weight-decay", t.weight_decay);
    sub->add_option("--poly-power", t.poly_power);
    sub->add_option("--focal-lambda", t.pooling.focal_lambda);
    sub->add_option("--focal-p", t.pooling.focal_p);
  };
  auto fusion = [&](CLI::App* sub) {
    auto& f = rc.train.fusion_cfg;
    sub->add_option("--alpha", f.alpha);
    sub->add_option("--beta", f.beta);
    sub->add_option("--eta", f.eta);
    sub->add_option("--tme", rc.tme)->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--fusion", rc.fusion)->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--mask-provider", rc.mask_provider, "partitioner | oracle | ingest:<dir>");
    sub->add_option("--quant-levels", rc.quant_levels);
    sub->add_option("--min-area", rc.min_area);
    sub->add_option("--jobs", rc.jobs, "parallel workers for per-image phases");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  gen->add_option("--n-train", rc.n_train);
  gen->add_option("--n-test", rc.n_test);
  gen->add_option("--steps", rc.steps, "class ids per step, e.g. 1,2,3,4;5,6");
  gen->add_option("--mode", rc.mode)->check(CLI::IsMember({"overlap", "disjoint"}));
  gen->add_option("--height", rc.data.height);
  gen->add_option("--width", rc.data.width);
  gen->add_option("--noise", rc.data.background_noise);
  gen->add_option("--jitter", rc.data.color_jitter);

  auto* pre = app.add_subcommand("pretrain", "fully supervised step-0 training");
  common(pre);
  training(pre);
  pre->add_option("--data", rc.data_dir);

  auto* inc = app.add_subcommand("increment", "weakly supervised incremental step");
  common(inc);
  training(inc);
  fusion(inc);
  inc->add_option("--data", rc.data_dir);
  inc->add_option("--checkpoint", rc.checkpoint, "previous-step model");
  inc->add_option("--step", rc.step);

  auto* pse = app.add_subcommand("pseudo", "dump the pseudo-label bundle of one image");
  common(pse);
  fusion(pse);
  pse->add_option("--data", rc.data_dir);
  pse->add_option("--checkpoint", rc.checkpoint, "previous-step model");
  pse->add_option("--current", rc.current, "current-step model");
  pse->add_option("--step", rc.step);
  pse->add_option("--index", rc.index);

  auto* ev = app.add_subcommand("eval", "mIoU of a checkpoint on the test pool");
  common(ev);
  ev->add_option("--data", rc.data_dir);
  ev->add_option("--checkpoint", rc.checkpoint);

  auto* vuv = app.add_subcommand("verify-uv", "closed form against the vertex oracle");
  common(vuv);
  vuv->add_option("--trials", rc.trials);

  auto* cg = app.add_subcommand("check-grad", "finite-difference gradient suite");
  common(cg);
  cg->add_option("--configs", rc.configs);

  auto* pgm = app.add_subcommand("export-pgm", "render a tensor as plain PGM");
  common(pgm);
  pgm->add_option("--input", rc.input);
  pgm->add_option("--channel", rc.channel);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return emit_error("usage_error", e.what(), "", 2);
  }

  CLI::App* sub = app.get_subcommands().front();
  rc.command = sub->get_name();
  try {
    rc.train.tme = on_off(rc.tme);
    rc.train.fusion = on_off(rc.fusion);
    rc.train.validate();
    if (rc.jobs < 1) throw teddy::ConfigError("--jobs must be >= 1");
    teddy::parse_mask_provider(rc.mask_provider);

    write_json(fs::path(rc.out) / "run.json", to_json(rc));
    json result;
    if (rc.command == "gen-data") result = cmd_gen_data(rc);
    else if (rc.command == "pretrain") result = cmd_pretrain(rc);
    else if (rc.command == "increment") result = cmd_increment(rc);
    else if (rc.command == "pseudo") result = cmd_pseudo(rc);
    else if (rc.command == "eval") result = cmd_eval(rc);
    else if (rc.command == "verify-uv") result = cmd_verify_uv(rc);
    else if (rc.command == "check-grad") result = cmd_check_grad(rc);
    else if (rc.command == "export-pgm") result = cmd_export_pgm(rc);

    result["ok"] = !result.contains("pass") || result["pass"].get<bool>();
    result["command"] = rc.command;
    write_json(fs::path(rc.out) / "result.json", result);
    if (rc.command != "verify-uv") std::cout << result.dump() << "\n";
    return result["ok"].get<bool>() ? 0 : 1;
  } catch (const teddy::ConfigError& e) {
    return emit_error("config_error", e.what(), rc.command, 2);
  } catch (const teddy::GtAccessError& e) {
    return emit_error("protocol_error", e.what(), rc.command, 1);
  } catch (const teddy::FormatError& e) {
    return emit_error("format_error", e.what(), rc.command, 3);
  } catch (const teddy::TruncatedError& e) {
    return emit_error("truncated_error", e.what(), rc.command, 3);
  } catch (const teddy::SemanticsMismatchError& e) {
    return emit_error("semantics_error", e.what(), rc.command, 3);
  } catch (const teddy::ShapeError& e) {
    return emit_error("shape_error", e.what(), rc.command, 3);
  } catch (const teddy::NonFiniteError& e) {
    return emit_error("non_finite", e.what(), rc.command, 1);
  } catch (const json::exception& e) {
    return emit_error("format_error", e.what(), rc.command, 3);
  } catch (const std::exception& e) {
    return emit_error("runtime_error", e.what(), rc.command, 1);
  }
}
