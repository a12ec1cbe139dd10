#include "vesseladapt/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "vesseladapt/errors.hpp"

namespace vesseladapt {

using json = nlohmann::json;

namespace {

std::string subject_name(Domain d, int64_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%c%03lld", d == Domain::kSource ? 's' : 't',
                static_cast<long long>(i));
  return buf;
}

uint64_t fnv_hash(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

ExperimentSpec ExperimentSpec::from_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open experiment spec " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json_string(text);
}

ExperimentSpec ExperimentSpec::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("bad experiment spec JSON: ") + e.what());
  }
  ExperimentSpec s;
  s.scenario = scenario_from_string(j.value("scenario", "wide_gap"));
  std::string sweep = j.value("sweep", "none");
  if (sweep == "none")
    s.sweep = SweepType::kNone;
  else if (sweep == "m")
    s.sweep = SweepType::kM;
  else if (sweep == "N")
    s.sweep = SweepType::kN;
  else if (sweep == "ablation")
    s.sweep = SweepType::kAblation;
  else
    throw Error("unknown sweep type: " + sweep);
  for (const auto& v : j.value("values", json::array())) {
    if (v.is_string() && v.get<std::string>() == "full")
      s.sweep_values.push_back(-1);
    else
      s.sweep_values.push_back(v.get<int64_t>());
  }
  s.ablation_points = j.value("ablation_points", std::vector<std::string>{});
  if (j.contains("seeds")) s.seeds = j["seeds"].get<std::vector<uint64_t>>();
  if (j.contains("config"))
    s.base = TrainConfig::from_json_string(j["config"].dump());
  s.n_train_source = j.value("n_train_source", s.n_train_source);
  s.n_val_source = j.value("n_val_source", s.n_val_source);
  s.n_test_source = j.value("n_test_source", s.n_test_source);
  s.n_train_target = j.value("n_train_target", s.n_train_target);
  s.n_val_target = j.value("n_val_target", s.n_val_target);
  s.n_test_target = j.value("n_test_target", s.n_test_target);
  s.labeled_target_volumes = j.value("labeled_target_volumes",
                                     s.labeled_target_volumes);
  s.m = j.value("m", s.m);
  return s;
}

std::string ExperimentSpec::to_json_string() const {
  json j;
  j["scenario"] = vesseladapt::to_string(scenario);
  switch (sweep) {
    case SweepType::kNone: j["sweep"] = "none"; break;
    case SweepType::kM: j["sweep"] = "m"; break;
    case SweepType::kN: j["sweep"] = "N"; break;
    case SweepType::kAblation: j["sweep"] = "ablation"; break;
  }
  j["values"] = sweep_values;
  j["ablation_points"] = ablation_points;
  j["seeds"] = seeds;
  j["config"] = json::parse(base.to_json_string());
  j["n_train_source"] = n_train_source;
  j["n_val_source"] = n_val_source;
  j["n_test_source"] = n_test_source;
  j["n_train_target"] = n_train_target;
  j["n_val_target"] = n_val_target;
  j["n_test_target"] = n_test_target;
  j["labeled_target_volumes"] = labeled_target_volumes;
  j["m"] = m;
  return j.dump(2);
}

std::vector<PointConfig> sweep_points(const ExperimentSpec& spec) {
  std::vector<PointConfig> points;
  auto base_point = [&](const std::string& label, double x) {
    PointConfig p;
    p.label = label;
    p.x = x;
    p.n_source = spec.n_train_source;
    p.m_slices = spec.m;
    p.flags = spec.base.flags;
    return p;
  };
  switch (spec.sweep) {
    case ExperimentSpec::SweepType::kNone: {
      points.push_back(base_point("full", 0));
      break;
    }
    case ExperimentSpec::SweepType::kM: {
      for (int64_t m : spec.sweep_values) {
        auto p = base_point(m < 0 ? "full" : std::to_string(m),
                            m < 0 ? static_cast<double>(
                                        spec.labeled_target_volumes *
                                        spec.base.net.image_size)
                                  : static_cast<double>(m));
        p.m_slices = m;
        if (m == 0) p.flags.bds = false;  // no T_L stratum to balance
        points.push_back(p);
      }
      break;
    }
    case ExperimentSpec::SweepType::kN: {
      for (int64_t n : spec.sweep_values) {
        auto p = base_point(std::to_string(n), static_cast<double>(n));
        p.n_source = n;
        if (n == 0) p.flags.bds = false;  // target-only few-shot run
        points.push_back(p);
      }
      break;
    }
    case ExperimentSpec::SweepType::kAblation: {
      auto names = spec.ablation_points;
      if (names.empty())
        names = {"full", "res_off", "dsbn_off", "bds_off", "inv_off"};
      double x = 0;
      for (const auto& name : names) {
        auto p = base_point(name, x++);
        if (name == "res_off") p.flags.residuals = false;
        else if (name == "dsbn_off") p.flags.dsbn = false;
        else if (name == "bds_off") p.flags.bds = false;
        else if (name == "inv_off") p.flags.inversion = false;
        else if (name != "full") throw Error("unknown ablation point " + name);
        points.push_back(p);
      }
      break;
    }
  }
  return points;
}

SplitSpec make_split(const ExperimentSpec& spec, int64_t n_source,
                     int64_t m_slices) {
  SplitSpec split;
  int64_t s_total = spec.n_train_source + spec.n_val_source + spec.n_test_source;
  int64_t t_total = spec.n_train_target + spec.n_val_target + spec.n_test_target;
  for (int64_t i = 0; i < n_source; ++i)
    split.train_source.push_back(subject_name(Domain::kSource, i));
  for (int64_t i = spec.n_train_source; i < spec.n_train_source + spec.n_val_source; ++i)
    split.val_source.push_back(subject_name(Domain::kSource, i));
  for (int64_t i = spec.n_train_source + spec.n_val_source; i < s_total; ++i)
    split.test_source.push_back(subject_name(Domain::kSource, i));
  for (int64_t i = 0; i < spec.n_train_target; ++i)
    split.train_target.push_back(subject_name(Domain::kTarget, i));
  for (int64_t i = spec.n_train_target;
       i < spec.n_train_target + spec.n_val_target; ++i)
    split.val_target.push_back(subject_name(Domain::kTarget, i));
  for (int64_t i = spec.n_train_target + spec.n_val_target; i < t_total; ++i)
    split.test_target.push_back(subject_name(Domain::kTarget, i));

  // m midpoint slices from distinct volumes; -1 labels the T_L volumes fully
  int64_t depth = 0;
  {
    auto s = scenario_spec(spec.scenario, Domain::kTarget);
    depth = s.grid[0];
  }
  if (m_slices < 0) {
    for (int64_t v = 0; v < spec.labeled_target_volumes; ++v)
      for (int64_t k = 0; k < depth; ++k)
        split.labeled_target.emplace_back(subject_name(Domain::kTarget, v), k);
  } else {
    int64_t volumes = std::min(m_slices, spec.labeled_target_volumes);
    int64_t assigned = 0;
    int64_t v = 0;
    while (assigned < m_slices) {
      // distribute extra slices around the midpoint if m exceeds the volume
      // count
      int64_t offset = assigned / std::max<int64_t>(volumes, 1);
      int64_t idx = midpoint_slice(depth) + (offset % 2 == 0 ? offset / 2
                                                             : -(offset / 2 + 1));
      split.labeled_target.emplace_back(
          subject_name(Domain::kTarget, v % std::max<int64_t>(volumes, 1)), idx);
      ++assigned;
      ++v;
    }
  }
  return split;
}

fs::path ensure_data(const ExperimentSpec& spec, uint64_t seed,
                     const fs::path& outdir) {
  auto dir = outdir / "data" / ("seed_" + std::to_string(seed));
  auto marker = dir / "data.done";
  if (fs::exists(marker)) return dir;
  auto data = make_scenario(
      spec.scenario, spec.n_train_source + spec.n_val_source + spec.n_test_source,
      spec.n_train_target + spec.n_val_target + spec.n_test_target, seed);
  write_scenario(data, dir);
  std::ofstream(marker) << "ok\n";
  return dir;
}

namespace {

// Phase-1 output depends only on these inputs; runs sharing them share the
// cached checkpoint.
std::string phase1_cache_key(const ExperimentSpec& spec, const TrainConfig& cfg,
                             uint64_t seed, int64_t n_source) {
  json j;
  j["scenario"] = vesseladapt::to_string(spec.scenario);
  j["seed"] = seed;
  j["n_source"] = n_source;
  j["inversion"] = cfg.flags.inversion;
  j["iters_phase1"] = cfg.iters_phase1;
  j["lr_gan"] = cfg.lr_gan;
  j["beta1"] = cfg.beta1_phase1;
  j["beta2"] = cfg.beta2_phase1;
  j["r1_gamma"] = cfg.r1_gamma;
  j["r1_interval"] = cfg.r1_interval;
  j["pl_interval"] = cfg.pl_interval;
  j["batch"] = cfg.batch_size;
  j["channels"] = cfg.channels;
  j["net_cfg"] = {{"image_size", cfg.net.image_size},
                  {"z_dim", cfg.net.z_dim},
                  {"w_dim", cfg.net.w_dim},
                  {"base_channels", cfg.net.base_channels},
                  {"max_channels", cfg.net.max_channels}};
  return hex(fnv_hash(j.dump()));
}

std::map<std::string, double> metrics_of(const MetricsReport& report) {
  std::map<std::string, double> out;
  for (const auto& [k, v] : report.mean) out["target_" + k] = v;
  return out;
}

}  // namespace

MetricsReport evaluate_checkpoint(const fs::path& checkpoint,
                                  const fs::path& data_root,
                                  const SplitSpec& split,
                                  const std::string& split_name,
                                  const EvalOptions& options, Domain domain) {
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(checkpoint.string());
  } catch (const c10::Error& e) {
    throw CorruptCheckpoint("cannot read checkpoint " + checkpoint.string() +
                            ": " + e.what_without_backtrace());
  }
  auto bundle = load_bundle(ar);
  auto index = build_index(data_root, split);
  const auto& entries = split_name == "test"
                            ? index.test
                            : (split_name == "val" ? index.val : index.train);
  std::vector<IndexEntry> filtered;
  for (const auto& e : entries)
    if (e.domain == domain) filtered.push_back(e);
  return evaluate(bundle, filtered, options);
}

RunOutcome run_point(const ExperimentSpec& spec, const PointConfig& point,
                     uint64_t seed, const fs::path& outdir) {
  auto data_root = ensure_data(spec, seed, outdir);
  auto split = make_split(spec, point.n_source, point.m_slices);

  TrainConfig cfg = spec.base;
  cfg.seed = seed;
  cfg.flags = point.flags;
  if (point.n_source == 0) cfg.iters_pretrain = 0;
  cfg.finalize();

  auto rundir = outdir / "runs" / (point.label + "_seed" + std::to_string(seed));
  RunOutcome outcome;
  outcome.rundir = rundir;

  EvalOptions eval_opts;
  eval_opts.channels = cfg.channels;
  eval_opts.invert_target = cfg.flags.inversion;

  auto summarize = [&](RunOutcome& out) {
    auto best = rundir / "checkpoints" / "best.pt";
    auto report =
        evaluate_checkpoint(best, data_root, split, "test", eval_opts);
    emit_report(report, rundir / "eval");
    out.test_metrics = metrics_of(report);
    auto pre = rundir / "checkpoints" / "pretrain_final.pt";
    if (fs::exists(pre)) {
      auto pre_report =
          evaluate_checkpoint(pre, data_root, split, "test", eval_opts);
      emit_report(pre_report, rundir / "eval_pretrain");
      out.pretrain_metrics = metrics_of(pre_report);
    }
    std::ofstream(rundir / "outcome.json")
        << json{{"diverged", out.diverged},
                {"test_metrics", out.test_metrics},
                {"pretrain_metrics", out.pretrain_metrics}}
               .dump(2)
        << "\n";
  };

  if (fs::exists(rundir / "outcome.json")) {
    // already complete; reuse
    auto j = json::parse(std::ifstream(rundir / "outcome.json"));
    outcome.diverged = j.value("diverged", false);
    for (const auto& [k, v] : j.value("test_metrics", json::object()).items())
      outcome.test_metrics[k] = v.get<double>();
    for (const auto& [k, v] :
         j.value("pretrain_metrics", json::object()).items())
      outcome.pretrain_metrics[k] = v.get<double>();
    return outcome;
  }

  auto data = std::make_shared<TrainData>(load_train_data(data_root, split, cfg));

  // Phase 1 is trained once per cache key in a builder directory, and every
  // run adopts it; consumer trajectories are then independent of cache state.
  auto key = phase1_cache_key(spec, cfg, seed, point.n_source);
  auto cache_dir = outdir / "cache" / ("phase1_" + key);
  auto cache_ckpt = cache_dir / "checkpoints" / "phase1_final.pt";
  if (!fs::exists(cache_ckpt)) {
    Trainer builder(cache_dir, cfg, data);
    builder.run_phase1();
  }

  fs::create_directories(rundir);
  {
    std::ofstream run_meta(rundir / "run.json");
    run_meta << json{{"data_root", data_root.string()},
                     {"split", json::parse(split.to_json_string())},
                     {"phase1_cache", cache_ckpt.string()},
                     {"config", json::parse(cfg.to_json_string())}}
                    .dump(2)
             << "\n";
  }

  Trainer trainer(rundir, cfg, data);
  trainer.adopt_phase1(cache_ckpt);
  try {
    trainer.run();
  } catch (const DivergenceDetected&) {
    outcome.diverged = true;
    std::ofstream(rundir / "outcome.json")
        << json{{"diverged", true}}.dump(2) << "\n";
    return outcome;
  }
  summarize(outcome);
  return outcome;
}

RunOutcome resume_run(const fs::path& rundir) {
  auto meta_path = rundir / "run.json";
  if (!fs::exists(meta_path))
    throw MissingFile("no run.json under " + rundir.string());
  auto j = json::parse(std::ifstream(meta_path));
  fs::path data_root = j.at("data_root").get<std::string>();
  auto split = SplitSpec::from_json_string(j.at("split").dump());
  auto cfg = TrainConfig::from_json_string(j.at("config").dump());
  auto data = std::make_shared<TrainData>(load_train_data(data_root, split, cfg));

  auto trainer = Trainer::resume(rundir, data);
  trainer.run();

  RunOutcome outcome;
  outcome.rundir = rundir;
  EvalOptions eval_opts;
  eval_opts.channels = cfg.channels;
  eval_opts.invert_target = cfg.flags.inversion;
  auto report = evaluate_checkpoint(rundir / "checkpoints" / "best.pt",
                                    data_root, split, "test", eval_opts);
  emit_report(report, rundir / "eval");
  outcome.test_metrics = metrics_of(report);
  auto pre = rundir / "checkpoints" / "pretrain_final.pt";
  if (fs::exists(pre)) {
    auto pre_report =
        evaluate_checkpoint(pre, data_root, split, "test", eval_opts);
    outcome.pretrain_metrics = metrics_of(pre_report);
  }
  std::ofstream(rundir / "outcome.json")
      << json{{"diverged", false},
              {"test_metrics", outcome.test_metrics},
              {"pretrain_metrics", outcome.pretrain_metrics}}
             .dump(2)
      << "\n";
  return outcome;
}

ExperimentResult run_experiment(const ExperimentSpec& spec,
                                const fs::path& outdir) {
  fs::create_directories(outdir);
  {
    std::ofstream(outdir / "spec.resolved.json") << spec.to_json_string() << "\n";
  }
  ExperimentResult result;
  auto points = sweep_points(spec);

  std::string sweep_name;
  switch (spec.sweep) {
    case ExperimentSpec::SweepType::kM: sweep_name = "m"; break;
    case ExperimentSpec::SweepType::kN: sweep_name = "N"; break;
    case ExperimentSpec::SweepType::kAblation: sweep_name = "ablation"; break;
    default: sweep_name = "point"; break;
  }
  result.table.sweep_name = sweep_name;

  const std::vector<std::string> tracked = {"target_dice_vessel",
                                            "target_cldice_vessel",
                                            "target_dice_brain"};
  for (const auto& metric : tracked)
    result.table.values[metric].resize(points.size());

  for (size_t pi = 0; pi < points.size(); ++pi) {
    const auto& point = points[pi];
    result.table.point_labels.push_back(point.label);
    result.table.point_x.push_back(point.x);
    for (uint64_t seed : spec.seeds) {
      auto outcome = run_point(spec, point, seed, outdir);
      result.any_diverged |= outcome.diverged;
      if (!outcome.diverged) {
        for (const auto& metric : tracked) {
          auto it = outcome.test_metrics.find(metric);
          if (it != outcome.test_metrics.end())
            result.table.values[metric][pi].push_back(it->second);
        }
      }
      result.runs.emplace_back(point.label, std::move(outcome));
    }
  }

  emit_report(result.table, outdir);

  json summary;
  summary["any_diverged"] = result.any_diverged;
  summary["runs"] = json::array();
  for (const auto& [label, outcome] : result.runs)
    summary["runs"].push_back({{"point", label},
                               {"rundir", outcome.rundir.string()},
                               {"diverged", outcome.diverged},
                               {"test_metrics", outcome.test_metrics},
                               {"pretrain_metrics", outcome.pretrain_metrics}});
  std::ofstream(outdir / "summary.json") << summary.dump(2) << "\n";
  return result;
}

}  // namespace vesseladapt
