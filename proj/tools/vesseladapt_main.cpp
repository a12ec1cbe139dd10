// vesseladapt: phantom synthesis, preprocessing, two-phase training,
// evaluation and experiment sweeps for multi-domain vessel segmentation.

#include <ATen/Parallel.h>
#include <torch/torch.h>

#include <CLI11.hpp>
#include <iostream>
#include <nlohmann/json.hpp>

#include "vesseladapt/harness.hpp"
#include "vesseladapt/infer_eval.hpp"
#include "vesseladapt/preprocess.hpp"
#include "vesseladapt/synth_data.hpp"
#include "vesseladapt/train.hpp"

using namespace vesseladapt;
using nlohmann::json;

namespace {

std::array<int64_t, 3> parse_grid(const std::string& s) {
  std::array<int64_t, 3> grid{};
  if (std::sscanf(s.c_str(), "%lld,%lld,%lld", (long long*)&grid[0],
                  (long long*)&grid[1], (long long*)&grid[2]) != 3)
    throw CLI::ValidationError("--max-grid expects A,B,C");
  return grid;
}

int cmd_synth(const std::string& scenario, int64_t n_source, int64_t n_target,
              uint64_t seed, const std::string& out) {
  auto data = make_scenario(scenario_from_string(scenario), n_source, n_target,
                            seed);
  write_scenario(data, out);
  std::cout << "wrote " << data.source.size() << " source + "
            << data.target.size() << " target phantoms to " << out << "\n";
  return 0;
}

int cmd_prep(const std::string& domain_dir, const std::string& max_grid,
             int64_t channels, bool invert, const std::string& out) {
  auto grid = parse_grid(max_grid);
  fs::path in_dir(domain_dir);
  fs::path out_dir =
      out.empty() ? fs::path(in_dir.string() + "_prep") : fs::path(out);

  std::vector<fs::path> subjects;
  for (const auto& entry : fs::directory_iterator(in_dir))
    if (entry.is_directory() && fs::exists(entry.path() / "image.vol"))
      subjects.push_back(entry.path());
  std::sort(subjects.begin(), subjects.end());
  if (subjects.empty()) {
    std::cerr << "no subjects under " << in_dir << "\n";
    return 1;
  }

  std::vector<Volume> volumes;
  for (const auto& dir : subjects) volumes.push_back(load_volume(dir / "image.vol"));
  auto spacing = dataset_spacing(volumes, grid);

  json provenance;
  provenance["spacing_mm"] = {spacing[0], spacing[1], spacing[2]};
  provenance["max_grid"] = {grid[0], grid[1], grid[2]};
  provenance["channels"] = channels;
  provenance["invert"] = invert;
  json per_subject = json::object();

  for (size_t i = 0; i < subjects.size(); ++i) {
    auto resampled = resample(volumes[i], spacing);
    NormalizeInfo info;
    auto normalized = normalize(resampled, &info);
    if (invert) normalized = invert_intensity(normalized);
    auto subject = volumes[i].header.subject_id;
    save_volume(normalized, out_dir / subject / "image.vol");
    auto mask_path = subjects[i] / "mask.vol";
    if (fs::exists(mask_path)) {
      auto mask = resample_mask(load_mask(mask_path), spacing);
      save_mask(mask, out_dir / subject / "mask.vol");
    }
    per_subject[subject] = {{"mean", info.mean},
                            {"stddev", info.stddev},
                            {"clip_lo", info.clip_lo},
                            {"clip_hi", info.clip_hi}};
  }
  provenance["subjects"] = per_subject;
  std::ofstream(out_dir / "provenance.json") << provenance.dump(2) << "\n";
  std::cout << "preprocessed " << subjects.size() << " volumes into " << out_dir
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_root,
              const std::string& split_path, const std::string& out,
              bool resume) {
  if (resume) {
    resume_run(out);
    std::cout << "resumed run " << out << "\n";
    return 0;
  }
  auto cfg = config_path.empty() ? TrainConfig{}
                                 : TrainConfig::from_json_file(config_path);
  cfg.finalize();
  fs::path split_file =
      split_path.empty() ? fs::path(data_root) / "splits.json" : fs::path(split_path);
  auto split = SplitSpec::from_json_file(split_file);
  auto data = std::make_shared<TrainData>(load_train_data(data_root, split, cfg));

  fs::create_directories(fs::path(out));
  std::ofstream(fs::path(out) / "run.json")
      << json{{"data_root", data_root},
              {"split", json::parse(split.to_json_string())},
              {"config", json::parse(cfg.to_json_string())}}
             .dump(2)
      << "\n";

  Trainer trainer(out, cfg, data);
  trainer.run();
  std::cout << "training complete, checkpoints under " << out
            << "/checkpoints\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root,
             const std::string& split_name, const std::string& split_path,
             const std::string& out, int64_t channels, bool per_slice,
             bool invert_target, const std::string& domain) {
  fs::path split_file =
      split_path.empty() ? fs::path(data_root) / "splits.json" : fs::path(split_path);
  auto split = SplitSpec::from_json_file(split_file);
  EvalOptions options;
  options.channels = channels;
  options.cldice_per_slice = per_slice;
  options.invert_target = invert_target;
  auto report = evaluate_checkpoint(checkpoint, data_root, split, split_name,
                                    options, domain_from_string(domain));
  emit_report(report, out);
  std::cout << report.to_csv();
  return 0;
}

int cmd_sweep(const std::string& spec_path, const std::string& out) {
  auto spec = ExperimentSpec::from_json_file(spec_path);
  auto result = run_experiment(spec, out);
  std::cout << result.table.to_csv();
  if (result.any_diverged) {
    std::cerr << "at least one sweep point diverged\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-domain vessel segmentation workbench"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "torch CPU threads (0 = default)");

  // synth
  std::string scenario = "wide_gap", out_root = "data";
  int64_t n_source = 35, n_target = 20;
  uint64_t seed = 7;
  auto* synth = app.add_subcommand("synth", "generate vascular phantoms");
  synth->add_option("--scenario", scenario)
      ->check(CLI::IsMember({"narrow_gap", "wide_gap"}));
  synth->add_option("--n-source", n_source);
  synth->add_option("--n-target", n_target);
  synth->add_option("--seed", seed);
  synth->add_option("--out", out_root)->required();

  // prep
  std::string domain_dir, max_grid = "32,64,64", prep_out;
  int64_t channels = 3;
  bool invert = false;
  auto* prep = app.add_subcommand("prep", "per-domain preprocessing");
  prep->add_option("--domain", domain_dir, "domain directory of subjects")
      ->required();
  prep->add_option("--max-grid", max_grid, "A,B,C voxel bound");
  prep->add_option("--channels", channels, "2.5D channel count");
  prep->add_flag("--invert", invert, "flip intensities after normalization");
  prep->add_option("--out", prep_out);

  // train
  std::string config_path, data_root, split_path, rundir;
  bool resume = false;
  auto* train = app.add_subcommand("train", "two-phase training");
  train->add_option("--config", config_path, "JSON config");
  train->add_option("--data", data_root)->required();
  train->add_option("--split", split_path, "split spec JSON");
  train->add_option("--out", rundir)->required();
  train->add_flag("--resume", resume, "continue from checkpoints/last.pt");

  // eval
  std::string checkpoint, split_name = "test", eval_out = "report",
              eval_domain = "target";
  bool per_slice = false, invert_target = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_root)->required();
  eval->add_option("--split", split_name)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--split-spec", split_path);
  eval->add_option("--out", eval_out);
  eval->add_option("--channels", channels);
  eval->add_option("--domain", eval_domain)
      ->check(CLI::IsMember({"source", "target"}));
  eval->add_flag("--cldice-per-slice", per_slice);
  eval->add_flag("--invert-target", invert_target);

  // sweep
  std::string spec_path, sweep_out = "sweep";
  auto* sweep = app.add_subcommand("sweep", "run a declarative experiment grid");
  sweep->add_option("--spec", spec_path)->required();
  sweep->add_option("--out", sweep_out);

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) at::set_num_threads(threads);

  try {
    if (synth->parsed())
      return cmd_synth(scenario, n_source, n_target, seed, out_root);
    if (prep->parsed())
      return cmd_prep(domain_dir, max_grid, channels, invert, prep_out);
    if (train->parsed())
      return cmd_train(config_path, data_root, split_path, rundir, resume);
    if (eval->parsed())
      return cmd_eval(checkpoint, data_root, split_name, split_path, eval_out,
                      channels, per_slice, invert_target, eval_domain);
    if (sweep->parsed()) return cmd_sweep(spec_path, sweep_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
