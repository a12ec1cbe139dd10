#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vesseladapt/infer_eval.hpp"
#include "vesseladapt/synth_data.hpp"
#include "vesseladapt/train.hpp"

namespace vesseladapt {

// Declarative phantom-scale experiment: a scenario, an optional sweep (target
// annotations m, source annotations N, or architectural ablations) and seeds.
struct ExperimentSpec {
  enum class SweepType { kNone, kM, kN, kAblation };

  Scenario scenario = Scenario::kWideGap;
  SweepType sweep = SweepType::kNone;
  std::vector<int64_t> sweep_values;  // m values (-1 = full volumes) or N values
  std::vector<std::string> ablation_points;  // default: full + each flag off

  TrainConfig base;
  std::vector<uint64_t> seeds{7, 17, 27};

  // dataset sizes (train/val/test volumes per domain)
  int64_t n_train_source = 35, n_val_source = 7, n_test_source = 7;
  int64_t n_train_target = 20, n_val_target = 4, n_test_target = 4;
  int64_t labeled_target_volumes = 3;  // T_L volumes the m slices come from
  int64_t m = 3;                       // labeled slices unless swept

  static ExperimentSpec from_json_file(const fs::path& path);
  static ExperimentSpec from_json_string(const std::string& text);
  std::string to_json_string() const;
};

struct RunOutcome {
  fs::path rundir;
  bool diverged = false;
  std::map<std::string, double> test_metrics;      // best checkpoint, target test
  std::map<std::string, double> pretrain_metrics;  // pretrain-only model
};

struct ExperimentResult {
  SweepTable table;
  std::vector<std::pair<std::string, RunOutcome>> runs;  // point label -> run
  bool any_diverged = false;
};

// One train+eval run per sweep point per seed; Phase-1 results are cached and
// shared between points whose Phase-1 inputs coincide. Emits sweep.csv,
// plots/ and summary.json under outdir.
ExperimentResult run_experiment(const ExperimentSpec& spec,
                                const fs::path& outdir);

// Per-point knobs derived from the sweep (annotation counts, flag sets).
struct PointConfig {
  std::string label;
  double x = 0;
  int64_t n_source;   // source training volumes
  int64_t m_slices;   // -1 = full T_L volumes
  AblationFlags flags;
};
std::vector<PointConfig> sweep_points(const ExperimentSpec& spec);

// Build the split spec for a run: fixed val/test subjects, the first
// n_source source subjects, and m midpoint slices from distinct volumes.
SplitSpec make_split(const ExperimentSpec& spec, int64_t n_source,
                     int64_t m_slices);

// Generates (once) the phantom corpus for a seed under outdir/data.
fs::path ensure_data(const ExperimentSpec& spec, uint64_t seed,
                     const fs::path& outdir);

// Trains one sweep point (reusing the Phase-1 cache) and evaluates the best
// and pretrain-only checkpoints on the target test split.
RunOutcome run_point(const ExperimentSpec& spec, const PointConfig& point,
                     uint64_t seed, const fs::path& outdir);

// Continue an interrupted run directory; finishes training and evaluation.
// The continued trajectory matches an uninterrupted run.
RunOutcome resume_run(const fs::path& rundir);

// Evaluate a saved checkpoint on a split ("test" or "val") of a data root.
MetricsReport evaluate_checkpoint(const fs::path& checkpoint,
                                  const fs::path& data_root,
                                  const SplitSpec& split,
                                  const std::string& split_name,
                                  const EvalOptions& options,
                                  Domain domain = Domain::kTarget);

}  // namespace vesseladapt
