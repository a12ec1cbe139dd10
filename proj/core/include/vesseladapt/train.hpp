#pragma once

#include <torch/torch.h>

#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vesseladapt/losses.hpp"
#include "vesseladapt/nets.hpp"
#include "vesseladapt/preprocess.hpp"
#include "vesseladapt/volume_io.hpp"

namespace vesseladapt {

struct TrainConfig {
  int64_t iters_phase1 = 6000;
  int64_t iters_pretrain = 800;
  int64_t iters_phase2 = 1500;
  int64_t batch_size = 4;

  double lr_gan = 2e-3;      // G and D, Phase 1
  double lr_encoder = 1e-4;  // E and G_lsb, pretrain + Phase 2
  double beta1_phase1 = 0.0, beta2_phase1 = 0.99;
  double beta1_phase2 = 0.9, beta2_phase2 = 0.999;

  double r1_gamma = 10.0;
  int64_t r1_interval = 16;  // lazy regularization cadences
  int64_t pl_interval = 8;
  double pl_decay = 0.99;

  double w_recon = 1.0, w_seg = 1.0, w_cycle = 1.0;

  int64_t val_cadence = 200;
  int64_t channels = 3;  // 2.5D slice channels
  uint64_t seed = 7;
  int64_t threads = 0;  // 0 = leave torch's default

  AblationFlags flags;
  NetConfig net;

  // Applies the VESSELADAPT_SEED environment override and syncs net channel
  // count with `channels`.
  void finalize();
  std::string to_json_string() const;
  static TrainConfig from_json_string(const std::string& text);
  static TrainConfig from_json_file(const fs::path& path);
  uint64_t hash() const;
};

struct EvalVolume {
  Volume volume;
  SegMask mask;
};

// In-memory training corpus: 2.5D slices grouped by stratum plus whole
// validation volumes.
struct TrainData {
  std::vector<SliceSample> source;            // S (fully annotated)
  std::vector<SliceSample> target_unlabeled;  // slices of the M volumes
  std::vector<SliceSample> target_labeled;    // the m designated samples
  std::vector<SliceSample> target_extra;      // unlabeled slices of T_L volumes
                                              // (Phase-1 pool only)
  std::vector<EvalVolume> val_source, val_target;

  // incremented whenever a target sample is handed to a training batch
  mutable int64_t target_reads = 0;

  int64_t phase1_pool_size() const;
  const SliceSample& phase1_sample(int64_t i) const;
  uint64_t checksum() const;
};

TrainData load_train_data(const fs::path& root, const SplitSpec& split,
                          const TrainConfig& cfg);

struct Batch {
  std::vector<const SliceSample*> samples;
  std::vector<std::string> ids;  // subject:slice, for divergence reports
};

// Balanced composition {2 source, 1 T_L, 1 T_U} when bds is on (batch size
// must be 4); uniform over all strata otherwise. Draws from torch's global
// RNG so checkpointed generator state covers sampling.
Batch sample_batch(const TrainData& data, bool bds, int64_t batch_size);
Batch sample_phase1_batch(const TrainData& data, int64_t batch_size);
Batch sample_source_batch(const TrainData& data, int64_t batch_size);

struct CheckpointRecord {
  int64_t iteration = 0;
  std::string phase;
  std::map<std::string, double> metrics;
  std::string file;
};

// Highest mean of the available source/target validation vessel Dice values;
// ties break toward the later iteration.
const CheckpointRecord& select_checkpoint(
    const std::vector<CheckpointRecord>& records);

enum class TrainPhase { kPhase1 = 0, kPretrain = 1, kPhase2 = 2, kDone = 3 };
const char* to_string(TrainPhase p);

class Trainer {
 public:
  Trainer(fs::path rundir, TrainConfig cfg, std::shared_ptr<TrainData> data);

  // Continues from `checkpoints/last.pt`; config + data checksums must match.
  static Trainer resume(const fs::path& rundir, std::shared_ptr<TrainData> data);

  // Runs every remaining phase (no-op when already done). A step budget
  // stops after that many iterations, leaving a resumable `last.pt`.
  void run(std::optional<int64_t> step_budget = {});
  void run_phase1();
  void pretrain_source();
  void run_phase2();

  // Replaces G/D with a previously trained Phase-1 result and marks Phase 1
  // finished (used to share Phase-1 work across sweep points).
  void adopt_phase1(const fs::path& phase1_checkpoint);

  ModelBundle& models() { return models_; }
  const std::vector<CheckpointRecord>& records() const { return records_; }
  TrainPhase phase() const { return phase_; }
  int64_t iteration() const { return iter_; }
  const TrainConfig& config() const { return cfg_; }
  const fs::path& rundir() const { return rundir_; }
  PathLengthState& path_length_state() { return pl_state_; }

  // single steps (exposed for the structural-invariant tests)
  LossReport phase1_step();
  LossReport pretrain_step();
  LossReport phase2_step();
  std::map<std::string, double> validate();

  void save_checkpoint(const std::string& name);
  void load_checkpoint(const fs::path& file);

 private:
  void loop(TrainPhase phase, int64_t total_iters,
            LossReport (Trainer::*step)());
  void build_optimizers();
  void log_report(const LossReport& report);
  void record_validation();

  fs::path rundir_;
  TrainConfig cfg_;
  std::shared_ptr<TrainData> data_;
  ModelBundle models_;
  PerceptualExtractor perceptual_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_, opt_e_;
  PathLengthState pl_state_;
  TrainPhase phase_ = TrainPhase::kPhase1;
  int64_t iter_ = 0;  // within the current phase
  std::vector<CheckpointRecord> records_;
  std::ofstream log_;
  std::vector<std::string> last_batch_ids_;
  std::optional<int64_t> budget_;
};

// Convenience wrappers mirroring the operation names.
ModelBundle& run_phase1(Trainer& t);
ModelBundle& pretrain_source(Trainer& t);
ModelBundle& run_phase2(Trainer& t);

}  // namespace vesseladapt
