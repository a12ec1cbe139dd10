#pragma once

#include <torch/torch.h>

#include <map>
#include <string>
#include <vector>

#include "vesseladapt/metrics.hpp"
#include "vesseladapt/nets.hpp"
#include "vesseladapt/volume_io.hpp"

namespace vesseladapt {

struct SlicePrediction {
  torch::Tensor prob_recon;  // [3, H, W] simplex map (reconstruction path)
  torch::Tensor prob_trans;  // [3, H, W]; undefined for source-domain inputs
  torch::Tensor hard;        // [H, W] int64 labels after averaging + argmax
};

struct VolumePrediction {
  SegMask mask;
  std::vector<SlicePrediction> slices;
};

// Deterministic argmax along `dim` with ties resolved to the lowest index.
torch::Tensor argmax_lowest(const torch::Tensor& t, int64_t dim);

// Target inputs run both heads (reconstruction d=1 and translation d=0) and
// average the simplex maps before the final argmax; source inputs use the
// reconstruction path only.
VolumePrediction predict(ModelBundle& models, const Volume& vol,
                         int64_t channels);

struct VolumeMetrics {
  std::string subject;
  std::map<std::string, double> values;
  bool assd_valid = true;
};

struct MetricsReport {
  std::vector<VolumeMetrics> volumes;
  std::map<std::string, double> mean, stddev;  // population std
  int64_t assd_missing = 0;

  void finalize();
  std::string to_csv() const;
  std::string to_json() const;
};

struct EvalOptions {
  int64_t channels = 3;
  bool cldice_per_slice = false;
  bool invert_target = false;  // mirror the training-side inversion switch
};

VolumeMetrics evaluate_volume(const SegMask& pred, const SegMask& ref);

MetricsReport evaluate(ModelBundle& models,
                       const std::vector<IndexEntry>& entries,
                       const EvalOptions& options);

// metrics.csv + metrics.json under `outdir`
void emit_report(const MetricsReport& report, const fs::path& outdir);

// Sweep-level results: values[metric][point][seed].
struct SweepTable {
  std::string sweep_name;
  std::vector<std::string> point_labels;
  std::vector<double> point_x;
  std::map<std::string, std::vector<std::vector<double>>> values;

  std::string to_csv() const;
};

// sweep.csv plus plots/sweep_<metric>.png line plots (mean +- std per point)
void emit_report(const SweepTable& table, const fs::path& outdir);

}  // namespace vesseladapt
