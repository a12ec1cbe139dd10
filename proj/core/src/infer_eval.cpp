#include "vesseladapt/infer_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vesseladapt/errors.hpp"
#include "vesseladapt/plot.hpp"
#include "vesseladapt/preprocess.hpp"

namespace vesseladapt {

using json = nlohmann::json;

torch::Tensor argmax_lowest(const torch::Tensor& t, int64_t dim) {
  auto max_vals = std::get<0>(t.max(dim, /*keepdim=*/true));
  auto is_max = (t == max_vals);
  // first channel attaining the maximum wins
  return std::get<1>(is_max.max(dim));
}

VolumePrediction predict(ModelBundle& models, const Volume& vol,
                         int64_t channels) {
  torch::NoGradGuard no_grad;
  models.eval();

  auto samples = extract_slices(vol, nullptr, channels);
  const bool is_target = vol.header.domain_tag == Domain::kTarget;
  const int64_t depth = static_cast<int64_t>(samples.size());

  VolumePrediction out;
  out.slices.resize(depth);
  std::vector<torch::Tensor> hard_slices(depth);

  constexpr int64_t kChunk = 8;
  for (int64_t begin = 0; begin < depth; begin += kChunk) {
    int64_t end = std::min(depth, begin + kChunk);
    std::vector<torch::Tensor> images;
    for (int64_t i = begin; i < end; ++i) images.push_back(samples[i].image);
    auto x = torch::stack(images, 0);

    auto own = is_target ? Domain::kTarget : Domain::kSource;
    auto recon = models.translate(x, own);
    auto prob_recon = torch::softmax(recon.logits, 1);
    torch::Tensor prob_avg = prob_recon, prob_trans;
    if (is_target) {
      // the translation head contributes only for target inputs
      auto trans = models.translate(x, Domain::kSource);
      prob_trans = torch::softmax(trans.logits, 1);
      prob_avg = 0.5 * (prob_recon + prob_trans);
    }
    auto hard = argmax_lowest(prob_avg, 1);

    for (int64_t i = begin; i < end; ++i) {
      auto& sp = out.slices[i];
      sp.prob_recon = prob_recon[i - begin];
      if (is_target) sp.prob_trans = prob_trans[i - begin];
      sp.hard = hard[i - begin];
      hard_slices[i] = sp.hard;
    }
  }

  out.mask.header = vol.header;
  out.mask.labels = torch::stack(hard_slices, 0).to(torch::kUInt8);
  return out;
}

VolumeMetrics evaluate_volume(const SegMask& pred, const SegMask& ref) {
  VolumeMetrics vm;
  vm.subject = ref.header.subject_id;
  const auto& p = pred.labels;
  const auto& r = ref.labels;
  vm.values["dice_brain"] = dice(p, r, kLabelBrain);
  vm.values["dice_vessel"] = dice(p, r, kLabelVessel);
  vm.values["precision_brain"] = precision(p, r, kLabelBrain);
  vm.values["precision_vessel"] = precision(p, r, kLabelVessel);
  vm.values["recall_brain"] = recall(p, r, kLabelBrain);
  vm.values["recall_vessel"] = recall(p, r, kLabelVessel);
  vm.values["cldice_vessel"] =
      cldice(p == kLabelVessel, r == kLabelVessel, /*per_slice=*/false);
  try {
    vm.values["assd_vessel_mm"] = assd_mm(p == kLabelVessel, r == kLabelVessel,
                                          ref.header.spacing_mm);
  } catch (const EmptyMask&) {
    vm.assd_valid = false;  // reported as missing, excluded from aggregates
  }
  return vm;
}

void MetricsReport::finalize() {
  mean.clear();
  stddev.clear();
  assd_missing = 0;
  if (volumes.empty()) return;
  std::map<std::string, std::vector<double>> columns;
  for (const auto& vm : volumes) {
    for (const auto& [k, v] : vm.values) {
      if (k == "assd_vessel_mm" && !vm.assd_valid) continue;
      columns[k].push_back(v);
    }
    if (!vm.assd_valid) ++assd_missing;
  }
  for (const auto& [k, vals] : columns) {
    double m = std::accumulate(vals.begin(), vals.end(), 0.0) /
               static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - m) * (v - m);
    var /= static_cast<double>(vals.size());
    mean[k] = m;
    stddev[k] = std::sqrt(var);
  }
}

namespace {
const std::vector<std::string> kMetricColumns = {
    "dice_brain",      "dice_vessel",      "precision_brain",
    "precision_vessel", "recall_brain",    "recall_vessel",
    "cldice_vessel",   "assd_vessel_mm"};
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "subject";
  for (const auto& c : kMetricColumns) os << "," << c;
  os << "\n";
  auto cell = [&](const VolumeMetrics& vm, const std::string& c) {
    if (c == "assd_vessel_mm" && !vm.assd_valid) return std::string();
    auto it = vm.values.find(c);
    if (it == vm.values.end()) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", it->second);
    return std::string(buf);
  };
  for (const auto& vm : volumes) {
    os << vm.subject;
    for (const auto& c : kMetricColumns) os << "," << cell(vm, c);
    os << "\n";
  }
  os << "aggregate_mean";
  for (const auto& c : kMetricColumns) {
    os << ",";
    auto it = mean.find(c);
    if (it != mean.end()) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", it->second);
      os << buf;
    }
  }
  os << "\n";
  return os.str();
}

std::string MetricsReport::to_json() const {
  json j;
  j["volumes"] = json::array();
  for (const auto& vm : volumes) {
    json v;
    v["subject"] = vm.subject;
    for (const auto& [k, val] : vm.values) {
      if (k == "assd_vessel_mm" && !vm.assd_valid) continue;
      v[k] = val;
    }
    if (!vm.assd_valid) v["assd_vessel_mm"] = nullptr;
    j["volumes"].push_back(v);
  }
  j["mean"] = mean;
  j["stddev"] = stddev;
  j["assd_missing"] = assd_missing;
  return j.dump(2);
}

MetricsReport evaluate(ModelBundle& models,
                       const std::vector<IndexEntry>& entries,
                       const EvalOptions& options) {
  MetricsReport report;
  for (const auto& e : entries) {
    auto vol = load_volume(e.volume_path);
    if (!e.mask_path)
      throw MissingAnnotation("evaluation entry '" + e.subject_id +
                              "' has no reference mask");
    auto ref = load_mask(*e.mask_path);
    if (options.invert_target && vol.header.domain_tag == Domain::kTarget)
      vol = invert_intensity(vol);
    auto pred = predict(models, vol, options.channels);
    report.volumes.push_back(evaluate_volume(pred.mask, ref));
  }
  report.finalize();
  return report;
}

void emit_report(const MetricsReport& report, const fs::path& outdir) {
  fs::create_directories(outdir);
  std::ofstream csv(outdir / "metrics.csv");
  csv << report.to_csv();
  std::ofstream js(outdir / "metrics.json");
  js << report.to_json() << "\n";
}

std::string SweepTable::to_csv() const {
  std::ostringstream os;
  os << sweep_name << ",metric,mean,std,values\n";
  for (const auto& [metric, rows] : values) {
    for (size_t p = 0; p < rows.size(); ++p) {
      const auto& seeds = rows[p];
      double m = seeds.empty() ? 0.0
                               : std::accumulate(seeds.begin(), seeds.end(), 0.0) /
                                     static_cast<double>(seeds.size());
      double var = 0;
      for (double v : seeds) var += (v - m) * (v - m);
      if (!seeds.empty()) var /= static_cast<double>(seeds.size());
      os << point_labels[p] << "," << metric << "," << m << ","
         << std::sqrt(var) << ",";
      for (size_t i = 0; i < seeds.size(); ++i) {
        if (i) os << ";";
        os << seeds[i];
      }
      os << "\n";
    }
  }
  return os.str();
}

void emit_report(const SweepTable& table, const fs::path& outdir) {
  fs::create_directories(outdir / "plots");
  std::ofstream csv(outdir / "sweep.csv");
  csv << table.to_csv();

  for (const auto& [metric, rows] : table.values) {
    plot::Series s;
    s.label = metric;
    for (size_t p = 0; p < rows.size(); ++p) {
      const auto& seeds = rows[p];
      if (seeds.empty()) continue;
      double m = std::accumulate(seeds.begin(), seeds.end(), 0.0) /
                 static_cast<double>(seeds.size());
      double var = 0;
      for (double v : seeds) var += (v - m) * (v - m);
      var /= static_cast<double>(seeds.size());
      s.x.push_back(table.point_x[p]);
      s.y.push_back(m);
      s.yerr.push_back(std::sqrt(var));
    }
    plot::write_line_plot(outdir / "plots" / ("sweep_" + metric + ".png"),
                          metric + " vs " + table.sweep_name, table.sweep_name,
                          metric, {s});
  }
}

}  // namespace vesseladapt
