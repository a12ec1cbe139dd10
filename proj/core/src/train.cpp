#include "vesseladapt/train.hpp"

#include <ATen/Parallel.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vesseladapt/errors.hpp"
#include "vesseladapt/infer_eval.hpp"

namespace vesseladapt {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// config

void TrainConfig::finalize() {
  if (const char* env = std::getenv("VESSELADAPT_SEED")) {
    seed = std::strtoull(env, nullptr, 10);
  }
  net.image_channels = channels;
}

std::string TrainConfig::to_json_string() const {
  json j;
  j["iters_phase1"] = iters_phase1;
  j["iters_pretrain"] = iters_pretrain;
  j["iters_phase2"] = iters_phase2;
  j["batch_size"] = batch_size;
  j["lr_gan"] = lr_gan;
  j["lr_encoder"] = lr_encoder;
  j["beta1_phase1"] = beta1_phase1;
  j["beta2_phase1"] = beta2_phase1;
  j["beta1_phase2"] = beta1_phase2;
  j["beta2_phase2"] = beta2_phase2;
  j["r1_gamma"] = r1_gamma;
  j["r1_interval"] = r1_interval;
  j["pl_interval"] = pl_interval;
  j["pl_decay"] = pl_decay;
  j["w_recon"] = w_recon;
  j["w_seg"] = w_seg;
  j["w_cycle"] = w_cycle;
  j["val_cadence"] = val_cadence;
  j["channels"] = channels;
  j["seed"] = seed;
  j["threads"] = threads;
  j["flags"] = {{"residuals", flags.residuals},
                {"dsbn", flags.dsbn},
                {"bds", flags.bds},
                {"inversion", flags.inversion}};
  j["net"] = {{"image_size", net.image_size},
              {"z_dim", net.z_dim},
              {"w_dim", net.w_dim},
              {"base_channels", net.base_channels},
              {"max_channels", net.max_channels}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("bad train config JSON: ") + e.what());
  }
  TrainConfig c;
  c.iters_phase1 = j.value("iters_phase1", c.iters_phase1);
  c.iters_pretrain = j.value("iters_pretrain", c.iters_pretrain);
  c.iters_phase2 = j.value("iters_phase2", c.iters_phase2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_gan = j.value("lr_gan", c.lr_gan);
  c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
  c.beta1_phase1 = j.value("beta1_phase1", c.beta1_phase1);
  c.beta2_phase1 = j.value("beta2_phase1", c.beta2_phase1);
  c.beta1_phase2 = j.value("beta1_phase2", c.beta1_phase2);
  c.beta2_phase2 = j.value("beta2_phase2", c.beta2_phase2);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  c.r1_interval = j.value("r1_interval", c.r1_interval);
  c.pl_interval = j.value("pl_interval", c.pl_interval);
  c.pl_decay = j.value("pl_decay", c.pl_decay);
  c.w_recon = j.value("w_recon", c.w_recon);
  c.w_seg = j.value("w_seg", c.w_seg);
  c.w_cycle = j.value("w_cycle", c.w_cycle);
  c.val_cadence = j.value("val_cadence", c.val_cadence);
  c.channels = j.value("channels", c.channels);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  if (j.contains("flags")) {
    const auto& f = j["flags"];
    c.flags.residuals = f.value("residuals", true);
    c.flags.dsbn = f.value("dsbn", true);
    c.flags.bds = f.value("bds", true);
    c.flags.inversion = f.value("inversion", true);
  }
  if (j.contains("net")) {
    const auto& n = j["net"];
    c.net.image_size = n.value("image_size", c.net.image_size);
    c.net.z_dim = n.value("z_dim", c.net.z_dim);
    c.net.w_dim = n.value("w_dim", c.net.w_dim);
    c.net.base_channels = n.value("base_channels", c.net.base_channels);
    c.net.max_channels = n.value("max_channels", c.net.max_channels);
  }
  return c;
}

TrainConfig TrainConfig::from_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json_string(text);
}

uint64_t TrainConfig::hash() const {
  auto s = to_json_string();
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// data

int64_t TrainData::phase1_pool_size() const {
  return static_cast<int64_t>(source.size() + target_unlabeled.size() +
                              target_labeled.size() + target_extra.size());
}

const SliceSample& TrainData::phase1_sample(int64_t i) const {
  size_t k = static_cast<size_t>(i);
  if (k < source.size()) return source[k];
  k -= source.size();
  if (k < target_unlabeled.size()) {
    ++target_reads;
    return target_unlabeled[k];
  }
  k -= target_unlabeled.size();
  if (k < target_labeled.size()) {
    ++target_reads;
    return target_labeled[k];
  }
  k -= target_labeled.size();
  ++target_reads;
  return target_extra[k];
}

uint64_t TrainData::checksum() const {
  uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 0x100000001B3ull;
  };
  for (const auto* pool :
       {&source, &target_unlabeled, &target_labeled, &target_extra}) {
    for (const auto& s : *pool) {
      mix(tensor_checksum(s.image));
      if (s.onehot) mix(tensor_checksum(*s.onehot));
    }
  }
  for (const auto* pool : {&val_source, &val_target})
    for (const auto& v : *pool) {
      mix(tensor_checksum(v.volume.data));
      mix(tensor_checksum(v.mask.labels));
    }
  return h;
}

TrainData load_train_data(const fs::path& root, const SplitSpec& split,
                          const TrainConfig& cfg) {
  auto index = build_index(root, split);
  TrainData data;

  auto maybe_invert = [&](Volume v) {
    if (cfg.flags.inversion && v.header.domain_tag == Domain::kTarget)
      return invert_intensity(v);
    return v;
  };

  for (const auto& e : index.train) {
    auto vol = maybe_invert(load_volume(e.volume_path));
    if (e.domain == Domain::kSource) {
      auto mask = load_mask(*e.mask_path);
      auto slices = extract_slices(vol, &mask, cfg.channels);
      data.source.insert(data.source.end(),
                         std::make_move_iterator(slices.begin()),
                         std::make_move_iterator(slices.end()));
    } else if (e.labeled) {
      auto mask = load_mask(*e.mask_path);
      auto slices = extract_slices(vol, &mask, cfg.channels, &e.labeled_slices);
      for (auto& s : slices) {
        if (s.labeled)
          data.target_labeled.push_back(std::move(s));
        else
          data.target_extra.push_back(std::move(s));
      }
    } else {
      auto slices = extract_slices(vol, nullptr, cfg.channels);
      data.target_unlabeled.insert(data.target_unlabeled.end(),
                                   std::make_move_iterator(slices.begin()),
                                   std::make_move_iterator(slices.end()));
    }
  }

  for (const auto& e : index.val) {
    if (!e.mask_path)
      throw MissingAnnotation("validation subject '" + e.subject_id +
                              "' has no mask");
    EvalVolume ev{maybe_invert(load_volume(e.volume_path)),
                  load_mask(*e.mask_path)};
    (e.domain == Domain::kSource ? data.val_source : data.val_target)
        .push_back(std::move(ev));
  }
  return data;
}

namespace {
int64_t draw(int64_t n) {
  return torch::randint(n, {1}, torch::kLong).item<int64_t>();
}

void push(Batch& b, const SliceSample& s) {
  b.samples.push_back(&s);
  b.ids.push_back(s.subject_id + ":" + std::to_string(s.slice_index));
}
}  // namespace

Batch sample_batch(const TrainData& data, bool bds, int64_t batch_size) {
  Batch batch;
  if (bds) {
    if (batch_size != 4)
      throw Error("balanced data sampling expects batch_size 4");
    if (data.source.empty()) throw EmptyStratum("no source samples");
    if (data.target_labeled.empty()) throw EmptyStratum("no labeled target samples");
    if (data.target_unlabeled.empty())
      throw EmptyStratum("no unlabeled target samples");
    push(batch, data.source[draw(data.source.size())]);
    push(batch, data.source[draw(data.source.size())]);
    push(batch, data.target_labeled[draw(data.target_labeled.size())]);
    data.target_reads += 1;
    push(batch, data.target_unlabeled[draw(data.target_unlabeled.size())]);
    data.target_reads += 1;
    return batch;
  }
  int64_t total = static_cast<int64_t>(data.source.size() +
                                       data.target_labeled.size() +
                                       data.target_unlabeled.size());
  if (total == 0) throw EmptyStratum("no training samples");
  for (int64_t i = 0; i < batch_size; ++i) {
    int64_t k = draw(total);
    if (k < static_cast<int64_t>(data.source.size())) {
      push(batch, data.source[k]);
      continue;
    }
    k -= static_cast<int64_t>(data.source.size());
    data.target_reads += 1;
    if (k < static_cast<int64_t>(data.target_labeled.size()))
      push(batch, data.target_labeled[k]);
    else
      push(batch, data.target_unlabeled[k - data.target_labeled.size()]);
  }
  return batch;
}

Batch sample_phase1_batch(const TrainData& data, int64_t batch_size) {
  int64_t total = data.phase1_pool_size();
  if (total == 0) throw EmptyStratum("no training samples");
  Batch batch;
  for (int64_t i = 0; i < batch_size; ++i)
    push(batch, data.phase1_sample(draw(total)));
  return batch;
}

Batch sample_source_batch(const TrainData& data, int64_t batch_size) {
  if (data.source.empty()) throw EmptyStratum("no source samples");
  Batch batch;
  for (int64_t i = 0; i < batch_size; ++i)
    push(batch, data.source[draw(data.source.size())]);
  return batch;
}

// ---------------------------------------------------------------------------
// checkpoint records

const CheckpointRecord& select_checkpoint(
    const std::vector<CheckpointRecord>& records) {
  const CheckpointRecord* best = nullptr;
  double best_score = -1;
  for (const auto& r : records) {
    double sum = 0;
    int n = 0;
    for (const char* key : {"val_source_vessel_dice", "val_target_vessel_dice"}) {
      auto it = r.metrics.find(key);
      if (it != r.metrics.end() && std::isfinite(it->second)) {
        sum += it->second;
        ++n;
      }
    }
    if (n == 0) continue;
    double score = sum / n;
    // records arrive in iteration order: >= lets the later iteration win ties
    if (!best || score >= best_score) {
      best = &r;
      best_score = score;
    }
  }
  if (!best) throw NoValidRecords("no checkpoint record has finite metrics");
  return *best;
}

const char* to_string(TrainPhase p) {
  switch (p) {
    case TrainPhase::kPhase1: return "phase1";
    case TrainPhase::kPretrain: return "pretrain";
    case TrainPhase::kPhase2: return "phase2";
    default: return "done";
  }
}

// ---------------------------------------------------------------------------
// trainer

Trainer::Trainer(fs::path rundir, TrainConfig cfg, std::shared_ptr<TrainData> data)
    : rundir_(std::move(rundir)), cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.finalize();
  if (cfg_.threads > 0) at::set_num_threads(static_cast<int>(cfg_.threads));
  fs::create_directories(rundir_ / "checkpoints");
  torch::manual_seed(cfg_.seed);
  models_ = build_models(cfg_.net, cfg_.flags);
  perceptual_ = PerceptualExtractor(cfg_.channels);
  pl_state_.decay = cfg_.pl_decay;
  build_optimizers();
  {
    std::ofstream out(rundir_ / "config.resolved.json");
    out << cfg_.to_json_string() << "\n";
  }
  log_.open(rundir_ / "log.jsonl", std::ios::app);
}

void Trainer::build_optimizers() {
  using torch::optim::Adam;
  using torch::optim::AdamOptions;
  auto gan_opts = AdamOptions(cfg_.lr_gan).betas(
      std::make_tuple(cfg_.beta1_phase1, cfg_.beta2_phase1));
  auto enc_opts = AdamOptions(cfg_.lr_encoder)
                      .betas(std::make_tuple(cfg_.beta1_phase2, cfg_.beta2_phase2));
  opt_g_ = std::make_unique<Adam>(models_.generator_core_params(), gan_opts);
  opt_d_ = std::make_unique<Adam>(models_.discriminator_params(), gan_opts);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(models_.encoder_params(),
                      std::make_unique<AdamOptions>(enc_opts));
  groups.emplace_back(models_.lsb_params(),
                      std::make_unique<AdamOptions>(enc_opts));
  opt_e_ = std::make_unique<Adam>(groups, enc_opts);
}

Trainer Trainer::resume(const fs::path& rundir, std::shared_ptr<TrainData> data) {
  auto cfg = TrainConfig::from_json_file(rundir / "config.resolved.json");
  Trainer t(rundir, cfg, std::move(data));
  auto last = rundir / "checkpoints" / "last.pt";
  if (!fs::exists(last))
    throw CorruptCheckpoint("resume: no checkpoint at " + last.string());
  t.load_checkpoint(last);
  return t;
}

void Trainer::log_report(const LossReport& report) {
  LossReport line = report;
  line.set("iter", static_cast<double>(iter_));
  log_ << "{\"phase\":\"" << to_string(phase_) << "\","
       << line.to_json_line().substr(1) << "\n";
  log_.flush();
}

std::map<std::string, double> Trainer::validate() {
  std::map<std::string, double> metrics;
  auto eval_domain = [&](const std::vector<EvalVolume>& volumes,
                         const std::string& prefix) {
    if (volumes.empty()) return;
    double vessel = 0, brain = 0;
    for (const auto& ev : volumes) {
      auto pred = predict(models_, ev.volume, cfg_.channels);
      vessel += dice(pred.mask.labels, ev.mask.labels, kLabelVessel);
      brain += dice(pred.mask.labels, ev.mask.labels, kLabelBrain);
    }
    metrics[prefix + "_vessel_dice"] = vessel / volumes.size();
    metrics[prefix + "_brain_dice"] = brain / volumes.size();
  };
  eval_domain(data_->val_source, "val_source");
  eval_domain(data_->val_target, "val_target");
  models_.train();
  return metrics;
}

void Trainer::record_validation() {
  CheckpointRecord rec;
  rec.iteration = iter_;
  rec.phase = to_string(phase_);
  rec.metrics = validate();
  for (const auto& [k, v] : rec.metrics)
    if (!std::isfinite(v))
      throw DivergenceDetected("non-finite validation metric " + k);
  records_.push_back(rec);

  LossReport line;
  for (const auto& [k, v] : rec.metrics) line.set(k, v);
  log_report(line);

  // keep best + last; later iterations win ties
  const auto& best = select_checkpoint(records_);
  if (&best == &records_.back()) {
    records_.back().file = "checkpoints/best.pt";
    save_checkpoint("best");
  }
  save_checkpoint("last");

  std::ofstream recjson(rundir_ / "records.json");
  json arr = json::array();
  for (const auto& r : records_) {
    json item;
    item["iteration"] = r.iteration;
    item["phase"] = r.phase;
    item["metrics"] = r.metrics;
    item["file"] = r.file;
    arr.push_back(item);
  }
  recjson << arr.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// steps

LossReport Trainer::phase1_step() {
  LossReport report;
  auto batch = sample_phase1_batch(*data_, cfg_.batch_size);
  last_batch_ids_ = batch.ids;
  std::vector<torch::Tensor> images;
  for (const auto* s : batch.samples) images.push_back(s->image);
  auto real = torch::stack(images, 0);

  // discriminator step
  auto z = torch::randn({cfg_.batch_size, cfg_.net.z_dim});
  auto fake = models_.generate(models_.map_latent(z)).image;
  auto d_loss = adv_nonsat(models_.discriminate(fake.detach()),
                           models_.discriminate(real), AdvSide::kDiscriminator);
  opt_d_->zero_grad();
  d_loss.backward();
  opt_d_->step();
  report.set("adv_d", d_loss);

  if ((iter_ + 1) % cfg_.r1_interval == 0) {
    auto r1 = r1_penalty(
        [this](const torch::Tensor& x) { return models_.discriminate(x); },
        real, cfg_.r1_gamma);
    auto scaled = r1 * static_cast<double>(cfg_.r1_interval);
    opt_d_->zero_grad();
    scaled.backward();
    opt_d_->step();
    report.set("r1", r1);
  }

  // generator step
  auto z2 = torch::randn({cfg_.batch_size, cfg_.net.z_dim});
  auto fake2 = models_.generate(models_.map_latent(z2)).image;
  auto g_loss = adv_nonsat(models_.discriminate(fake2), {}, AdvSide::kGenerator);
  opt_g_->zero_grad();
  g_loss.backward();
  opt_g_->step();
  report.set("adv_g", g_loss);

  if ((iter_ + 1) % cfg_.pl_interval == 0) {
    auto z3 = torch::randn({cfg_.batch_size, cfg_.net.z_dim});
    auto w = models_.map_latent(z3).styles.detach();
    auto result = path_length(
        [this](const torch::Tensor& ws) {
          return models_.synthesis->forward(ws).image;
        },
        w, pl_state_);
    auto scaled = result.loss * static_cast<double>(cfg_.pl_interval);
    opt_g_->zero_grad();
    scaled.backward();
    opt_g_->step();
    report.set("pl", result.loss);
    report.set("pl_avg", pl_state_.running_avg);
  }
  return report;
}

LossReport Trainer::pretrain_step() {
  LossReport report;
  auto batch = sample_source_batch(*data_, cfg_.batch_size);
  last_batch_ids_ = batch.ids;
  std::vector<torch::Tensor> images, masks;
  for (const auto* s : batch.samples) {
    images.push_back(s->image);
    masks.push_back(*s->onehot);
  }
  auto x = torch::stack(images, 0);
  auto y = torch::stack(masks, 0);

  auto enc = models_.encode(x, Domain::kSource);
  auto gen = models_.generate(enc.code,
                              models_.flags.residuals ? &enc.residuals : nullptr);
  auto logits = models_.label_branch(gen.features);

  auto rl = recon_loss(x, gen.image, perceptual_);
  auto dl = dice_loss(torch::softmax(logits, 1), y);
  auto cl = ce_loss(logits, y);
  auto loss = cfg_.w_recon * rl.total() + cfg_.w_seg * (dl + cl);

  opt_e_->zero_grad();
  loss.backward();
  opt_e_->step();

  report.set("mse", rl.mse);
  report.set("perceptual", rl.perceptual);
  report.set("dice", dl);
  report.set("ce", cl);
  return report;
}

LossReport Trainer::phase2_step() {
  LossReport report;
  auto batch = sample_batch(*data_, cfg_.flags.bds, cfg_.batch_size);
  last_batch_ids_ = batch.ids;

  std::vector<const SliceSample*> src, tgt;
  for (const auto* s : batch.samples)
    (s->domain == Domain::kSource ? src : tgt).push_back(s);

  torch::Tensor total = torch::zeros({});
  double mse_sum = 0, perc_sum = 0, dice_sum = 0, ce_sum = 0;
  const double inv_b = 1.0 / static_cast<double>(batch.samples.size());
  const bool use_res = models_.flags.residuals;

  auto add_recon = [&](const torch::Tensor& x, const torch::Tensor& x_hat,
                       double weight, double group) {
    auto rl = recon_loss(x, x_hat, perceptual_);
    total = total + weight * group * inv_b * rl.total();
    mse_sum += rl.mse.item<double>();
    perc_sum += rl.perceptual.item<double>();
  };
  auto add_seg = [&](const torch::Tensor& logits, const torch::Tensor& y,
                     double group) {
    auto dl = dice_loss(torch::softmax(logits, 1), y);
    auto cl = ce_loss(logits, y);
    total = total + cfg_.w_seg * group * inv_b * (dl + cl);
    dice_sum += dl.item<double>();
    ce_sum += cl.item<double>();
  };

  if (!src.empty()) {
    const double group = static_cast<double>(src.size());
    std::vector<torch::Tensor> images, masks;
    for (const auto* s : src) {
      images.push_back(s->image);
      masks.push_back(*s->onehot);
    }
    auto x = torch::stack(images, 0);
    auto y = torch::stack(masks, 0);

    // reconstruction (d = 0) and source-to-target translation (d = 1)
    auto enc_s = models_.encode(x, Domain::kSource);
    auto gen_s = models_.generate(enc_s.code, use_res ? &enc_s.residuals : nullptr);
    auto enc_t = models_.encode(x, Domain::kTarget);
    auto gen_t = models_.generate(enc_t.code, use_res ? &enc_t.residuals : nullptr);

    add_recon(x, gen_s.image, cfg_.w_recon, group);
    // both predictions scored against the same source annotation
    add_seg(models_.label_branch(gen_s.features), y, group);
    add_seg(models_.label_branch(gen_t.features), y, group);

    // cycle: translation immediately followed by its inverse; only the most
    // recent pass carries gradients
    auto cyc_in = gen_t.image.detach();
    auto enc_c = models_.encode(cyc_in, Domain::kSource);
    auto gen_c = models_.generate(enc_c.code, use_res ? &enc_c.residuals : nullptr);
    add_recon(x, gen_c.image, cfg_.w_cycle, group);
  }

  if (!tgt.empty()) {
    const double group = static_cast<double>(tgt.size());
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labeled_rows;
    std::vector<torch::Tensor> labeled_masks;
    for (size_t i = 0; i < tgt.size(); ++i) {
      images.push_back(tgt[i]->image);
      if (tgt[i]->onehot) {
        labeled_rows.push_back(static_cast<int64_t>(i));
        labeled_masks.push_back(*tgt[i]->onehot);
      }
    }
    auto x = torch::stack(images, 0);

    auto enc_t = models_.encode(x, Domain::kTarget);
    auto gen_t = models_.generate(enc_t.code, use_res ? &enc_t.residuals : nullptr);
    auto enc_s = models_.encode(x, Domain::kSource);
    auto gen_s = models_.generate(enc_s.code, use_res ? &enc_s.residuals : nullptr);

    add_recon(x, gen_t.image, cfg_.w_recon, group);

    if (!labeled_rows.empty()) {
      // segmentation only for samples in T_L
      auto rows = torch::tensor(labeled_rows, torch::kLong);
      auto y = torch::stack(labeled_masks, 0);
      auto logits_t = models_.label_branch(gen_t.features).index_select(0, rows);
      auto logits_s = models_.label_branch(gen_s.features).index_select(0, rows);
      const double lgroup = static_cast<double>(labeled_rows.size());
      add_seg(logits_t, y, lgroup);
      add_seg(logits_s, y, lgroup);
    }

    auto cyc_in = gen_s.image.detach();
    auto enc_c = models_.encode(cyc_in, Domain::kTarget);
    auto gen_c = models_.generate(enc_c.code, use_res ? &enc_c.residuals : nullptr);
    add_recon(x, gen_c.image, cfg_.w_cycle, group);
  }

  opt_e_->zero_grad();
  total.backward();
  opt_e_->step();

  report.set("loss", total);
  report.set("mse", mse_sum);
  report.set("perceptual", perc_sum);
  report.set("dice", dice_sum);
  report.set("ce", ce_sum);
  return report;
}

// ---------------------------------------------------------------------------
// loops

void Trainer::loop(TrainPhase phase, int64_t total_iters,
                   LossReport (Trainer::*step)()) {
  if (phase_ != phase) return;
  const bool validates = phase != TrainPhase::kPhase1;
  while (iter_ < total_iters) {
    if (budget_ && *budget_ <= 0) {
      save_checkpoint("last");
      return;
    }
    auto report = (this->*step)();
    if (!report.all_finite()) {
      save_checkpoint("diverged");
      std::string ids;
      for (const auto& id : last_batch_ids_) ids += id + " ";
      throw DivergenceDetected("non-finite loss at " +
                               std::string(to_string(phase_)) + " iter " +
                               std::to_string(iter_) + " batch [" + ids + "]");
    }
    log_report(report);
    ++iter_;
    if (budget_) --*budget_;
    if (validates && (iter_ % cfg_.val_cadence == 0 || iter_ == total_iters))
      record_validation();
    else if (!validates && iter_ % cfg_.val_cadence == 0)
      save_checkpoint("last");
  }
  save_checkpoint(std::string(to_string(phase)) + "_final");
  phase_ = static_cast<TrainPhase>(static_cast<int>(phase) + 1);
  iter_ = 0;
  if (phase_ == TrainPhase::kPretrain) {
    // Phase 2 freeze: everything in G outside G_lsb stays fixed from here on
    models_.set_generator_core_frozen(true);
  }
  save_checkpoint("last");
}

void Trainer::run_phase1() {
  loop(TrainPhase::kPhase1, cfg_.iters_phase1, &Trainer::phase1_step);
}

void Trainer::pretrain_source() {
  if (phase_ != TrainPhase::kPretrain) return;
  if (cfg_.iters_pretrain == 0 || data_->source.empty()) {
    // few-shot (N = 0) runs have nothing to pretrain on
    models_.set_generator_core_frozen(true);
    save_checkpoint("pretrain_final");
    phase_ = TrainPhase::kPhase2;
    iter_ = 0;
    save_checkpoint("last");
    return;
  }
  loop(TrainPhase::kPretrain, cfg_.iters_pretrain, &Trainer::pretrain_step);
}

void Trainer::run_phase2() {
  loop(TrainPhase::kPhase2, cfg_.iters_phase2, &Trainer::phase2_step);
}

void Trainer::run(std::optional<int64_t> step_budget) {
  budget_ = step_budget;
  run_phase1();
  pretrain_source();
  run_phase2();
  budget_.reset();
}

ModelBundle& run_phase1(Trainer& t) {
  t.run_phase1();
  return t.models();
}
ModelBundle& pretrain_source(Trainer& t) {
  t.pretrain_source();
  return t.models();
}
ModelBundle& run_phase2(Trainer& t) {
  t.run_phase2();
  return t.models();
}

// ---------------------------------------------------------------------------
// checkpointing

void Trainer::save_checkpoint(const std::string& name) {
  torch::serialize::OutputArchive ar;
  save_bundle(models_, ar);

  json meta;
  meta["phase"] = static_cast<int>(phase_);
  meta["iter"] = iter_;
  meta["pl_avg"] = pl_state_.running_avg;
  meta["config_hash"] = cfg_.hash();
  meta["data_checksum"] = data_->checksum();
  json recs = json::array();
  for (const auto& r : records_) {
    json item;
    item["iteration"] = r.iteration;
    item["phase"] = r.phase;
    item["metrics"] = r.metrics;
    item["file"] = r.file;
    recs.push_back(item);
  }
  meta["records"] = recs;
  ar.write("meta", meta.dump());

  auto write_opt = [&](const char* key, torch::optim::Optimizer& opt) {
    torch::serialize::OutputArchive sub;
    opt.save(sub);
    ar.write(key, sub);
  };
  write_opt("opt_g", *opt_g_);
  write_opt("opt_d", *opt_d_);
  write_opt("opt_e", *opt_e_);

  ar.save_to((rundir_ / "checkpoints" / (name + ".pt")).string());
}

void Trainer::load_checkpoint(const fs::path& file) {
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(file.string());
  } catch (const c10::Error& e) {
    throw CorruptCheckpoint("cannot read checkpoint " + file.string() + ": " +
                            e.what_without_backtrace());
  }

  c10::IValue meta_text;
  if (!ar.try_read("meta", meta_text))
    throw CorruptCheckpoint("checkpoint has no meta record");
  json meta;
  try {
    meta = json::parse(meta_text.toStringRef());
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("bad checkpoint meta: ") + e.what());
  }
  if (meta.value("config_hash", uint64_t{0}) != cfg_.hash())
    throw CorruptCheckpoint("checkpoint config hash does not match this run");
  if (meta.value("data_checksum", uint64_t{0}) != data_->checksum())
    throw CorruptCheckpoint("checkpoint was trained on different data");

  models_ = load_bundle(ar);
  build_optimizers();
  auto read_opt = [&](const char* key, torch::optim::Optimizer& opt) {
    torch::serialize::InputArchive sub;
    ar.read(key, sub);
    opt.load(sub);
  };
  read_opt("opt_g", *opt_g_);
  read_opt("opt_d", *opt_d_);
  read_opt("opt_e", *opt_e_);

  phase_ = static_cast<TrainPhase>(meta.value("phase", 0));
  iter_ = meta.value("iter", int64_t{0});
  pl_state_.running_avg = meta.value("pl_avg", 0.0);
  records_.clear();
  for (const auto& item : meta.value("records", json::array())) {
    CheckpointRecord r;
    r.iteration = item.value("iteration", int64_t{0});
    r.phase = item.value("phase", "");
    r.file = item.value("file", "");
    for (const auto& [k, v] : item.value("metrics", json::object()).items())
      r.metrics[k] = v.get<double>();
    records_.push_back(std::move(r));
  }
  if (phase_ != TrainPhase::kPhase1) models_.set_generator_core_frozen(true);

  torch::Tensor rng_state;
  if (ar.try_read("rng_state", rng_state)) {
    at::Generator gen = at::detail::getDefaultCPUGenerator();
    gen.set_state(rng_state.to(torch::kUInt8));
  }
}

void Trainer::adopt_phase1(const fs::path& phase1_checkpoint) {
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(phase1_checkpoint.string());
  } catch (const c10::Error& e) {
    throw CorruptCheckpoint("cannot read phase-1 checkpoint: " +
                            std::string(e.what_without_backtrace()));
  }
  c10::IValue config_text;
  if (!ar.try_read("config", config_text))
    throw CorruptCheckpoint("phase-1 checkpoint has no net config");
  auto [cfg, flags] = net_config_from_json(config_text.toStringRef());
  if (net_config_to_json(cfg, models_.flags) !=
      net_config_to_json(models_.config, models_.flags))
    throw CorruptCheckpoint("phase-1 checkpoint net config differs");

  auto read_module = [&](const char* key, torch::nn::Module& m) {
    torch::serialize::InputArchive sub;
    ar.read(key, sub);
    m.load(sub);
  };
  read_module("G_mapping", *models_.mapping);
  read_module("G", *models_.synthesis);
  read_module("D", *models_.discriminator);

  c10::IValue meta_text;
  if (ar.try_read("meta", meta_text)) {
    auto meta = json::parse(meta_text.toStringRef(), nullptr, false);
    if (!meta.is_discarded()) pl_state_.running_avg = meta.value("pl_avg", 0.0);
  }

  phase_ = TrainPhase::kPretrain;
  iter_ = 0;
  models_.set_generator_core_frozen(true);
  save_checkpoint("last");
}

}  // namespace vesseladapt
