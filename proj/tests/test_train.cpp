#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <fstream>

#include "helpers.hpp"
#include "vesseladapt/errors.hpp"
#include "vesseladapt/infer_eval.hpp"
#include "vesseladapt/train.hpp"

using namespace vesseladapt;
using testutil::TempDir;

namespace {

TrainConfig tiny_config(uint64_t seed = 7) {
  TrainConfig cfg;
  cfg.net.image_size = 8;
  cfg.net.z_dim = 8;
  cfg.net.w_dim = 8;
  cfg.net.base_channels = 8;
  cfg.net.max_channels = 8;
  cfg.channels = 1;
  cfg.batch_size = 4;
  cfg.iters_phase1 = 4;
  cfg.iters_pretrain = 3;
  cfg.iters_phase2 = 4;
  cfg.val_cadence = 2;
  cfg.r1_interval = 2;
  cfg.pl_interval = 2;
  cfg.seed = seed;
  cfg.threads = 1;
  cfg.finalize();
  return cfg;
}

SliceSample make_sample(Domain d, bool labeled, uint64_t seed,
                        const std::string& subject, int64_t index) {
  SliceSample s;
  s.image = testutil::random_volume(1, 8, 8, seed) * 2 - 1;
  s.domain = d;
  s.subject_id = subject;
  s.slice_index = index;
  if (labeled) {
    auto gen = at::detail::createCPUGenerator(seed + 999);
    auto labels = torch::randint(0, 3, {8, 8}, gen);
    s.onehot = torch::nn::functional::one_hot(labels, 3)
                   .permute({2, 0, 1})
                   .to(torch::kFloat32);
    s.labeled = true;
  }
  return s;
}

EvalVolume make_eval_volume(Domain d, uint64_t seed) {
  EvalVolume ev;
  ev.volume.header.grid_size = {4, 8, 8};
  ev.volume.header.spacing_mm = {1, 1, 1};
  ev.volume.header.domain_tag = d;
  ev.volume.header.subject_id = "val";
  ev.volume.data = testutil::random_volume(4, 8, 8, seed) * 2 - 1;
  ev.mask.header = ev.volume.header;
  auto gen = at::detail::createCPUGenerator(seed + 1);
  ev.mask.labels = torch::randint(0, 3, {4, 8, 8}, gen).to(torch::kUInt8);
  return ev;
}

std::shared_ptr<TrainData> tiny_data(bool with_source = true,
                                     bool with_labeled_target = true) {
  auto data = std::make_shared<TrainData>();
  if (with_source)
    for (int i = 0; i < 6; ++i)
      data->source.push_back(
          make_sample(Domain::kSource, true, 100 + i, "s" + std::to_string(i), 0));
  for (int i = 0; i < 6; ++i)
    data->target_unlabeled.push_back(
        make_sample(Domain::kTarget, false, 200 + i, "tu" + std::to_string(i), i));
  if (with_labeled_target)
    for (int i = 0; i < 2; ++i)
      data->target_labeled.push_back(
          make_sample(Domain::kTarget, true, 300 + i, "tl" + std::to_string(i), 4));
  if (with_source) data->val_source.push_back(make_eval_volume(Domain::kSource, 41));
  data->val_target.push_back(make_eval_volume(Domain::kTarget, 43));
  return data;
}

}  // namespace

TEST_CASE("config JSON round-trip and env seed override") {
  auto cfg = tiny_config(123);
  cfg.flags.dsbn = false;
  auto parsed = TrainConfig::from_json_string(cfg.to_json_string());
  CHECK(parsed.seed == 123);
  CHECK(parsed.iters_phase1 == 4);
  CHECK(parsed.flags.dsbn == false);
  CHECK(parsed.hash() == cfg.hash());

  setenv("VESSELADAPT_SEED", "555", 1);
  parsed.finalize();
  unsetenv("VESSELADAPT_SEED");
  CHECK(parsed.seed == 555);
}

TEST_CASE("balanced sampling composes batches as 2 source / 1 T_L / 1 T_U") {
  torch::manual_seed(1);
  auto data = tiny_data();
  for (int trial = 0; trial < 20; ++trial) {
    auto batch = sample_batch(*data, /*bds=*/true, 4);
    int src = 0, labeled = 0, unlabeled = 0;
    for (const auto* s : batch.samples) {
      if (s->domain == Domain::kSource)
        ++src;
      else if (s->labeled)
        ++labeled;
      else
        ++unlabeled;
    }
    CHECK(src == 2);
    CHECK(labeled == 1);
    CHECK(unlabeled == 1);
  }
}

TEST_CASE("a single labeled slice appears in every balanced batch") {
  torch::manual_seed(2);
  auto data = tiny_data();
  data->target_labeled.resize(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto batch = sample_batch(*data, true, 4);
    bool found = false;
    for (const auto* s : batch.samples)
      if (s == &data->target_labeled[0]) found = true;
    CHECK(found);
  }
}

TEST_CASE("balanced sampling demands every stratum") {
  torch::manual_seed(3);
  auto no_labeled = tiny_data(true, false);
  CHECK_THROWS_AS(sample_batch(*no_labeled, true, 4), EmptyStratum);
  auto no_source = tiny_data(false, true);
  CHECK_THROWS_AS(sample_batch(*no_source, true, 4), EmptyStratum);
  CHECK_NOTHROW(sample_batch(*no_source, false, 4));
}

TEST_CASE("uniform sampling tracks stratum proportions") {
  torch::manual_seed(4);
  auto data = std::make_shared<TrainData>();
  for (int i = 0; i < 50; ++i)
    data->source.push_back(make_sample(Domain::kSource, true, i, "s", 0));
  for (int i = 0; i < 30; ++i)
    data->target_unlabeled.push_back(
        make_sample(Domain::kTarget, false, 100 + i, "tu", 0));
  for (int i = 0; i < 20; ++i)
    data->target_labeled.push_back(
        make_sample(Domain::kTarget, true, 200 + i, "tl", 0));

  int64_t counts[3] = {0, 0, 0};
  const int64_t draws = 10000;
  for (int64_t i = 0; i < draws / 4; ++i) {
    auto batch = sample_batch(*data, false, 4);
    for (const auto* s : batch.samples) {
      if (s->domain == Domain::kSource)
        ++counts[0];
      else if (s->labeled)
        ++counts[2];
      else
        ++counts[1];
    }
  }
  const double expect[3] = {0.5, 0.3, 0.2};
  for (int k = 0; k < 3; ++k) {
    double sigma = std::sqrt(draws * expect[k] * (1 - expect[k]));
    CHECK(std::fabs(counts[k] - draws * expect[k]) <= 3 * sigma);
  }
}

TEST_CASE("select_checkpoint maximizes mean vessel dice, later ties win") {
  std::vector<CheckpointRecord> records(1);
  records[0].iteration = 10;
  records[0].metrics = {{"val_source_vessel_dice", 0.4},
                        {"val_target_vessel_dice", 0.2}};
  CHECK(select_checkpoint(records).iteration == 10);

  records.push_back({20, "phase2",
                     {{"val_source_vessel_dice", 0.8},
                      {"val_target_vessel_dice", 0.2}},
                     ""});
  records.push_back({30, "phase2",
                     {{"val_source_vessel_dice", 0.6},
                      {"val_target_vessel_dice", 0.5}},
                     ""});
  CHECK(select_checkpoint(records).iteration == 30);  // mean 0.55 > 0.50

  records.push_back({40, "phase2",
                     {{"val_source_vessel_dice", 0.5},
                      {"val_target_vessel_dice", 0.6}},
                     ""});
  CHECK(select_checkpoint(records).iteration == 40);  // equal mean, later

  std::vector<CheckpointRecord> empty;
  CHECK_THROWS_AS(select_checkpoint(empty), NoValidRecords);
  std::vector<CheckpointRecord> nan_only(1);
  nan_only[0].metrics = {{"val_target_vessel_dice",
                          std::numeric_limits<double>::quiet_NaN()}};
  CHECK_THROWS_AS(select_checkpoint(nan_only), NoValidRecords);
}

TEST_CASE("phase 1 trains G and D but never touches E") {
  TempDir dir("train");
  auto data = tiny_data();
  Trainer t(dir.path(), tiny_config(), data);

  auto e_before = parameters_checksum(t.models().encoder_params());
  auto d_before = parameters_checksum(t.models().discriminator_params());
  auto g_before = t.models().generator_core_checksum();

  t.run_phase1();

  CHECK(parameters_checksum(t.models().encoder_params()) == e_before);
  CHECK(parameters_checksum(t.models().discriminator_params()) != d_before);
  CHECK(t.models().generator_core_checksum() != g_before);
  CHECK(t.phase() == TrainPhase::kPretrain);
  CHECK(fs::exists(dir / "checkpoints" / "phase1_final.pt"));
}

TEST_CASE("pretrain reads no target data and leaves the core frozen") {
  TempDir dir("train");
  auto data = tiny_data();
  Trainer t(dir.path(), tiny_config(), data);
  t.run_phase1();

  auto core_before = t.models().generator_core_checksum();
  auto lsb_before = parameters_checksum(t.models().lsb_params());
  auto e_before = parameters_checksum(t.models().encoder_params());
  auto reads_before = data->target_reads;

  t.pretrain_source();

  CHECK(data->target_reads == reads_before);  // only source batches
  CHECK(t.models().generator_core_checksum() == core_before);
  CHECK(parameters_checksum(t.models().lsb_params()) != lsb_before);
  CHECK(parameters_checksum(t.models().encoder_params()) != e_before);
  CHECK(fs::exists(dir / "checkpoints" / "pretrain_final.pt"));
}

TEST_CASE("phase 2 keeps the freeze and never evaluates D") {
  TempDir dir("train");
  auto data = tiny_data();
  Trainer t(dir.path(), tiny_config(), data);
  t.run_phase1();
  t.pretrain_source();

  auto core_before = t.models().generator_core_checksum();
  auto d_before = parameters_checksum(t.models().discriminator_params());
  t.run_phase2();
  CHECK(t.models().generator_core_checksum() == core_before);
  CHECK(parameters_checksum(t.models().discriminator_params()) == d_before);
  CHECK(t.phase() == TrainPhase::kDone);
  CHECK(fs::exists(dir / "checkpoints" / "best.pt"));
  CHECK(fs::exists(dir / "records.json"));
  CHECK(!t.records().empty());
}

TEST_CASE("gradient routing: reconstruction-only steps leave G_lsb alone") {
  TempDir dir("train");
  auto cfg = tiny_config();
  cfg.w_seg = 0.0;  // only L_R active
  auto data = tiny_data();
  Trainer t(dir.path(), cfg, data);
  t.run_phase1();
  t.pretrain_source();  // w_seg = 0 -> lsb grads never defined

  auto lsb_before = parameters_checksum(t.models().lsb_params());
  auto e_before = parameters_checksum(t.models().encoder_params());
  t.phase2_step();
  CHECK(parameters_checksum(t.models().lsb_params()) == lsb_before);
  CHECK(parameters_checksum(t.models().encoder_params()) != e_before);
}

TEST_CASE("unlabeled target batches propagate no segmentation gradient") {
  TempDir dir("train");
  auto cfg = tiny_config();
  cfg.flags.bds = false;
  cfg.iters_pretrain = 0;
  auto data = tiny_data(/*with_source=*/false, /*with_labeled_target=*/false);
  Trainer t(dir.path(), cfg, data);
  t.run_phase1();
  t.pretrain_source();  // skipped: no source

  auto lsb_before = parameters_checksum(t.models().lsb_params());
  for (int i = 0; i < 3; ++i) t.phase2_step();
  CHECK(parameters_checksum(t.models().lsb_params()) == lsb_before);
}

TEST_CASE("cycle consistency propagates through the most recent pass only") {
  torch::manual_seed(5);
  NetConfig net;
  net.image_size = 8;
  net.image_channels = 1;
  net.z_dim = 8;
  net.w_dim = 8;
  net.base_channels = 8;
  net.max_channels = 8;
  auto b = build_models(net, AblationFlags{});
  auto x = torch::randn({1, 1, 8, 8}).clamp(-1, 1);

  auto first = b.translate(x, Domain::kTarget);
  auto detached = first.image.detach().requires_grad_(true);
  auto enc = b.encode(detached, Domain::kSource);
  auto cyc = b.generate(enc.code, &enc.residuals);
  (x - cyc.image).pow(2).mean().backward();

  CHECK(detached.grad().defined());            // the recent pass carries grads
  CHECK(!first.image.requires_grad() == false);  // first pass had a graph...
  CHECK(!first.image.grad().defined());          // ...but received nothing
}

TEST_CASE("training trajectories are deterministic given seed and data") {
  auto run_once = [&](const fs::path& dir) {
    auto data = tiny_data();
    Trainer t(dir, tiny_config(17), data);
    t.run();
    std::ifstream log(dir / "log.jsonl");
    std::string all((std::istreambuf_iterator<char>(log)), {});
    return all;
  };
  TempDir a("det_a"), b("det_b");
  auto log_a = run_once(a.path());
  auto log_b = run_once(b.path());
  CHECK(log_a == log_b);
  CHECK(!log_a.empty());
}

TEST_CASE("interrupted runs resume to the same final state") {
  auto cfg = tiny_config(23);

  TempDir full_dir("full");
  uint64_t full_core, full_e, full_lsb;
  std::string full_log;
  {
    auto data = tiny_data();
    Trainer full(full_dir.path(), cfg, data);
    full.run();
    full_core = full.models().generator_core_checksum();
    full_e = parameters_checksum(full.models().encoder_params());
    full_lsb = parameters_checksum(full.models().lsb_params());
    std::ifstream log(full_dir / "log.jsonl");
    full_log.assign((std::istreambuf_iterator<char>(log)), {});
  }

  TempDir part_dir("part");
  {
    auto data = tiny_data();
    Trainer part(part_dir.path(), cfg, data);
    part.run(/*step_budget=*/5);  // interrupt mid-phase
    CHECK(part.phase() != TrainPhase::kDone);
  }
  {
    auto data = tiny_data();
    auto resumed = Trainer::resume(part_dir.path(), data);
    resumed.run();
    CHECK(resumed.phase() == TrainPhase::kDone);
    CHECK(resumed.models().generator_core_checksum() == full_core);
    CHECK(parameters_checksum(resumed.models().encoder_params()) == full_e);
    CHECK(parameters_checksum(resumed.models().lsb_params()) == full_lsb);
    std::ifstream log(part_dir / "log.jsonl");
    std::string part_log((std::istreambuf_iterator<char>(log)), {});
    CHECK(part_log == full_log);
  }

  SUBCASE("resume of a completed run is a no-op") {
    auto data = tiny_data();
    auto again = Trainer::resume(full_dir.path(), data);
    auto before = again.models().generator_core_checksum();
    again.run();
    CHECK(again.models().generator_core_checksum() == before);
  }
}

TEST_CASE("resume refuses a mismatched config or different data") {
  TempDir dir("mismatch");
  auto cfg = tiny_config(29);
  {
    auto data = tiny_data();
    Trainer t(dir.path(), cfg, data);
    t.run(3);
  }
  // tamper with the stored config
  auto tampered = cfg;
  tampered.lr_encoder *= 2;
  std::ofstream(dir / "config.resolved.json") << tampered.to_json_string();
  auto data = tiny_data();
  CHECK_THROWS_AS(Trainer::resume(dir.path(), data), CorruptCheckpoint);

  // restore the config but hand over different data
  std::ofstream(dir / "config.resolved.json") << cfg.to_json_string();
  auto other = tiny_data();
  other->source.push_back(make_sample(Domain::kSource, true, 777, "sX", 0));
  CHECK_THROWS_AS(Trainer::resume(dir.path(), other), CorruptCheckpoint);
}

TEST_CASE("load_train_data wires slices, labels, and inversion") {
  TempDir dir("load");
  // two source, two target volumes (one with a labeled midpoint slice)
  auto write_subject = [&](Domain d, const std::string& id, uint64_t seed) {
    Volume v;
    v.header.grid_size = {4, 8, 8};
    v.header.spacing_mm = {1, 1, 1};
    v.header.domain_tag = d;
    v.header.subject_id = id;
    v.data = testutil::random_volume(4, 8, 8, seed) * 2 - 1;
    SegMask m;
    m.header = v.header;
    auto gen = at::detail::createCPUGenerator(seed + 5);
    m.labels = torch::randint(0, 3, {4, 8, 8}, gen).to(torch::kUInt8);
    save_subject(dir.path(), v, &m);
    return v;
  };
  write_subject(Domain::kSource, "s0", 1);
  auto s1 = write_subject(Domain::kSource, "s1", 2);
  auto t0 = write_subject(Domain::kTarget, "t0", 3);
  write_subject(Domain::kTarget, "t1", 4);
  write_subject(Domain::kTarget, "t2", 5);

  SplitSpec split;
  split.train_source = {"s0", "s1"};
  split.train_target = {"t0", "t1"};
  split.val_target = {"t2"};
  split.labeled_target = {{"t0", 2}};

  auto cfg = tiny_config();
  cfg.flags.inversion = true;
  auto data = load_train_data(dir.path(), split, cfg);

  CHECK(data.source.size() == 8);  // 2 volumes x 4 slices
  CHECK(data.target_labeled.size() == 1);
  CHECK(data.target_extra.size() == 3);   // unlabeled slices of t0
  CHECK(data.target_unlabeled.size() == 4);  // t1
  CHECK(data.val_target.size() == 1);
  for (const auto& s : data.source) CHECK(s.onehot.has_value());

  // inversion applies to target intensities only
  auto center = data.target_labeled[0].image[0];
  CHECK((center + t0.data[2]).abs().max().item<double>() < 1e-6);
  CHECK(data.phase1_pool_size() == 16);
}
