#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <fstream>

#include "helpers.hpp"
#include "vesseladapt/infer_eval.hpp"
#include "vesseladapt/plot.hpp"

using namespace vesseladapt;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.image_size = 8;
  cfg.image_channels = 3;
  cfg.z_dim = 8;
  cfg.w_dim = 8;
  cfg.base_channels = 8;
  cfg.max_channels = 8;
  return cfg;
}

Volume tiny_volume(Domain d, uint64_t seed, int64_t depth = 6) {
  Volume v;
  v.header.grid_size = {depth, 8, 8};
  v.header.spacing_mm = {1, 1, 1};
  v.header.domain_tag = d;
  v.header.subject_id = d == Domain::kSource ? "s0" : "t0";
  v.data = testutil::random_volume(depth, 8, 8, seed) * 2 - 1;
  return v;
}

}  // namespace

TEST_CASE("argmax_lowest resolves ties toward the lowest class") {
  auto probs = torch::tensor({{0.4f, 0.4f, 0.2f}}).unsqueeze(-1);  // [1,3,1]
  CHECK(argmax_lowest(probs, 1).item<int64_t>() == 0);
  auto tie12 = torch::tensor({{0.2f, 0.4f, 0.4f}}).unsqueeze(-1);
  CHECK(argmax_lowest(tie12, 1).item<int64_t>() == 1);
}

TEST_CASE("averaging before argmax differs from per-head argmax voting") {
  // both heads are confident about different classes; the average picks a
  // third one, which voting could never produce
  auto recon = torch::tensor({0.50f, 0.45f, 0.05f});
  auto trans = torch::tensor({0.05f, 0.45f, 0.50f});
  auto avg = 0.5 * (recon + trans);
  CHECK(argmax_lowest(recon.reshape({1, 3, 1}), 1).item<int64_t>() == 0);
  CHECK(argmax_lowest(trans.reshape({1, 3, 1}), 1).item<int64_t>() == 2);
  CHECK(argmax_lowest(avg.reshape({1, 3, 1}), 1).item<int64_t>() == 1);
}

TEST_CASE("predict: target volumes use both heads, source only one") {
  torch::manual_seed(3);
  auto bundle = build_models(tiny_config(), AblationFlags{});

  auto target = tiny_volume(Domain::kTarget, 1);
  auto pred = predict(bundle, target, 3);
  CHECK(pred.mask.labels.sizes() == target.data.sizes());
  CHECK(pred.slices.size() == 6);
  for (const auto& sp : pred.slices) {
    REQUIRE(sp.prob_recon.defined());
    REQUIRE(sp.prob_trans.defined());
    auto sums = sp.prob_recon.sum(0);
    CHECK((sums - 1.0).abs().max().item<double>() < 1e-5);
    auto avg = 0.5 * (sp.prob_recon + sp.prob_trans);
    CHECK(sp.hard.equal(argmax_lowest(avg.unsqueeze(0), 1).squeeze(0)));
  }

  // the translation capability is not used for source inputs
  auto source = tiny_volume(Domain::kSource, 2);
  auto spred = predict(bundle, source, 3);
  for (const auto& sp : spred.slices) {
    CHECK(sp.prob_recon.defined());
    CHECK(!sp.prob_trans.defined());
  }

  SUBCASE("prediction is deterministic") {
    auto again = predict(bundle, target, 3);
    CHECK(again.mask.labels.equal(pred.mask.labels));
  }
}

TEST_CASE("evaluate_volume: perfect prediction scores perfectly") {
  SegMask ref;
  ref.header.grid_size = {6, 8, 8};
  ref.header.spacing_mm = {1, 1, 1};
  ref.header.subject_id = "t0";
  auto gen = at::detail::createCPUGenerator(5);
  ref.labels = torch::randint(0, 3, {6, 8, 8}, gen).to(torch::kUInt8);

  auto vm = evaluate_volume(ref, ref);
  CHECK(vm.values.at("dice_brain") == 1.0);
  CHECK(vm.values.at("dice_vessel") == 1.0);
  CHECK(vm.values.at("precision_vessel") == 1.0);
  CHECK(vm.values.at("recall_vessel") == 1.0);
  CHECK(vm.values.at("cldice_vessel") == 1.0);
  CHECK(vm.values.at("assd_vessel_mm") == 0.0);
  CHECK(vm.assd_valid);

  SUBCASE("empty vessel prediction reports assd as missing") {
    SegMask empty = ref;
    empty.labels = (ref.labels == kLabelVessel)
                       .to(torch::kUInt8);  // vessels become brain... none
    empty.labels.zero_();
    auto vm2 = evaluate_volume(empty, ref);
    CHECK(!vm2.assd_valid);
    CHECK(vm2.values.at("dice_vessel") == 0.0);
  }
}

TEST_CASE("report aggregation uses the population std") {
  MetricsReport report;
  VolumeMetrics a, b;
  a.subject = "t0";
  a.values["dice_vessel"] = 0.6;
  b.subject = "t1";
  b.values["dice_vessel"] = 0.8;
  report.volumes = {a, b};
  report.finalize();
  CHECK(report.mean.at("dice_vessel") == doctest::Approx(0.7));
  CHECK(report.stddev.at("dice_vessel") == doctest::Approx(0.1));

  SUBCASE("single volume has zero std") {
    report.volumes = {a};
    report.finalize();
    CHECK(report.stddev.at("dice_vessel") == 0.0);
  }

  SUBCASE("csv has one row per volume plus one aggregate row") {
    auto csv = report.to_csv();
    int64_t rows = std::count(csv.begin(), csv.end(), '\n');
    CHECK(rows == 2 + 1 + 1);  // header + volumes + aggregate
  }
}

TEST_CASE("sweep table emission is deterministic") {
  testutil::TempDir dir("sweep");
  SweepTable table;
  table.sweep_name = "m";
  table.point_labels = {"0", "1", "3"};
  table.point_x = {0, 1, 3};
  table.values["target_dice_vessel"] = {{0.2, 0.25}, {0.5, 0.55}, {0.6, 0.64}};

  emit_report(table, dir / "a");
  emit_report(table, dir / "b");
  for (const char* name : {"sweep.csv", "plots/sweep_target_dice_vessel.png"}) {
    std::ifstream fa(dir / "a" / name, std::ios::binary);
    std::ifstream fb(dir / "b" / name, std::ios::binary);
    REQUIRE(fa.good());
    std::string ba((std::istreambuf_iterator<char>(fa)), {});
    std::string bb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(ba == bb);
    CHECK(!ba.empty());
  }
}

TEST_CASE("line plots render valid PNG headers") {
  testutil::TempDir dir("plot");
  plot::Series s;
  s.label = "dice";
  s.x = {0, 1, 3, 96};
  s.y = {0.1, 0.45, 0.62, 0.7};
  s.yerr = {0.02, 0.04, 0.03, 0.02};
  plot::write_line_plot(dir / "p.png", "vessel dice vs m", "m", "dice", {s});
  std::ifstream in(dir / "p.png", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(bytes.size() > 100);
  CHECK(bytes.substr(1, 3) == "PNG");
  CHECK(bytes.find("IHDR") != std::string::npos);
  CHECK(bytes.find("IEND") != std::string::npos);
}
