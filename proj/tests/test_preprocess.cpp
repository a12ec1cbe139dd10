#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include "helpers.hpp"
#include "vesseladapt/errors.hpp"
#include "vesseladapt/preprocess.hpp"

using namespace vesseladapt;

namespace {

Volume volume_from(torch::Tensor data, std::array<double, 3> spacing = {1, 1, 1}) {
  Volume v;
  v.data = data.to(torch::kFloat32);
  v.header.grid_size = {data.size(0), data.size(1), data.size(2)};
  v.header.spacing_mm = spacing;
  v.header.subject_id = "test";
  return v;
}

}  // namespace

TEST_CASE("dataset_spacing takes the per-axis median") {
  std::vector<Volume> vols;
  for (double s : {0.5, 0.6, 0.7})
    vols.push_back(volume_from(torch::zeros({4, 4, 4}), {s, s, s}));
  auto spacing = dataset_spacing(vols, {512, 512, 512});
  CHECK(spacing[0] == doctest::Approx(0.6));
  CHECK(spacing[2] == doctest::Approx(0.6));
}

TEST_CASE("dataset_spacing of a single volume is its own spacing") {
  std::vector<Volume> vols{volume_from(torch::zeros({4, 4, 4}), {1.5, 0.9, 1.1})};
  auto spacing = dataset_spacing(vols, {512, 512, 512});
  CHECK(spacing[0] == doctest::Approx(1.5));
  CHECK(spacing[1] == doctest::Approx(0.9));
  CHECK(spacing[2] == doctest::Approx(1.1));
}

TEST_CASE("dataset_spacing nudges up until volumes fit") {
  // solve extent * (old/new) <= 50 for 100 voxels at 1.0 mm: new >= 2.0 mm
  std::vector<Volume> vols{volume_from(torch::zeros({100, 4, 4})),
                           volume_from(torch::zeros({100, 4, 4}))};
  auto spacing = dataset_spacing(vols, {50, 512, 512});
  CHECK(spacing[0] >= 2.0);
  for (const auto& v : vols) {
    int64_t extent = std::llround(100.0 * v.header.spacing_mm[0] / spacing[0]);
    CHECK(extent <= 50);
  }
  CHECK_THROWS_AS(dataset_spacing({}, {512, 512, 512}), EmptyDataset);
}

TEST_CASE("resample to the same spacing is the identity") {
  auto v = volume_from(testutil::random_volume(6, 7, 8, 11), {1.0, 1.2, 0.8});
  auto r = resample(v, v.header.spacing_mm);
  CHECK(r.header.grid_size == v.header.grid_size);
  CHECK((r.data - v.data).abs().max().item<double>() < 1e-6);
}

TEST_CASE("resampling a constant volume reproduces the constant") {
  auto v = volume_from(torch::full({8, 8, 8}, 0.37f));
  auto r = resample(v, {0.6, 1.7, 0.9});
  CHECK((r.data - 0.37f).abs().max().item<double>() < 1e-6);
}

TEST_CASE("linear ramp downsampled 2x matches the analytic ramp") {
  // f(z,y,x) = 0.02*x - 0.3 along the last axis
  auto x = torch::arange(0, 64, torch::kFloat32) * 0.02f - 0.3f;
  auto data = x.reshape({1, 1, 64}).expand({4, 4, 64}).contiguous();
  auto v = volume_from(data, {1, 1, 1});
  auto r = resample(v, {1, 1, 2});
  CHECK(r.header.grid_size[2] == 32);
  for (int64_t i = 0; i < 32; ++i) {
    double expected = 0.02 * (2.0 * i) - 0.3;
    CHECK(std::fabs(r.data[2][2][i].item<double>() - expected) < 1e-4);
  }
  SUBCASE("degenerate output raises") {
    CHECK_THROWS_AS(resample(v, {1, 1, 1e6}), DegenerateOutput);
  }
}

TEST_CASE("mask resampling keeps labels in range") {
  SegMask m;
  auto gen = at::detail::createCPUGenerator(3);
  m.labels = torch::randint(0, 3, {9, 9, 9}, gen).to(torch::kUInt8);
  m.header.grid_size = {9, 9, 9};
  m.header.spacing_mm = {1, 1, 1};
  auto r = resample_mask(m, {1.5, 0.7, 1.2});
  r.validate();
  CHECK(r.labels.max().item<int64_t>() <= 2);
}

TEST_CASE("normalize maps extremes to exactly [-1, 1]") {
  auto v = volume_from(testutil::random_volume(8, 8, 8, 5) * 40 + 7);
  auto n = normalize(v);
  CHECK(n.data.min().item<float>() == -1.0f);
  CHECK(n.data.max().item<float>() == 1.0f);
  CHECK_THROWS_AS(normalize(volume_from(torch::full({4, 4, 4}, 2.0f))),
                  ConstantVolume);
}

TEST_CASE("normalize clips the 0.1/99.9 percentile outliers") {
  // 998 interior values plus two extreme outliers
  auto base = torch::linspace(0, 1, 998);
  auto data = torch::cat({base, torch::tensor({-1e6f, 1e6f})}).reshape({10, 10, 10});
  NormalizeInfo info;
  auto n = normalize(volume_from(data), &info);
  auto flat = n.data.flatten();
  CHECK(flat[998].item<float>() == -1.0f);  // low outlier clipped to the min
  CHECK(flat[999].item<float>() == 1.0f);
  // interior ordering preserved
  auto interior = flat.slice(0, 0, 998);
  auto diffs = interior.slice(0, 1, 998) - interior.slice(0, 0, 997);
  CHECK(diffs.min().item<float>() >= 0.0f);
  CHECK(info.clip_hi < 10.0);  // cut well below the outlier's z-score
}

TEST_CASE("normalize is invariant to positive affine rescaling") {
  auto v = volume_from(testutil::random_volume(8, 8, 8, 9));
  auto scaled = volume_from(v.data * 3.7f - 2.0f);
  auto a = normalize(v);
  auto b = normalize(scaled);
  CHECK((a.data - b.data).abs().max().item<double>() < 1e-5);
}

TEST_CASE("one_hot basics and inverse property") {
  auto labels = torch::tensor({{0, 1}, {2, 1}}, torch::kUInt8);
  auto oh = vesseladapt::one_hot(labels);
  CHECK(oh.sizes() == torch::IntArrayRef({3, 2, 2}));
  CHECK(oh[1][0][1].item<float>() == 1.0f);  // label 1 -> (0,1,0)
  CHECK(oh[2][1][0].item<float>() == 1.0f);  // label 2 -> (0,0,1)
  CHECK((oh.sum(0) - 1.0f).abs().max().item<float>() == 0.0f);

  auto gen = at::detail::createCPUGenerator(17);
  auto random = torch::randint(0, 3, {5, 6, 7}, gen);
  auto round_trip = vesseladapt::one_hot(random).argmax(0);
  CHECK(round_trip.equal(random.to(torch::kInt64)));
  // idempotence through the round trip
  CHECK(vesseladapt::one_hot(round_trip).equal(vesseladapt::one_hot(random)));

  CHECK_THROWS_AS(vesseladapt::one_hot(torch::tensor({3})), IllegalLabel);
}

TEST_CASE("invert_intensity is an involution") {
  auto v = volume_from(testutil::random_volume(4, 4, 4, 21) * 2 - 1);
  auto twice = invert_intensity(invert_intensity(v));
  CHECK(twice.data.equal(v.data));
  auto lo = volume_from(torch::full({2, 2, 2}, -1.0f));
  CHECK(invert_intensity(lo).data.max().item<float>() == 1.0f);
}

TEST_CASE("extract_slices: counts, neighbors, clamping") {
  auto data = torch::zeros({10, 4, 4});
  for (int64_t k = 0; k < 10; ++k) data[k] = static_cast<float>(k) / 10.0f;
  auto v = volume_from(data);

  auto singles = extract_slices(v, nullptr, 1);
  CHECK(singles.size() == 10);
  CHECK(singles[3].image.sizes() == torch::IntArrayRef({1, 4, 4}));

  auto triples = extract_slices(v, nullptr, 3);
  CHECK(triples.size() == 10);
  // interior slice k has neighbors (k-1, k, k+1)
  CHECK(triples[5].image[0][0][0].item<float>() == doctest::Approx(0.4f));
  CHECK(triples[5].image[1][0][0].item<float>() == doctest::Approx(0.5f));
  CHECK(triples[5].image[2][0][0].item<float>() == doctest::Approx(0.6f));
  // edges replicate the boundary slice
  CHECK(triples[0].image[0][0][0].item<float>() == doctest::Approx(0.0f));
  CHECK(triples[0].image[1][0][0].item<float>() == doctest::Approx(0.0f));
  CHECK(triples[9].image[2][0][0].item<float>() == doctest::Approx(0.9f));

  CHECK_THROWS_AS(extract_slices(v, nullptr, 11), ChannelCountTooLarge);
  CHECK_THROWS_AS(extract_slices(v, nullptr, 2), ChannelCountTooLarge);
}

TEST_CASE("extract_slices attaches masks only at labeled indices") {
  auto v = volume_from(torch::zeros({8, 4, 4}));
  SegMask m;
  m.header = v.header;
  m.labels = torch::ones({8, 4, 4}, torch::kUInt8);

  SUBCASE("fully annotated volume: every slice labeled") {
    auto samples = extract_slices(v, &m, 3);
    for (const auto& s : samples) {
      CHECK(s.labeled);
      CHECK(s.onehot.has_value());
    }
  }
  SUBCASE("midpoint-only labeling") {
    std::vector<int64_t> labeled = {midpoint_slice(8)};
    CHECK(labeled[0] == 4);
    auto samples = extract_slices(v, &m, 3, &labeled);
    int count = 0;
    for (const auto& s : samples) count += s.labeled ? 1 : 0;
    CHECK(count == 1);
    CHECK(samples[4].labeled);
    CHECK(samples[4].onehot->sizes() == torch::IntArrayRef({3, 4, 4}));
  }
}
