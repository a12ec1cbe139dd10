#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <cstring>
#include <fstream>

#include "helpers.hpp"
#include "vesseladapt/errors.hpp"
#include "vesseladapt/volume_io.hpp"

using namespace vesseladapt;
using testutil::TempDir;

namespace {

Volume make_volume(int64_t d, int64_t h, int64_t w, uint64_t seed,
                   Domain domain = Domain::kSource,
                   const std::string& subject = "sub0") {
  Volume v;
  v.header.grid_size = {d, h, w};
  v.header.spacing_mm = {1.0, 0.8, 0.8};
  v.header.domain_tag = domain;
  v.header.subject_id = subject;
  v.data = testutil::random_volume(d, h, w, seed) * 2 - 1;
  return v;
}

SegMask make_mask(const Volume& v, uint64_t seed) {
  SegMask m;
  m.header = v.header;
  auto gen = at::detail::createCPUGenerator(seed);
  m.labels = torch::randint(0, 3, v.data.sizes(), gen).to(torch::kUInt8);
  return m;
}

}  // namespace

TEST_CASE("volume round-trip is bit identical") {
  TempDir dir("volio");
  auto v = make_volume(8, 8, 8, 1);
  save_volume(v, dir / "image.vol");
  auto loaded = load_volume(dir / "image.vol");
  CHECK(tensor_checksum(loaded.data) == tensor_checksum(v.data));
  CHECK(loaded.header.grid_size == v.header.grid_size);
  CHECK(loaded.header.spacing_mm == v.header.spacing_mm);
  CHECK(loaded.header.domain_tag == v.header.domain_tag);
  CHECK(loaded.header.subject_id == v.header.subject_id);

  // second save of the loaded volume produces identical bytes
  save_volume(loaded, dir / "again.vol");
  std::ifstream a(dir / "image.vol", std::ios::binary);
  std::ifstream b(dir / "again.vol", std::ios::binary);
  std::string abytes((std::istreambuf_iterator<char>(a)), {});
  std::string bbytes((std::istreambuf_iterator<char>(b)), {});
  CHECK(abytes == bbytes);
}

TEST_CASE("truncated payload raises ShapeMismatch") {
  TempDir dir("volio");
  auto v = make_volume(8, 8, 8, 2);
  save_volume(v, dir / "image.vol");
  // rewrite payload with one missing slice: 7x8x8 voxels
  auto short_data = v.data.slice(0, 0, 7).contiguous();
  std::ofstream out(dir / "image.vol", std::ios::binary | std::ios::trunc);
  out.write(static_cast<const char*>(short_data.data_ptr()),
            short_data.numel() * 4);
  out.close();
  CHECK_THROWS_AS(load_volume(dir / "image.vol"), ShapeMismatch);
}

TEST_CASE("missing file and corrupt header are distinct errors") {
  TempDir dir("volio");
  CHECK_THROWS_AS(load_volume(dir / "nope.vol"), MissingFile);

  auto v = make_volume(4, 4, 4, 3);
  save_volume(v, dir / "image.vol");
  std::ofstream(dir / "image.json") << "{ not json";
  CHECK_THROWS_AS(load_volume(dir / "image.vol"), CorruptHeader);

  save_volume(v, dir / "bad.vol");
  std::ofstream(dir / "bad.json")
      << R"({"grid":[4,4,4],"spacing_mm":[0,1,1],"domain":"source","dtype":"float32"})";
  CHECK_THROWS_AS(load_volume(dir / "bad.vol"), CorruptHeader);
}

TEST_CASE("mask round-trip and label policing") {
  TempDir dir("volio");
  auto v = make_volume(6, 5, 4, 4, Domain::kTarget, "t0");
  auto m = make_mask(v, 5);
  save_mask(m, dir / "mask.vol");
  auto loaded = load_mask(dir / "mask.vol");
  for (int64_t label = 0; label <= 2; ++label)
    CHECK(loaded.count(label) == m.count(label));

  SUBCASE("all zeros is a valid mask with zero vessels") {
    SegMask zeros;
    zeros.header = v.header;
    zeros.labels = torch::zeros(v.data.sizes(), torch::kUInt8);
    save_mask(zeros, dir / "zeros.vol");
    auto z = load_mask(dir / "zeros.vol");
    CHECK(z.count(kLabelVessel) == 0);
  }

  SUBCASE("label 3 raises IllegalLabel") {
    auto bad = m;
    bad.labels = m.labels.clone();
    bad.labels.index_put_({0, 0, 0}, 3);
    CHECK_THROWS_AS(save_mask(bad, dir / "bad.vol"), IllegalLabel);
    // and the loader catches it too when bytes are patched on disk
    std::ofstream out(dir / "mask.vol",
                      std::ios::binary | std::ios::in | std::ios::out);
    char three = 3;
    out.write(&three, 1);
    out.close();
    CHECK_THROWS_AS(load_mask(dir / "mask.vol"), IllegalLabel);
  }
}

TEST_CASE("minimal NIfTI-1 volumes load") {
  TempDir dir("volio");
  // hand-build a 348-byte header + float payload, 3x2x2 grid
  std::vector<char> hdr(348, 0);
  int32_t sizeof_hdr = 348;
  std::memcpy(hdr.data(), &sizeof_hdr, 4);
  int16_t dim[8] = {3, 2, 2, 3, 1, 1, 1, 1};  // x=2 y=2 z=3
  std::memcpy(hdr.data() + 40, dim, sizeof(dim));
  int16_t datatype = 16, bitpix = 32;
  std::memcpy(hdr.data() + 70, &datatype, 2);
  std::memcpy(hdr.data() + 72, &bitpix, 2);
  float pixdim[8] = {1, 0.5f, 0.75f, 2.0f, 0, 0, 0, 0};
  std::memcpy(hdr.data() + 76, pixdim, sizeof(pixdim));
  float vox_offset = 352;
  std::memcpy(hdr.data() + 108, &vox_offset, 4);
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  std::ofstream out(dir / "image.nii", std::ios::binary);
  out.write(hdr.data(), 348);
  const char pad[4] = {0, 0, 0, 0};
  out.write(pad, 4);
  std::vector<float> voxels(12);
  for (size_t i = 0; i < voxels.size(); ++i) voxels[i] = static_cast<float>(i);
  out.write(reinterpret_cast<const char*>(voxels.data()), 12 * 4);
  out.close();

  auto v = load_volume(dir / "image.nii");
  CHECK((v.header.grid_size == std::array<int64_t, 3>{3, 2, 2}));
  CHECK(v.header.spacing_mm[0] == doctest::Approx(2.0));
  CHECK(v.header.spacing_mm[2] == doctest::Approx(0.5));
  CHECK(v.data[0][0][1].item<float>() == doctest::Approx(1.0f));
  CHECK(v.data[2][1][1].item<float>() == doctest::Approx(11.0f));
}

namespace {

// small on-disk corpus: n_src source subjects, n_tgt target subjects
void write_corpus(const fs::path& root, int64_t n_src, int64_t n_tgt) {
  for (int64_t i = 0; i < n_src; ++i) {
    auto v = make_volume(4, 6, 6, 100 + i, Domain::kSource,
                         "s" + std::to_string(i));
    auto m = make_mask(v, 200 + i);
    save_subject(root, v, &m);
  }
  for (int64_t i = 0; i < n_tgt; ++i) {
    auto v = make_volume(4, 6, 6, 300 + i, Domain::kTarget,
                         "t" + std::to_string(i));
    auto m = make_mask(v, 400 + i);
    save_subject(root, v, &m);
  }
}

}  // namespace

TEST_CASE("build_index computes N, M, m") {
  TempDir dir("index");
  write_corpus(dir.path(), 4, 5);

  SplitSpec spec;
  spec.train_source = {"s0", "s1", "s2"};
  spec.val_source = {"s3"};
  spec.train_target = {"t0", "t1", "t2", "t3"};
  spec.val_target = {"t4"};
  spec.labeled_target = {{"t0", 2}, {"t1", 2}, {"t2", 2}};

  auto index = build_index(dir.path(), spec);
  CHECK(index.n_source == 3);
  CHECK(index.m_unlabeled == 1);  // t3
  CHECK(index.m_labeled == 3);
  CHECK(index.train.size() == 7);
  CHECK(index.val.size() == 2);

  SUBCASE("empty target split is a valid index") {
    SplitSpec no_target = spec;
    no_target.train_target.clear();
    no_target.labeled_target.clear();
    auto idx = build_index(dir.path(), no_target);
    CHECK(idx.m_unlabeled == 0);
    CHECK(idx.m_labeled == 0);
  }

  SUBCASE("subject in two splits raises OverlappingSplits") {
    SplitSpec overlap = spec;
    overlap.test_target = {"t0"};
    CHECK_THROWS_AS(build_index(dir.path(), overlap), OverlappingSplits);
  }

  SUBCASE("labeled target without mask raises MissingAnnotation") {
    fs::remove(dir.path() / "target" / "t0" / "mask.vol");
    fs::remove(dir.path() / "target" / "t0" / "mask.json");
    CHECK_THROWS_AS(build_index(dir.path(), spec), MissingAnnotation);
  }

  SUBCASE("source without mask raises MissingAnnotation") {
    fs::remove(dir.path() / "source" / "s1" / "mask.vol");
    CHECK_THROWS_AS(build_index(dir.path(), spec), MissingAnnotation);
  }
}

TEST_CASE("index partition: splits are disjoint and cover the inputs") {
  TempDir dir("index");
  write_corpus(dir.path(), 5, 4);
  SplitSpec spec;
  spec.train_source = {"s0", "s1"};
  spec.val_source = {"s2"};
  spec.test_source = {"s3", "s4"};
  spec.train_target = {"t0", "t1"};
  spec.val_target = {"t2"};
  spec.test_target = {"t3"};

  auto index = build_index(dir.path(), spec);
  std::set<std::string> seen;
  int64_t total = 0;
  for (const auto* split : {&index.train, &index.val, &index.test})
    for (const auto& e : *split) {
      CHECK(seen.insert(std::string(to_string(e.domain)) + "/" + e.subject_id)
                .second);
      ++total;
    }
  CHECK(total == 9);
}

TEST_CASE("split spec JSON round-trip") {
  SplitSpec spec;
  spec.train_source = {"s0"};
  spec.train_target = {"t0", "t1"};
  spec.val_target = {"t2"};
  spec.labeled_target = {{"t0", 16}};
  auto text = spec.to_json_string();
  auto parsed = SplitSpec::from_json_string(text);
  CHECK(parsed.train_source == spec.train_source);
  CHECK(parsed.train_target == spec.train_target);
  CHECK(parsed.val_target == spec.val_target);
  CHECK(parsed.labeled_target == spec.labeled_target);
}
