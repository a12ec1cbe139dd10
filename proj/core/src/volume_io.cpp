#include "vesseladapt/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "vesseladapt/errors.hpp"

namespace vesseladapt {

using nlohmann::json;

void VolumeHeader::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (grid_size[i] < 1)
      throw CorruptHeader("grid dimension " + std::to_string(i) +
                          " must be >= 1");
    if (!(spacing_mm[i] > 0.0))
      throw CorruptHeader("spacing along axis " + std::to_string(i) +
                          " must be > 0");
  }
}

void Volume::validate() const {
  header.validate();
  if (data.dim() != 3 || data.size(0) != header.grid_size[0] ||
      data.size(1) != header.grid_size[1] || data.size(2) != header.grid_size[2])
    throw ShapeMismatch("volume payload shape does not match header grid");
  if (!all_finite(data)) throw CorruptHeader("volume contains non-finite values");
}

void SegMask::validate() const {
  header.validate();
  if (labels.dim() != 3 || labels.size(0) != header.grid_size[0] ||
      labels.size(1) != header.grid_size[1] ||
      labels.size(2) != header.grid_size[2])
    throw ShapeMismatch("mask payload shape does not match header grid");
  auto mx = labels.max().item<int64_t>();
  if (mx > kLabelVessel)
    throw IllegalLabel("mask contains label " + std::to_string(mx) +
                       " outside {0,1,2}");
}

int64_t SegMask::count(int64_t label) const {
  return (labels == label).sum().item<int64_t>();
}

namespace {

fs::path sidecar_path(const fs::path& payload) {
  fs::path p = payload;
  p.replace_extension(".json");
  return p;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CorruptHeader("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

VolumeHeader header_from_json(const json& j, const fs::path& where) {
  VolumeHeader h;
  try {
    auto grid = j.at("grid");
    auto sp = j.at("spacing_mm");
    for (int i = 0; i < 3; ++i) {
      h.grid_size[i] = grid.at(i).get<int64_t>();
      h.spacing_mm[i] = sp.at(i).get<double>();
    }
    h.domain_tag = domain_from_string(j.at("domain").get<std::string>());
    h.subject_id = j.value("subject", "");
  } catch (const json::exception& e) {
    throw CorruptHeader("bad header " + where.string() + ": " + e.what());
  }
  h.validate();
  return h;
}

json header_to_json(const VolumeHeader& h, const std::string& dtype) {
  json j;
  j["grid"] = {h.grid_size[0], h.grid_size[1], h.grid_size[2]};
  j["spacing_mm"] = {h.spacing_mm[0], h.spacing_mm[1], h.spacing_mm[2]};
  j["domain"] = to_string(h.domain_tag);
  j["subject"] = h.subject_id;
  j["dtype"] = dtype;
  return j;
}

std::vector<char> read_payload(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  auto n = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> buf(n);
  in.read(buf.data(), static_cast<std::streamsize>(n));
  if (!in) throw CorruptHeader("short read on " + path.string());
  return buf;
}

void write_file(const fs::path& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error("short write on " + path.string());
}

bool is_nifti(const fs::path& path) {
  auto s = path.string();
  return s.ends_with(".nii") || s.ends_with(".nii.gz");
}

// Minimal NIfTI-1 reader: single-file .nii / .nii.gz, 3D, common datatypes.
#pragma pack(push, 1)
struct NiftiHeader {
  int32_t sizeof_hdr;
  char unused_a[36];
  int16_t dim[8];
  char unused_b[14];
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  char unused_c[224];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348);

std::vector<char> read_maybe_gz(const fs::path& path) {
  if (path.string().ends_with(".gz")) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw MissingFile("cannot open " + path.string());
    std::vector<char> out;
    char chunk[1 << 16];
    int got = 0;
    while ((got = gzread(f, chunk, sizeof(chunk))) > 0)
      out.insert(out.end(), chunk, chunk + got);
    gzclose(f);
    return out;
  }
  return read_payload(path);
}

Volume load_nifti(const fs::path& path) {
  auto bytes = read_maybe_gz(path);
  if (bytes.size() < sizeof(NiftiHeader))
    throw CorruptHeader("NIfTI file too small: " + path.string());
  NiftiHeader hdr;
  std::memcpy(&hdr, bytes.data(), sizeof(hdr));
  if (hdr.sizeof_hdr != 348 ||
      (std::strncmp(hdr.magic, "n+1", 3) != 0 &&
       std::strncmp(hdr.magic, "ni1", 3) != 0))
    throw CorruptHeader("not a NIfTI-1 file: " + path.string());
  if (hdr.dim[0] < 3) throw CorruptHeader("NIfTI volume is not 3D");
  for (int i = 4; i <= hdr.dim[0]; ++i)
    if (hdr.dim[i] > 1) throw CorruptHeader("NIfTI volume has >3 dimensions");

  int64_t nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  int64_t n = nx * ny * nz;
  size_t offset = static_cast<size_t>(hdr.vox_offset);
  auto need = [&](size_t elem) {
    if (bytes.size() < offset + static_cast<size_t>(n) * elem)
      throw ShapeMismatch("NIfTI payload shorter than header grid");
  };

  // NIfTI stores x fastest; [nz, ny, nx] C-order has the same layout.
  torch::Tensor data;
  const char* p = bytes.data() + offset;
  switch (hdr.datatype) {
    case 2: {  // uint8
      need(1);
      data = torch::from_blob(const_cast<char*>(p), {nz, ny, nx}, torch::kUInt8)
                 .to(torch::kFloat32);
      break;
    }
    case 4: {  // int16
      need(2);
      data = torch::from_blob(const_cast<char*>(p), {nz, ny, nx}, torch::kInt16)
                 .to(torch::kFloat32);
      break;
    }
    case 8: {  // int32
      need(4);
      data = torch::from_blob(const_cast<char*>(p), {nz, ny, nx}, torch::kInt32)
                 .to(torch::kFloat32);
      break;
    }
    case 16: {  // float32
      need(4);
      data = torch::from_blob(const_cast<char*>(p), {nz, ny, nx}, torch::kFloat32)
                 .clone();
      break;
    }
    case 64: {  // float64
      need(8);
      data = torch::from_blob(const_cast<char*>(p), {nz, ny, nx}, torch::kFloat64)
                 .to(torch::kFloat32);
      break;
    }
    default:
      throw CorruptHeader("unsupported NIfTI datatype " +
                          std::to_string(hdr.datatype));
  }
  if (hdr.scl_slope != 0.0f && (hdr.scl_slope != 1.0f || hdr.scl_inter != 0.0f))
    data = data * hdr.scl_slope + hdr.scl_inter;

  Volume v;
  v.header.grid_size = {nz, ny, nx};
  v.header.spacing_mm = {hdr.pixdim[3], hdr.pixdim[2], hdr.pixdim[1]};
  for (auto& s : v.header.spacing_mm)
    if (!(s > 0.0)) s = 1.0;
  v.header.subject_id = path.stem().string();
  auto parent = path.parent_path();
  v.header.domain_tag = Domain::kSource;
  if (!parent.empty()) {
    auto dn = parent.parent_path().filename().string();
    if (dn == "target") v.header.domain_tag = Domain::kTarget;
    v.header.subject_id = parent.filename().string();
  }
  v.data = data.contiguous();
  v.validate();
  return v;
}

}  // namespace

Volume load_volume(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFile("no such file: " + path.string());
  if (is_nifti(path)) return load_nifti(path);

  auto j = read_json_file(sidecar_path(path));
  Volume v;
  v.header = header_from_json(j, sidecar_path(path));
  std::string dtype = j.value("dtype", "float32");
  if (dtype != "float32")
    throw CorruptHeader("volume dtype must be float32, got " + dtype);
  auto buf = read_payload(path);
  if (buf.size() != static_cast<size_t>(v.header.voxel_count()) * 4)
    throw ShapeMismatch("payload of " + path.string() + " holds " +
                        std::to_string(buf.size() / 4) + " voxels, header says " +
                        std::to_string(v.header.voxel_count()));
  v.data = torch::from_blob(buf.data(),
                            {v.header.grid_size[0], v.header.grid_size[1],
                             v.header.grid_size[2]},
                            torch::kFloat32)
               .clone();
  v.validate();
  return v;
}

SegMask load_mask(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFile("no such file: " + path.string());
  auto j = read_json_file(sidecar_path(path));
  SegMask m;
  m.header = header_from_json(j, sidecar_path(path));
  std::string dtype = j.value("dtype", "uint8");
  if (dtype != "uint8")
    throw CorruptHeader("mask dtype must be uint8, got " + dtype);
  auto buf = read_payload(path);
  if (buf.size() != static_cast<size_t>(m.header.voxel_count()))
    throw ShapeMismatch("payload of " + path.string() + " holds " +
                        std::to_string(buf.size()) + " voxels, header says " +
                        std::to_string(m.header.voxel_count()));
  m.labels = torch::from_blob(buf.data(),
                              {m.header.grid_size[0], m.header.grid_size[1],
                               m.header.grid_size[2]},
                              torch::kUInt8)
                 .clone();
  m.validate();
  return m;
}

void save_volume(const Volume& v, const fs::path& path) {
  v.validate();
  fs::create_directories(path.parent_path());
  auto data = v.data.to(torch::kFloat32).contiguous();
  write_file(path, data.data_ptr(), data.numel() * 4);
  auto j = header_to_json(v.header, "float32");
  std::ofstream out(sidecar_path(path));
  out << j.dump(2) << "\n";
}

void save_mask(const SegMask& m, const fs::path& path) {
  m.validate();
  fs::create_directories(path.parent_path());
  auto labels = m.labels.to(torch::kUInt8).contiguous();
  write_file(path, labels.data_ptr(), labels.numel());
  auto j = header_to_json(m.header, "uint8");
  std::ofstream out(sidecar_path(path));
  out << j.dump(2) << "\n";
}

fs::path subject_dir(const fs::path& root, Domain d, const std::string& subject) {
  return root / to_string(d) / subject;
}

void save_subject(const fs::path& root, const Volume& v, const SegMask* mask) {
  auto dir = subject_dir(root, v.header.domain_tag, v.header.subject_id);
  save_volume(v, dir / "image.vol");
  if (mask) save_mask(*mask, dir / "mask.vol");
}

SplitSpec SplitSpec::from_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open split spec " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json_string(text);
}

SplitSpec SplitSpec::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptHeader(std::string("bad split spec JSON: ") + e.what());
  }
  SplitSpec s;
  auto fill = [&](const char* split, std::vector<std::string>& src,
                  std::vector<std::string>& tgt) {
    if (!j.contains(split)) return;
    src = j[split].value("source", std::vector<std::string>{});
    tgt = j[split].value("target", std::vector<std::string>{});
  };
  fill("train", s.train_source, s.train_target);
  fill("val", s.val_source, s.val_target);
  fill("test", s.test_source, s.test_target);
  for (const auto& pair : j.value("labeled_target", json::array()))
    s.labeled_target.emplace_back(pair.at(0).get<std::string>(),
                                  pair.at(1).get<int64_t>());
  return s;
}

std::string SplitSpec::to_json_string() const {
  json j;
  j["train"] = {{"source", train_source}, {"target", train_target}};
  j["val"] = {{"source", val_source}, {"target", val_target}};
  j["test"] = {{"source", test_source}, {"target", test_target}};
  auto pairs = json::array();
  for (const auto& [subject, slice] : labeled_target)
    pairs.push_back({subject, slice});
  j["labeled_target"] = pairs;
  return j.dump(2);
}

namespace {

void check_disjoint(const std::vector<const std::vector<std::string>*>& lists,
                    const char* what) {
  std::set<std::string> seen;
  for (const auto* list : lists)
    for (const auto& id : *list)
      if (!seen.insert(id).second)
        throw OverlappingSplits("subject '" + id + "' appears in two " +
                                std::string(what) + " splits");
}

IndexEntry make_entry(const fs::path& root, Domain d, const std::string& subject,
                      bool require_mask) {
  auto dir = subject_dir(root, d, subject);
  IndexEntry e;
  e.subject_id = subject;
  e.domain = d;
  e.volume_path = dir / "image.vol";
  if (!fs::exists(e.volume_path)) {
    // accept NIfTI drop-ins
    for (const char* alt : {"image.nii", "image.nii.gz"}) {
      if (fs::exists(dir / alt)) {
        e.volume_path = dir / alt;
        break;
      }
    }
  }
  if (!fs::exists(e.volume_path))
    throw MissingFile("no volume for subject '" + subject + "' under " +
                      dir.string());
  auto mask = dir / "mask.vol";
  if (fs::exists(mask)) e.mask_path = mask;
  if (require_mask && !e.mask_path)
    throw MissingAnnotation("subject '" + subject + "' needs a mask at " +
                            mask.string());
  return e;
}

}  // namespace

DatasetIndex build_index(const fs::path& root, const SplitSpec& spec) {
  check_disjoint({&spec.train_source, &spec.val_source, &spec.test_source},
                 "source");
  check_disjoint({&spec.train_target, &spec.val_target, &spec.test_target},
                 "target");

  std::unordered_map<std::string, std::vector<int64_t>> labeled_slices;
  for (const auto& [subject, slice] : spec.labeled_target) {
    if (std::find(spec.train_target.begin(), spec.train_target.end(), subject) ==
        spec.train_target.end())
      throw MissingAnnotation("labeled target subject '" + subject +
                              "' is not in the train target split");
    labeled_slices[subject].push_back(slice);
  }

  DatasetIndex index;
  auto add_split = [&](const std::vector<std::string>& src,
                       const std::vector<std::string>& tgt,
                       std::vector<IndexEntry>& out, bool is_train) {
    for (const auto& subject : src) {
      // S is fully annotated
      auto e = make_entry(root, Domain::kSource, subject, /*require_mask=*/true);
      e.labeled = true;
      out.push_back(std::move(e));
    }
    for (const auto& subject : tgt) {
      bool has_labels = is_train && labeled_slices.count(subject) > 0;
      auto e = make_entry(root, Domain::kTarget, subject,
                          /*require_mask=*/has_labels);
      e.labeled = has_labels;
      if (has_labels) {
        e.labeled_slices = labeled_slices[subject];
        std::sort(e.labeled_slices.begin(), e.labeled_slices.end());
      }
      out.push_back(std::move(e));
    }
  };
  add_split(spec.train_source, spec.train_target, index.train, true);
  add_split(spec.val_source, spec.val_target, index.val, false);
  add_split(spec.test_source, spec.test_target, index.test, false);

  for (const auto& e : index.train) {
    if (e.domain == Domain::kSource) {
      index.n_source += 1;
    } else if (e.labeled) {
      index.m_labeled += static_cast<int64_t>(e.labeled_slices.size());
    } else {
      index.m_unlabeled += 1;
    }
  }
  return index;
}

}  // namespace vesseladapt
