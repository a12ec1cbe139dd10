#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vesseladapt/common.hpp"

namespace vesseladapt {

namespace fs = std::filesystem;

inline constexpr int64_t kLabelBackground = 0;
inline constexpr int64_t kLabelBrain = 1;
inline constexpr int64_t kLabelVessel = 2;
inline constexpr int64_t kNumClasses = 3;

struct VolumeHeader {
  // Tensor shape order: [slices, rows, cols]. Axis 0 is the axial axis used
  // by the 2.5D slicer.
  std::array<int64_t, 3> grid_size{};
  std::array<double, 3> spacing_mm{};
  Domain domain_tag = Domain::kSource;
  std::string subject_id;

  void validate() const;  // throws CorruptHeader
  int64_t voxel_count() const {
    return grid_size[0] * grid_size[1] * grid_size[2];
  }
};

struct Volume {
  VolumeHeader header;
  torch::Tensor data;  // float32, shape == header.grid_size

  void validate() const;  // throws ShapeMismatch / CorruptHeader
};

struct SegMask {
  VolumeHeader header;
  torch::Tensor labels;  // uint8, values in {0,1,2}, shape == header.grid_size

  void validate() const;  // throws ShapeMismatch / IllegalLabel
  int64_t count(int64_t label) const;
};

// Raw little-endian payload `<stem>.vol` plus a sidecar `<stem>.json` header.
// `load_volume` additionally accepts NIfTI-1 files (.nii / .nii.gz).
Volume load_volume(const fs::path& path);
SegMask load_mask(const fs::path& path);
void save_volume(const Volume& v, const fs::path& path);
void save_mask(const SegMask& m, const fs::path& path);

// Canonical dataset layout: <root>/<domain>/<subject>/{image.vol,image.json,
// mask.vol,mask.json}.
fs::path subject_dir(const fs::path& root, Domain d, const std::string& subject);
void save_subject(const fs::path& root, const Volume& v,
                  const SegMask* mask = nullptr);

struct IndexEntry {
  fs::path volume_path;
  std::optional<fs::path> mask_path;
  Domain domain = Domain::kSource;
  bool labeled = false;
  // For labeled target entries: the designated T_L slice indices. Empty for
  // source entries, whose annotation covers the whole volume.
  std::vector<int64_t> labeled_slices;
  std::string subject_id;
};

struct SplitSpec {
  std::vector<std::string> train_source, train_target;
  std::vector<std::string> val_source, val_target;
  std::vector<std::string> test_source, test_target;
  // (subject, axial slice index) pairs forming T_L; subjects must belong to
  // train_target.
  std::vector<std::pair<std::string, int64_t>> labeled_target;

  static SplitSpec from_json_file(const fs::path& path);
  static SplitSpec from_json_string(const std::string& text);
  std::string to_json_string() const;
};

struct DatasetIndex {
  std::vector<IndexEntry> train, val, test;
  int64_t n_source = 0;   // N: labeled source volumes in the train split
  int64_t m_unlabeled = 0;  // M: target train volumes without labeled slices
  int64_t m_labeled = 0;    // m: labeled (subject, slice) pairs
};

DatasetIndex build_index(const fs::path& root, const SplitSpec& spec);

}  // namespace vesseladapt
