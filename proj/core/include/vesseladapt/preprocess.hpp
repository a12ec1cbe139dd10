#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "vesseladapt/volume_io.hpp"

namespace vesseladapt {

// One 2.5D training example: the center slice plus (C-1)/2 replicated-edge
// neighbors on each side, stacked as channels.
struct SliceSample {
  torch::Tensor image;                  // [C, H, W] float32 in [-1, 1]
  std::optional<torch::Tensor> onehot;  // [3, H, W] float32, center slice
  Domain domain = Domain::kSource;
  bool labeled = false;
  std::string subject_id;
  int64_t slice_index = 0;
};

// Per-axis median spacing of one domain's volumes, nudged up by 1% steps
// until every resampled volume fits inside max_grid.
std::array<double, 3> dataset_spacing(const std::vector<Volume>& volumes,
                                      const std::array<int64_t, 3>& max_grid);

// Separable cubic-convolution (Keys, a = -0.5) resampling onto the new
// spacing; grid becomes round(old_size * old_spacing / new_spacing).
Volume resample(const Volume& v, const std::array<double, 3>& spacing_mm);
// Nearest-neighbor counterpart so labels stay in {0,1,2}.
SegMask resample_mask(const SegMask& m, const std::array<double, 3>& spacing_mm);

struct NormalizeInfo {
  double mean = 0, stddev = 0;
  double clip_lo = 0, clip_hi = 0;  // percentile cuts in rescaled units
};

// (1) rescale by mean/std, (2) clip to the [0.1, 99.9] percentiles,
// (3) map the clipped min/max to [-1, +1] exactly.
Volume normalize(const Volume& v, NormalizeInfo* info = nullptr);

// label grid (any shape, integer dtype) -> [3, ...] one-hot float32
torch::Tensor one_hot(const torch::Tensor& labels);

// x -> -x; per-domain intensity inversion ablation switch
Volume invert_intensity(const Volume& v);

// One sample per axial index. `labeled_slices == nullptr` attaches the mask
// at every index (fully annotated volume); otherwise only at the listed ones.
std::vector<SliceSample> extract_slices(
    const Volume& v, const SegMask* mask, int64_t channels,
    const std::vector<int64_t>* labeled_slices = nullptr);

inline int64_t midpoint_slice(int64_t depth) { return depth / 2; }

}  // namespace vesseladapt
