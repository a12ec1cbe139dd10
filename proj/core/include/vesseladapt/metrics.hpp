#pragma once

#include <torch/torch.h>

#include <array>

namespace vesseladapt {

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Hard voxel counts of `pred == label` against `ref == label`. Both grids
// must match (GridMismatch otherwise).
ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& ref,
                          int64_t label);

// Overlap ratios with the empty-empty = 1.0 / empty-vs-nonempty = 0.0
// convention.
double dice(const torch::Tensor& pred, const torch::Tensor& ref, int64_t label);
double precision(const torch::Tensor& pred, const torch::Tensor& ref,
                 int64_t label);
double recall(const torch::Tensor& pred, const torch::Tensor& ref,
              int64_t label);

// Topology-preserving medial-axis thinning (26-connectivity simple points,
// six directional subiterations). Input/output: uint8/bool {0,1} grids.
torch::Tensor skeletonize3d(const torch::Tensor& binary);
// 2D thinning applied slice by slice along axis 0.
torch::Tensor skeletonize2d_stack(const torch::Tensor& binary);

// centerlineDice: harmonic mean of topology precision and sensitivity
// computed via skeletons. `per_slice` switches to the 2D skeletonizer.
double cldice(const torch::Tensor& pred, const torch::Tensor& ref,
              bool per_slice = false);

// 6-connectivity border voxels (volume boundary counts as background).
torch::Tensor surface_voxels(const torch::Tensor& binary);

// Exact anisotropic Euclidean distance transform: squared distance (mm^2)
// from every voxel to the nearest set voxel of `mask`.
torch::Tensor distance_transform_sq(const torch::Tensor& mask,
                                    const std::array<double, 3>& spacing_mm);

// Average symmetric surface distance in mm; throws EmptyMask when either
// side has no foreground.
double assd_mm(const torch::Tensor& pred, const torch::Tensor& ref,
               const std::array<double, 3>& spacing_mm);

}  // namespace vesseladapt
