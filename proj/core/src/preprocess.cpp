#include "vesseladapt/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "vesseladapt/errors.hpp"

namespace vesseladapt {

namespace {

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

int64_t resampled_size(int64_t old_size, double old_sp, double new_sp) {
  return std::llround(static_cast<double>(old_size) * old_sp / new_sp);
}

// Keys cubic convolution kernel, a = -0.5 (interpolating, reproduces
// quadratics).
double cubic_weight(double t) {
  t = std::fabs(t);
  constexpr double a = -0.5;
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
  return 0.0;
}

enum class Interp { kCubic, kNearest };

// Resample one axis; voxel i of the output sits at input coordinate
// i * new_spacing / old_spacing (corner-aligned, shared origin).
torch::Tensor resample_axis(const torch::Tensor& in, int axis, int64_t new_size,
                            double scale, Interp interp) {
  auto src = in.movedim(axis, 0).contiguous();
  int64_t n = src.size(0);
  int64_t inner = src.numel() / n;
  auto flat = src.reshape({n, inner});
  auto out = torch::empty({new_size, inner}, torch::kFloat32);
  auto src_a = flat.accessor<float, 2>();
  auto out_a = out.accessor<float, 2>();

  for (int64_t i = 0; i < new_size; ++i) {
    double x = static_cast<double>(i) * scale;
    if (interp == Interp::kNearest) {
      int64_t j = std::clamp<int64_t>(std::llround(x), 0, n - 1);
      for (int64_t k = 0; k < inner; ++k) out_a[i][k] = src_a[j][k];
      continue;
    }
    int64_t base = static_cast<int64_t>(std::floor(x));
    double frac = x - static_cast<double>(base);
    double w[4];
    int64_t idx[4];
    for (int t = 0; t < 4; ++t) {
      w[t] = cubic_weight(frac - static_cast<double>(t - 1));
      idx[t] = std::clamp<int64_t>(base + t - 1, 0, n - 1);
    }
    for (int64_t k = 0; k < inner; ++k) {
      double acc = 0.0;
      for (int t = 0; t < 4; ++t) acc += w[t] * src_a[idx[t]][k];
      out_a[i][k] = static_cast<float>(acc);
    }
  }
  std::vector<int64_t> shape(src.sizes().begin(), src.sizes().end());
  shape[0] = new_size;
  return out.reshape(shape).movedim(0, axis).contiguous();
}

torch::Tensor resample_grid(const torch::Tensor& data,
                            const std::array<double, 3>& old_sp,
                            const std::array<double, 3>& new_sp,
                            std::array<int64_t, 3>& new_grid, Interp interp) {
  auto t = data.to(torch::kFloat32);
  for (int axis = 0; axis < 3; ++axis) {
    new_grid[axis] = resampled_size(t.size(axis), old_sp[axis], new_sp[axis]);
    if (new_grid[axis] < 1)
      throw DegenerateOutput("axis " + std::to_string(axis) +
                             " resamples to zero extent");
    t = resample_axis(t, axis, new_grid[axis], new_sp[axis] / old_sp[axis],
                      interp);
  }
  return t;
}

}  // namespace

std::array<double, 3> dataset_spacing(const std::vector<Volume>& volumes,
                                      const std::array<int64_t, 3>& max_grid) {
  if (volumes.empty()) throw EmptyDataset("dataset_spacing needs >= 1 volume");
  std::array<double, 3> spacing{};
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> sp;
    sp.reserve(volumes.size());
    for (const auto& v : volumes) sp.push_back(v.header.spacing_mm[axis]);
    double s = median(sp);
    // exact extent check: size * old/new <= max also bounds the rounded grid
    auto fits = [&](double cand) {
      for (const auto& v : volumes)
        if (static_cast<double>(v.header.grid_size[axis]) *
                v.header.spacing_mm[axis] >
            cand * static_cast<double>(max_grid[axis]))
          return false;
      return true;
    };
    while (!fits(s)) s *= 1.01;
    spacing[axis] = s;
  }
  return spacing;
}

Volume resample(const Volume& v, const std::array<double, 3>& spacing_mm) {
  for (double s : spacing_mm)
    if (!(s > 0.0)) throw DegenerateOutput("target spacing must be > 0");
  Volume out;
  out.header = v.header;
  out.data = resample_grid(v.data, v.header.spacing_mm, spacing_mm,
                           out.header.grid_size, Interp::kCubic);
  out.header.spacing_mm = spacing_mm;
  return out;
}

SegMask resample_mask(const SegMask& m, const std::array<double, 3>& spacing_mm) {
  for (double s : spacing_mm)
    if (!(s > 0.0)) throw DegenerateOutput("target spacing must be > 0");
  SegMask out;
  out.header = m.header;
  auto data = resample_grid(m.labels, m.header.spacing_mm, spacing_mm,
                            out.header.grid_size, Interp::kNearest);
  out.labels = data.to(torch::kUInt8);
  out.header.spacing_mm = spacing_mm;
  return out;
}

namespace {
// linear interpolation between order statistics (rank = q/100 * (n-1))
double percentile(const torch::Tensor& sorted, double q) {
  int64_t n = sorted.numel();
  double rank = q / 100.0 * static_cast<double>(n - 1);
  int64_t lo = static_cast<int64_t>(std::floor(rank));
  int64_t hi = std::min(lo + 1, n - 1);
  double frac = rank - static_cast<double>(lo);
  auto a = sorted[lo].item<double>();
  auto b = sorted[hi].item<double>();
  return a + frac * (b - a);
}
}  // namespace

Volume normalize(const Volume& v, NormalizeInfo* info) {
  auto x = v.data.to(torch::kFloat64);
  double mean = x.mean().item<double>();
  double stddev = x.std(/*unbiased=*/false).item<double>();
  if (stddev == 0.0)
    throw ConstantVolume("cannot normalize a constant volume");

  auto z = (x - mean) / stddev;
  auto sorted = std::get<0>(z.flatten().sort());
  double lo = percentile(sorted, 0.1);
  double hi = percentile(sorted, 99.9);
  auto clipped = z.clamp(lo, hi);
  double cmin = clipped.min().item<double>();
  double cmax = clipped.max().item<double>();
  // cmin < cmax whenever stddev > 0
  auto scaled = (clipped - cmin) / (cmax - cmin) * 2.0 - 1.0;

  if (info) {
    info->mean = mean;
    info->stddev = stddev;
    info->clip_lo = lo;
    info->clip_hi = hi;
  }
  Volume out;
  out.header = v.header;
  out.data = scaled.to(torch::kFloat32);
  return out;
}

torch::Tensor one_hot(const torch::Tensor& labels) {
  auto l = labels.to(torch::kInt64);
  if (l.numel() == 0) throw IllegalLabel("empty label grid");
  auto mx = l.max().item<int64_t>();
  auto mn = l.min().item<int64_t>();
  if (mn < 0 || mx >= kNumClasses)
    throw IllegalLabel("labels outside {0,1,2} in one_hot input");
  auto oh = torch::nn::functional::one_hot(l.flatten(), kNumClasses)
                .to(torch::kFloat32);
  std::vector<int64_t> shape(labels.sizes().begin(), labels.sizes().end());
  shape.push_back(kNumClasses);
  auto out = oh.reshape(shape);
  return out.movedim(-1, 0).contiguous();
}

Volume invert_intensity(const Volume& v) {
  Volume out;
  out.header = v.header;
  out.data = -v.data;
  return out;
}

std::vector<SliceSample> extract_slices(
    const Volume& v, const SegMask* mask, int64_t channels,
    const std::vector<int64_t>* labeled_slices) {
  int64_t depth = v.header.grid_size[0];
  if (channels % 2 == 0) throw ChannelCountTooLarge("channel count must be odd");
  if (channels > depth)
    throw ChannelCountTooLarge("channel count " + std::to_string(channels) +
                               " exceeds axial extent " + std::to_string(depth));
  int64_t half = (channels - 1) / 2;

  std::vector<SliceSample> samples;
  samples.reserve(depth);
  for (int64_t k = 0; k < depth; ++k) {
    SliceSample s;
    s.domain = v.header.domain_tag;
    s.subject_id = v.header.subject_id;
    s.slice_index = k;
    std::vector<torch::Tensor> ch;
    ch.reserve(channels);
    for (int64_t off = -half; off <= half; ++off) {
      int64_t j = std::clamp<int64_t>(k + off, 0, depth - 1);
      ch.push_back(v.data[j]);
    }
    s.image = torch::stack(ch, 0);
    bool attach = mask != nullptr &&
                  (labeled_slices == nullptr ||
                   std::find(labeled_slices->begin(), labeled_slices->end(), k) !=
                       labeled_slices->end());
    if (attach) {
      s.onehot = vesseladapt::one_hot(mask->labels[k]);
      s.labeled = true;
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace vesseladapt
