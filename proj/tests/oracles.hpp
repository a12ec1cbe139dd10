#pragma once

// Brute-force reference implementations used only by tests. These stay
// independent of the library code paths they check.

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <vector>

namespace oracle {

struct Counts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// voxel-by-voxel confusion counting
inline Counts confusion(const torch::Tensor& pred, const torch::Tensor& ref,
                        int64_t label) {
  auto p = pred.flatten().to(torch::kInt64);
  auto r = ref.flatten().to(torch::kInt64);
  auto pa = p.accessor<int64_t, 1>();
  auto ra = r.accessor<int64_t, 1>();
  Counts c;
  for (int64_t i = 0; i < p.numel(); ++i) {
    bool in_p = pa[i] == label, in_r = ra[i] == label;
    if (in_p && in_r)
      ++c.tp;
    else if (in_p)
      ++c.fp;
    else if (in_r)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

inline double dice(const Counts& c) {
  if (c.tp + c.fp == 0 && c.tp + c.fn == 0) return 1.0;
  if (2 * c.tp + c.fp + c.fn == 0) return 0.0;
  return 2.0 * c.tp / static_cast<double>(2 * c.tp + c.fp + c.fn);
}
inline double precision(const Counts& c) {
  if (c.tp + c.fp == 0 && c.tp + c.fn == 0) return 1.0;
  if (c.tp + c.fp == 0) return 0.0;
  return static_cast<double>(c.tp) / (c.tp + c.fp);
}
inline double recall(const Counts& c) {
  if (c.tp + c.fp == 0 && c.tp + c.fn == 0) return 1.0;
  if (c.tp + c.fn == 0) return 0.0;
  return static_cast<double>(c.tp) / (c.tp + c.fn);
}

// surface voxels: foreground with a 6-neighbor background (grid border counts
// as background)
inline std::vector<std::array<int64_t, 3>> surface(const torch::Tensor& mask) {
  auto m = (mask != 0);
  auto a = m.accessor<bool, 3>();
  int64_t nz = m.size(0), ny = m.size(1), nx = m.size(2);
  auto fg = [&](int64_t z, int64_t y, int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= nz || y >= ny || x >= nx) return false;
    return a[z][y][x];
  };
  std::vector<std::array<int64_t, 3>> out;
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (!a[z][y][x]) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) ||
            !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

// O(n^2) all-pairs average symmetric surface distance
inline double assd(const torch::Tensor& pred, const torch::Tensor& ref,
                   const std::array<double, 3>& spacing) {
  auto sp = surface(pred);
  auto sr = surface(ref);
  auto directed = [&](const auto& from, const auto& to) {
    double sum = 0;
    for (const auto& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : to) {
        double dz = (a[0] - b[0]) * spacing[0];
        double dy = (a[1] - b[1]) * spacing[1];
        double dx = (a[2] - b[2]) * spacing[2];
        best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
      }
      sum += best;
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(sp, sr) + directed(sr, sp));
}

// number of 26-connected components of `mask == label`
inline int64_t connected_components_26(const torch::Tensor& mask, int64_t label) {
  auto m = (mask == label);
  auto a = m.accessor<bool, 3>();
  int64_t nz = m.size(0), ny = m.size(1), nx = m.size(2);
  auto idx = [&](int64_t z, int64_t y, int64_t x) {
    return (z * ny + y) * nx + x;
  };
  std::vector<char> seen(nz * ny * nx, 0);
  int64_t components = 0;
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (!a[z][y][x] || seen[idx(z, y, x)]) continue;
        ++components;
        std::deque<std::array<int64_t, 3>> queue{{z, y, x}};
        seen[idx(z, y, x)] = 1;
        while (!queue.empty()) {
          auto [cz, cy, cx] = queue.front();
          queue.pop_front();
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                int64_t pz = cz + dz, py = cy + dy, px = cx + dx;
                if (pz < 0 || py < 0 || px < 0 || pz >= nz || py >= ny ||
                    px >= nx)
                  continue;
                if (!a[pz][py][px] || seen[idx(pz, py, px)]) continue;
                seen[idx(pz, py, px)] = 1;
                queue.push_back({pz, py, px});
              }
        }
      }
  return components;
}

// central finite difference of a scalar function w.r.t. one tensor entry
template <typename F>
double finite_diff(F&& f, const torch::Tensor& param, int64_t flat_index,
                   double eps = 1e-5) {
  auto flat = param.flatten();
  double original = flat[flat_index].item<double>();
  {
    torch::NoGradGuard g;
    flat[flat_index] = original + eps;
  }
  double plus = f();
  {
    torch::NoGradGuard g;
    flat[flat_index] = original - eps;
  }
  double minus = f();
  {
    torch::NoGradGuard g;
    flat[flat_index] = original;
  }
  return (plus - minus) / (2.0 * eps);
}

inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-12});
  return std::fabs(a - b) / denom;
}

}  // namespace oracle
