#include "vesseladapt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "vesseladapt/errors.hpp"

namespace vesseladapt {

namespace {

void check_same_grid(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes())
    throw GridMismatch("mask grids differ: " + std::to_string(a.numel()) +
                       " vs " + std::to_string(b.numel()) + " voxels");
}

double ratio_or_convention(int64_t num, int64_t den, bool pred_empty,
                           bool ref_empty) {
  if (pred_empty && ref_empty) return 1.0;
  if (den == 0) return 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& ref,
                          int64_t label) {
  check_same_grid(pred, ref);
  auto p = pred == label;
  auto r = ref == label;
  ConfusionCounts c;
  c.tp = (p & r).sum().item<int64_t>();
  c.fp = (p & ~r).sum().item<int64_t>();
  c.fn = (~p & r).sum().item<int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

double dice(const torch::Tensor& pred, const torch::Tensor& ref, int64_t label) {
  auto c = confusion(pred, ref, label);
  return ratio_or_convention(2 * c.tp, 2 * c.tp + c.fp + c.fn,
                             c.tp + c.fp == 0, c.tp + c.fn == 0);
}

double precision(const torch::Tensor& pred, const torch::Tensor& ref,
                 int64_t label) {
  auto c = confusion(pred, ref, label);
  return ratio_or_convention(c.tp, c.tp + c.fp, c.tp + c.fp == 0,
                             c.tp + c.fn == 0);
}

double recall(const torch::Tensor& pred, const torch::Tensor& ref,
              int64_t label) {
  auto c = confusion(pred, ref, label);
  return ratio_or_convention(c.tp, c.tp + c.fn, c.tp + c.fp == 0,
                             c.tp + c.fn == 0);
}

// ---------------------------------------------------------------------------
// skeletonization

namespace {

struct Cube {
  // 3x3x3 neighborhood flags, index = (dz+1)*9 + (dy+1)*3 + (dx+1)
  bool fg[27] = {false};
};

inline int cube_index(int dz, int dy, int dx) {
  return (dz + 1) * 9 + (dy + 1) * 3 + (dx + 1);
}

// number of 26-connected components of the foreground among the 26 neighbors
int count_fg_components_26(const Cube& c) {
  bool seen[27] = {false};
  int components = 0;
  for (int i = 0; i < 27; ++i) {
    if (i == 13 || !c.fg[i] || seen[i]) continue;
    ++components;
    int stack[27];
    int top = 0;
    stack[top++] = i;
    seen[i] = true;
    while (top > 0) {
      int cur = stack[--top];
      int cz = cur / 9 - 1, cy = (cur / 3) % 3 - 1, cx = cur % 3 - 1;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int z = cz + dz, y = cy + dy, x = cx + dx;
            if (z < -1 || z > 1 || y < -1 || y > 1 || x < -1 || x > 1) continue;
            int j = cube_index(z, y, x);
            if (j == 13 || seen[j] || !c.fg[j]) continue;
            seen[j] = true;
            stack[top++] = j;
          }
    }
  }
  return components;
}

// number of 6-connected background components within the 18-neighborhood
// that touch the center through a face
int count_bg_components_6(const Cube& c) {
  auto in_n18 = [](int i) {
    if (i == 13) return false;
    int dz = i / 9 - 1, dy = (i / 3) % 3 - 1, dx = i % 3 - 1;
    return std::abs(dz) + std::abs(dy) + std::abs(dx) <= 2;
  };
  bool seen[27] = {false};
  int components = 0;
  static const int face_offsets[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                         {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  for (const auto& off : face_offsets) {
    int i = cube_index(off[0], off[1], off[2]);
    if (c.fg[i] || seen[i]) continue;
    ++components;
    int stack[27];
    int top = 0;
    stack[top++] = i;
    seen[i] = true;
    while (top > 0) {
      int cur = stack[--top];
      int cz = cur / 9 - 1, cy = (cur / 3) % 3 - 1, cx = cur % 3 - 1;
      for (const auto& step : face_offsets) {
        int z = cz + step[0], y = cy + step[1], x = cx + step[2];
        if (z < -1 || z > 1 || y < -1 || y > 1 || x < -1 || x > 1) continue;
        int j = cube_index(z, y, x);
        if (j == 13 || seen[j] || c.fg[j] || !in_n18(j)) continue;
        seen[j] = true;
        stack[top++] = j;
      }
    }
  }
  return components;
}

class Grid3 {
 public:
  explicit Grid3(torch::Tensor t)
      : t_(std::move(t)), a_(t_.accessor<uint8_t, 3>()) {}

  bool fg(int64_t z, int64_t y, int64_t x) const {
    if (z < 0 || y < 0 || x < 0 || z >= t_.size(0) || y >= t_.size(1) ||
        x >= t_.size(2))
      return false;
    return a_[z][y][x] != 0;
  }
  void clear(int64_t z, int64_t y, int64_t x) { a_[z][y][x] = 0; }
  torch::Tensor tensor() const { return t_; }
  int64_t dim(int i) const { return t_.size(i); }

  Cube cube(int64_t z, int64_t y, int64_t x) const {
    Cube c;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          c.fg[cube_index(dz, dy, dx)] = fg(z + dz, y + dy, x + dx);
    return c;
  }

  int neighbor_count_26(int64_t z, int64_t y, int64_t x) const {
    int n = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dz == 0 && dy == 0 && dx == 0) continue;
          if (fg(z + dz, y + dy, x + dx)) ++n;
        }
    return n;
  }

 private:
  torch::Tensor t_;
  torch::TensorAccessor<uint8_t, 3> a_;
};

bool is_simple(const Cube& c) {
  return count_fg_components_26(c) == 1 && count_bg_components_6(c) == 1;
}

}  // namespace

torch::Tensor skeletonize3d(const torch::Tensor& binary) {
  auto work = (binary != 0).to(torch::kUInt8).contiguous().clone();
  Grid3 grid(work);
  const int64_t nz = grid.dim(0), ny = grid.dim(1), nx = grid.dim(2);
  static const int dirs[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                 {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  struct P {
    int64_t z, y, x;
  };
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& dir : dirs) {
      std::vector<P> candidates;
      for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
          for (int64_t x = 0; x < nx; ++x) {
            if (!grid.fg(z, y, x)) continue;
            if (grid.fg(z + dir[0], y + dir[1], x + dir[2])) continue;  // not a border in dir
            int n = grid.neighbor_count_26(z, y, x);
            if (n <= 1) continue;  // endpoint or isolated
            if (!is_simple(grid.cube(z, y, x))) continue;
            candidates.push_back({z, y, x});
          }
      // sequential re-check: earlier deletions may make later points
      // non-simple
      for (const auto& p : candidates) {
        int n = grid.neighbor_count_26(p.z, p.y, p.x);
        if (n <= 1) continue;
        if (!is_simple(grid.cube(p.z, p.y, p.x))) continue;
        grid.clear(p.z, p.y, p.x);
        changed = true;
      }
    }
  }
  return grid.tensor();
}

namespace {

// 2D simple-point test: 8-connectivity foreground, 4-connectivity background
bool is_simple_2d(const bool fg[9]) {
  // indices: (dy+1)*3 + (dx+1), center = 4
  auto idx = [](int dy, int dx) { return (dy + 1) * 3 + (dx + 1); };
  bool seen[9] = {false};
  int fg_components = 0;
  for (int i = 0; i < 9; ++i) {
    if (i == 4 || !fg[i] || seen[i]) continue;
    ++fg_components;
    int stack[9];
    int top = 0;
    stack[top++] = i;
    seen[i] = true;
    while (top > 0) {
      int cur = stack[--top];
      int cy = cur / 3 - 1, cx = cur % 3 - 1;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int y = cy + dy, x = cx + dx;
          if (y < -1 || y > 1 || x < -1 || x > 1) continue;
          int j = idx(y, x);
          if (j == 4 || seen[j] || !fg[j]) continue;
          seen[j] = true;
          stack[top++] = j;
        }
    }
  }
  if (fg_components != 1) return false;

  bool seen_bg[9] = {false};
  int bg_components = 0;
  static const int faces[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  for (const auto& f : faces) {
    int i = idx(f[0], f[1]);
    if (fg[i] || seen_bg[i]) continue;
    ++bg_components;
    int stack[9];
    int top = 0;
    stack[top++] = i;
    seen_bg[i] = true;
    while (top > 0) {
      int cur = stack[--top];
      int cy = cur / 3 - 1, cx = cur % 3 - 1;
      for (const auto& step : faces) {
        int y = cy + step[0], x = cx + step[1];
        if (y < -1 || y > 1 || x < -1 || x > 1) continue;
        int j = idx(y, x);
        if (j == 4 || seen_bg[j] || fg[j]) continue;
        seen_bg[j] = true;
        stack[top++] = j;
      }
    }
  }
  return bg_components == 1;
}

void thin_slice(torch::TensorAccessor<uint8_t, 2> a, int64_t ny, int64_t nx) {
  auto fg_at = [&](int64_t y, int64_t x) {
    if (y < 0 || x < 0 || y >= ny || x >= nx) return false;
    return a[y][x] != 0;
  };
  auto neighbors8 = [&](int64_t y, int64_t x) {
    int n = 0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dy == 0 && dx == 0) continue;
        if (fg_at(y + dy, x + dx)) ++n;
      }
    return n;
  };
  auto cube_of = [&](int64_t y, int64_t x, bool out[9]) {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        out[(dy + 1) * 3 + (dx + 1)] = fg_at(y + dy, x + dx);
  };
  static const int dirs[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& dir : dirs) {
      std::vector<std::pair<int64_t, int64_t>> candidates;
      for (int64_t y = 0; y < ny; ++y)
        for (int64_t x = 0; x < nx; ++x) {
          if (!fg_at(y, x)) continue;
          if (fg_at(y + dir[0], x + dir[1])) continue;
          if (neighbors8(y, x) <= 1) continue;
          bool cube[9];
          cube_of(y, x, cube);
          if (!is_simple_2d(cube)) continue;
          candidates.emplace_back(y, x);
        }
      for (const auto& [y, x] : candidates) {
        if (neighbors8(y, x) <= 1) continue;
        bool cube[9];
        cube_of(y, x, cube);
        if (!is_simple_2d(cube)) continue;
        a[y][x] = 0;
        changed = true;
      }
    }
  }
}

}  // namespace

torch::Tensor skeletonize2d_stack(const torch::Tensor& binary) {
  auto work = (binary != 0).to(torch::kUInt8).contiguous().clone();
  for (int64_t z = 0; z < work.size(0); ++z) {
    auto slice = work[z];
    thin_slice(slice.accessor<uint8_t, 2>(), slice.size(0), slice.size(1));
  }
  return work;
}

double cldice(const torch::Tensor& pred, const torch::Tensor& ref,
              bool per_slice) {
  check_same_grid(pred, ref);
  auto p = (pred != 0);
  auto r = (ref != 0);
  bool p_empty = p.sum().item<int64_t>() == 0;
  bool r_empty = r.sum().item<int64_t>() == 0;
  if (p_empty && r_empty) return 1.0;
  if (p_empty || r_empty) return 0.0;

  auto skel_p = per_slice ? skeletonize2d_stack(p) : skeletonize3d(p);
  auto skel_r = per_slice ? skeletonize2d_stack(r) : skeletonize3d(r);
  auto sp = skel_p != 0;
  auto sr = skel_r != 0;
  int64_t np = sp.sum().item<int64_t>();
  int64_t nr = sr.sum().item<int64_t>();
  // thinning never deletes the last voxel of a nonempty mask
  double tprec = static_cast<double>((sp & r).sum().item<int64_t>()) / np;
  double tsens = static_cast<double>((sr & p).sum().item<int64_t>()) / nr;
  if (tprec + tsens == 0.0) return 0.0;
  return 2.0 * tprec * tsens / (tprec + tsens);
}

// ---------------------------------------------------------------------------
// surface distances

torch::Tensor surface_voxels(const torch::Tensor& binary) {
  auto b = (binary != 0);
  auto out = torch::zeros_like(b);
  auto ba = b.accessor<bool, 3>();
  auto oa = out.accessor<bool, 3>();
  const int64_t nz = b.size(0), ny = b.size(1), nx = b.size(2);
  auto fg_at = [&](int64_t z, int64_t y, int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= nz || y >= ny || x >= nx) return false;
    return ba[z][y][x];
  };
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (!ba[z][y][x]) continue;
        if (!fg_at(z - 1, y, x) || !fg_at(z + 1, y, x) || !fg_at(z, y - 1, x) ||
            !fg_at(z, y + 1, x) || !fg_at(z, y, x - 1) || !fg_at(z, y, x + 1))
          oa[z][y][x] = true;
      }
  return out;
}

namespace {

// Felzenszwalb-Huttenlocher lower envelope of parabolas, with sample
// positions spaced `s` apart (anisotropic axes).
void edt_1d(std::vector<double>& f, double s) {
  const int n = static_cast<int>(f.size());
  static thread_local std::vector<int> v;
  static thread_local std::vector<double> zbound, d;
  v.assign(n, 0);
  zbound.assign(n + 1, 0.0);
  d.assign(n, 0.0);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  int k = 0;
  v[0] = 0;
  zbound[0] = -kInf;
  zbound[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (f[v[0]] == kInf && k == 0) {
      v[0] = q;
      continue;
    }
    double xq = q * s;
    while (true) {
      double xv = v[k] * s;
      double inter =
          ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * xq - 2.0 * xv);
      if (inter <= zbound[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        zbound[k] = inter;
        zbound[k + 1] = kInf;
        break;
      }
    }
  }
  if (f[v[0]] == kInf) return;  // row has no sites
  k = 0;
  for (int q = 0; q < n; ++q) {
    double xq = q * s;
    while (zbound[k + 1] < xq) ++k;
    double xv = v[k] * s;
    d[q] = (xq - xv) * (xq - xv) + f[v[k]];
  }
  f = d;
}

}  // namespace

torch::Tensor distance_transform_sq(const torch::Tensor& mask,
                                    const std::array<double, 3>& spacing_mm) {
  auto m = (mask != 0);
  const int64_t nz = m.size(0), ny = m.size(1), nx = m.size(2);
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto dist = torch::where(m, torch::zeros({}, torch::kFloat64),
                           torch::full({}, kInf, torch::kFloat64));
  auto da = dist.accessor<double, 3>();

  std::vector<double> line;
  // axis 2
  line.resize(nx);
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t x = 0; x < nx; ++x) line[x] = da[z][y][x];
      edt_1d(line, spacing_mm[2]);
      for (int64_t x = 0; x < nx; ++x) da[z][y][x] = line[x];
    }
  // axis 1
  line.resize(ny);
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t y = 0; y < ny; ++y) line[y] = da[z][y][x];
      edt_1d(line, spacing_mm[1]);
      for (int64_t y = 0; y < ny; ++y) da[z][y][x] = line[y];
    }
  // axis 0
  line.resize(nz);
  for (int64_t y = 0; y < ny; ++y)
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t z = 0; z < nz; ++z) line[z] = da[z][y][x];
      edt_1d(line, spacing_mm[0]);
      for (int64_t z = 0; z < nz; ++z) da[z][y][x] = line[z];
    }
  return dist;
}

double assd_mm(const torch::Tensor& pred, const torch::Tensor& ref,
               const std::array<double, 3>& spacing_mm) {
  check_same_grid(pred, ref);
  if ((pred != 0).sum().item<int64_t>() == 0 ||
      (ref != 0).sum().item<int64_t>() == 0)
    throw EmptyMask("assd needs nonempty masks on both sides");

  auto sp = surface_voxels(pred);
  auto sr = surface_voxels(ref);
  auto dist_to_r = distance_transform_sq(sr, spacing_mm);
  auto dist_to_p = distance_transform_sq(sp, spacing_mm);

  auto directed = [](const torch::Tensor& surf, const torch::Tensor& dist_sq) {
    auto d = dist_sq.index({surf}).sqrt();
    return d.mean().item<double>();
  };
  return 0.5 * (directed(sp, dist_to_r) + directed(sr, dist_to_p));
}

}  // namespace vesseladapt
