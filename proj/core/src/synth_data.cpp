#include "vesseladapt/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "vesseladapt/errors.hpp"
#include "vesseladapt/preprocess.hpp"

namespace vesseladapt {

namespace {

struct Vec3 {
  double z, y, x;
  Vec3 operator+(const Vec3& o) const { return {z + o.z, y + o.y, x + o.x}; }
  Vec3 operator-(const Vec3& o) const { return {z - o.z, y - o.y, x - o.x}; }
  Vec3 operator*(double s) const { return {z * s, y * s, x * s}; }
  double norm() const { return std::sqrt(z * z + y * y + x * x); }
};

double dot(const Vec3& a, const Vec3& b) {
  return a.z * b.z + a.y * b.y + a.x * b.x;
}

// Catmull-Rom segment between p1 and p2
Vec3 catmull_rom(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3,
                 double t) {
  double t2 = t * t, t3 = t2 * t;
  auto term = [&](double a, double b, double c, double d) {
    return 0.5 * ((2.0 * b) + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 +
                  (-a + 3.0 * b - 3.0 * c + d) * t3);
  };
  return {term(p0.z, p1.z, p2.z, p3.z), term(p0.y, p1.y, p2.y, p3.y),
          term(p0.x, p1.x, p2.x, p3.x)};
}

struct Ellipsoid {
  Vec3 center;
  Vec3 semi_axes;
  // < 1 inside, 1 on the surface
  double level(const Vec3& p) const {
    Vec3 d = p - center;
    double z = d.z / semi_axes.z, y = d.y / semi_axes.y, x = d.x / semi_axes.x;
    return std::sqrt(z * z + y * y + x * x);
  }
  bool inside(const Vec3& p, double margin = 0.0) const {
    return level(p) < 1.0 - margin;
  }
};

Vec3 random_point_inside(const Ellipsoid& e, Rng& rng, double margin) {
  while (true) {
    Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    if (p.norm() >= 1.0) continue;
    Vec3 q = {e.center.z + p.z * e.semi_axes.z * (1.0 - margin),
              e.center.y + p.y * e.semi_axes.y * (1.0 - margin),
              e.center.x + p.x * e.semi_axes.x * (1.0 - margin)};
    return q;
  }
}

}  // namespace

void DomainSpec::validate() const {
  if (tube_count_range[0] < 1 || tube_count_range[1] < tube_count_range[0])
    throw SpecInfeasible("tube count range must satisfy 1 <= min <= max");
  if (radius_range_vox[0] < 1.0 || radius_range_vox[1] < radius_range_vox[0])
    throw SpecInfeasible("tube radius range must satisfy 1 <= min <= max");
  if (!(contrast > 0.0 && contrast <= 1.0))
    throw SpecInfeasible("contrast must lie in (0, 1]");
  if (noise_sigma < 0.0 || tortuosity < 0.0)
    throw SpecInfeasible("noise_sigma and tortuosity must be >= 0");
  for (int i = 0; i < 3; ++i) {
    if (grid[i] < 4) throw SpecInfeasible("grid too small");
    if (!(spacing_mm[i] > 0.0)) throw SpecInfeasible("spacing must be > 0");
    if (!(brain_axes_frac[i] > 0.0 && brain_axes_frac[i] < 1.0))
      throw SpecInfeasible("brain_axes_frac must lie in (0,1)");
    double semi = brain_axes_frac[i] * static_cast<double>(grid[i]) / 2.0;
    if (radius_range_vox[1] >= semi)
      throw SpecInfeasible("tube radius exceeds brain extent on axis " +
                           std::to_string(i));
  }
}

Phantom make_phantom(const DomainSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(mix_seed(seed, 0xBEEF));

  const auto [nz, ny, nx] = spec.grid;
  Ellipsoid brain{
      {static_cast<double>(nz - 1) / 2.0, static_cast<double>(ny - 1) / 2.0,
       static_cast<double>(nx - 1) / 2.0},
      {spec.brain_axes_frac[0] * nz / 2.0, spec.brain_axes_frac[1] * ny / 2.0,
       spec.brain_axes_frac[2] * nx / 2.0}};

  // per-voxel vessel coverage in [0,1]
  auto coverage = torch::zeros({nz, ny, nx}, torch::kFloat32);
  auto cov = coverage.accessor<float, 3>();

  int64_t n_tubes = rng.uniform_int(spec.tube_count_range[0],
                                    spec.tube_count_range[1]);
  for (int64_t tube = 0; tube < n_tubes; ++tube) {
    // endpoints in roughly opposite halves, intermediates jittered by
    // tortuosity
    Vec3 p0 = random_point_inside(brain, rng, 0.15);
    Vec3 p1 = random_point_inside(brain, rng, 0.15);
    for (int tries = 0; (p1 - p0).norm() < 0.6 * brain.semi_axes.x && tries < 32;
         ++tries)
      p1 = random_point_inside(brain, rng, 0.15);

    int64_t k = rng.uniform_int(3, 6);
    std::vector<Vec3> ctrl;
    ctrl.reserve(k);
    double span = (p1 - p0).norm();
    for (int64_t i = 0; i < k; ++i) {
      double t = static_cast<double>(i) / static_cast<double>(k - 1);
      Vec3 p = p0 + (p1 - p0) * t;
      if (i > 0 && i < k - 1) {
        double jitter = spec.tortuosity * span * 0.18;
        p = p + Vec3{rng.normal(0, jitter), rng.normal(0, jitter),
                     rng.normal(0, jitter)};
        // pull back inside the brain
        double lv = brain.level(p);
        if (lv > 0.85) {
          Vec3 d = p - brain.center;
          p = brain.center + d * (0.85 / lv);
        }
      }
      ctrl.push_back(p);
    }

    double r0 = rng.uniform(spec.radius_range_vox[0], spec.radius_range_vox[1]);
    double r1 = rng.uniform(spec.radius_range_vox[0], spec.radius_range_vox[1]);

    // phantom tubes: sweep a ball along the spline
    std::vector<Vec3> pts;
    for (int64_t seg = 0; seg + 1 < k; ++seg) {
      const Vec3& a = ctrl[std::max<int64_t>(seg - 1, 0)];
      const Vec3& b = ctrl[seg];
      const Vec3& c = ctrl[seg + 1];
      const Vec3& d = ctrl[std::min<int64_t>(seg + 2, k - 1)];
      double seg_len = (c - b).norm();
      int64_t steps = std::max<int64_t>(4, std::llround(seg_len / 0.25));
      for (int64_t s = 0; s < steps; ++s)
        pts.push_back(catmull_rom(a, b, c, d, static_cast<double>(s) / steps));
    }
    pts.push_back(ctrl.back());

    for (size_t i = 0; i < pts.size(); ++i) {
      double t = static_cast<double>(i) / static_cast<double>(pts.size() - 1);
      double r = r0 + (r1 - r0) * t;
      const Vec3& c = pts[i];
      int64_t z0 = std::max<int64_t>(0, std::llround(c.z - r - 1));
      int64_t z1 = std::min<int64_t>(nz - 1, std::llround(c.z + r + 1));
      int64_t y0 = std::max<int64_t>(0, std::llround(c.y - r - 1));
      int64_t y1 = std::min<int64_t>(ny - 1, std::llround(c.y + r + 1));
      int64_t x0 = std::max<int64_t>(0, std::llround(c.x - r - 1));
      int64_t x1 = std::min<int64_t>(nx - 1, std::llround(c.x + r + 1));
      for (int64_t z = z0; z <= z1; ++z)
        for (int64_t y = y0; y <= y1; ++y)
          for (int64_t x = x0; x <= x1; ++x) {
            Vec3 p{static_cast<double>(z), static_cast<double>(y),
                   static_cast<double>(x)};
            if (!brain.inside(p)) continue;
            double dist = (p - c).norm();
            // soft edge over one voxel
            double cval = std::clamp(r + 0.5 - dist, 0.0, 1.0);
            if (cval > cov[z][y][x]) cov[z][y][x] = static_cast<float>(cval);
          }
    }
  }

  // intensities: background 0, soft-edged brain tissue, vessels offset by
  // +-contrast
  auto intensity = torch::zeros({nz, ny, nx}, torch::kFloat32);
  auto mask = torch::zeros({nz, ny, nx}, torch::kUInt8);
  auto img = intensity.accessor<float, 3>();
  auto lab = mask.accessor<uint8_t, 3>();
  double sign = spec.polarity == DomainSpec::Polarity::kBrightVessels ? 1.0 : -1.0;
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        Vec3 p{static_cast<double>(z), static_cast<double>(y),
               static_cast<double>(x)};
        double lv = brain.level(p);
        double brain_soft =
            std::clamp((1.0 - lv) * brain.semi_axes.x / 1.5, 0.0, 1.0);
        double value = 0.5 * brain_soft;
        double c = cov[z][y][x];
        if (c > 0.0)
          value += sign * spec.contrast * (0.5 + 0.5 * c) * std::min(1.0, c * 2.0);
        img[z][y][x] = static_cast<float>(value);
        if (c >= 0.5)
          lab[z][y][x] = static_cast<uint8_t>(kLabelVessel);
        else if (lv < 1.0)
          lab[z][y][x] = static_cast<uint8_t>(kLabelBrain);
      }

  if (spec.noise_sigma > 0.0) {
    auto noise = torch::empty({nz, ny, nx}, torch::kFloat32);
    auto na = noise.accessor<float, 3>();
    for (int64_t z = 0; z < nz; ++z)
      for (int64_t y = 0; y < ny; ++y)
        for (int64_t x = 0; x < nx; ++x)
          na[z][y][x] = static_cast<float>(rng.normal(0.0, spec.noise_sigma));
    intensity += noise;
  }

  Phantom ph;
  ph.spec = spec;
  ph.seed = seed;
  ph.volume.header.grid_size = spec.grid;
  ph.volume.header.spacing_mm = spec.spacing_mm;
  ph.volume.header.domain_tag = Domain::kSource;
  char name[32];
  std::snprintf(name, sizeof(name), "phantom_%llu",
                static_cast<unsigned long long>(seed));
  ph.volume.header.subject_id = name;
  ph.volume.data = intensity;
  ph.volume = normalize(ph.volume);
  ph.mask.header = ph.volume.header;
  ph.mask.labels = mask;
  return ph;
}

Scenario scenario_from_string(const std::string& s) {
  if (s == "narrow_gap") return Scenario::kNarrowGap;
  if (s == "wide_gap") return Scenario::kWideGap;
  throw Error("unknown scenario: " + s);
}

const char* to_string(Scenario s) {
  return s == Scenario::kNarrowGap ? "narrow_gap" : "wide_gap";
}

DomainSpec scenario_spec(Scenario s, Domain d) {
  DomainSpec spec;
  if (s == Scenario::kNarrowGap) {
    spec.polarity = DomainSpec::Polarity::kBrightVessels;
    spec.tube_count_range = {4, 7};
    spec.radius_range_vox = {1.6, 2.6};
    spec.tortuosity = 0.4;
    if (d == Domain::kSource) {
      spec.noise_sigma = 0.03;
      spec.contrast = 0.8;
      spec.spacing_mm = {1.0, 1.0, 1.0};
    } else {
      spec.noise_sigma = 0.07;
      spec.contrast = 0.55;
      spec.spacing_mm = {1.15, 0.9, 0.95};
    }
    return spec;
  }
  if (d == Domain::kSource) {
    spec.polarity = DomainSpec::Polarity::kBrightVessels;
    spec.tube_count_range = {2, 4};
    spec.radius_range_vox = {2.2, 3.2};
    spec.tortuosity = 0.35;
    spec.noise_sigma = 0.04;
    spec.contrast = 0.8;
    spec.spacing_mm = {1.0, 1.0, 1.0};
  } else {
    spec.polarity = DomainSpec::Polarity::kDarkVessels;
    spec.tube_count_range = {10, 16};
    spec.radius_range_vox = {1.0, 1.7};
    spec.tortuosity = 0.6;
    spec.noise_sigma = 0.06;
    spec.contrast = 0.6;
    spec.spacing_mm = {1.1, 0.85, 0.9};
  }
  return spec;
}

ScenarioData make_scenario(Scenario name, int64_t n_source, int64_t n_target,
                           uint64_t seed) {
  if (n_source < 1 || n_target < 1)
    throw SpecInfeasible("scenario needs >= 1 volume per domain");
  ScenarioData data;
  auto build = [&](Domain d, int64_t count, std::vector<Phantom>& out) {
    auto spec = scenario_spec(name, d);
    const char prefix = d == Domain::kSource ? 's' : 't';
    for (int64_t i = 0; i < count; ++i) {
      auto ph = make_phantom(spec, mix_seed(seed, static_cast<uint64_t>(d), i));
      char id[16];
      std::snprintf(id, sizeof(id), "%c%03lld", prefix,
                    static_cast<long long>(i));
      ph.volume.header.domain_tag = d;
      ph.volume.header.subject_id = id;
      ph.mask.header = ph.volume.header;
      out.push_back(std::move(ph));
    }
  };
  build(Domain::kSource, n_source, data.source);
  build(Domain::kTarget, n_target, data.target);
  return data;
}

void write_scenario(const ScenarioData& data, const fs::path& root) {
  for (const auto& list : {&data.source, &data.target})
    for (const auto& ph : *list) save_subject(root, ph.volume, &ph.mask);
}

}  // namespace vesseladapt
