#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vesseladapt/volume_io.hpp"

namespace vesseladapt {

struct DomainSpec {
  enum class Polarity { kBrightVessels, kDarkVessels };

  Polarity polarity = Polarity::kBrightVessels;
  std::array<int64_t, 2> tube_count_range{3, 5};
  std::array<double, 2> radius_range_vox{1.5, 2.5};
  double tortuosity = 0.5;
  double noise_sigma = 0.05;
  double contrast = 0.8;              // in (0,1]
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::array<int64_t, 3> grid{32, 64, 64};  // [slices, rows, cols]
  std::array<double, 3> brain_axes_frac{0.80, 0.82, 0.82};

  void validate() const;  // throws SpecInfeasible
};

struct Phantom {
  Volume volume;  // normalized to [-1, 1]
  SegMask mask;   // {0 background, 1 brain, 2 vessel}
  DomainSpec spec;
  uint64_t seed = 0;
};

// Deterministic given (spec, seed): random smooth tubes swept inside a brain
// ellipsoid, class intensities set by polarity/contrast, Gaussian noise last,
// then normalize().
Phantom make_phantom(const DomainSpec& spec, uint64_t seed);

enum class Scenario { kNarrowGap, kWideGap };
Scenario scenario_from_string(const std::string& s);
const char* to_string(Scenario s);

// Domain parameters for the two adaptation scenarios. narrow_gap keeps both
// domains bright and varies spacing/noise/contrast only; wide_gap pairs a
// sparse, thick, bright source with a dense, thin, dark target.
DomainSpec scenario_spec(Scenario s, Domain d);

struct ScenarioData {
  std::vector<Phantom> source, target;
};

ScenarioData make_scenario(Scenario name, int64_t n_source, int64_t n_target,
                           uint64_t seed);

// Writes <root>/<domain>/<subject>/{image.vol,mask.vol} for every phantom.
void write_scenario(const ScenarioData& data, const fs::path& root);

}  // namespace vesseladapt
