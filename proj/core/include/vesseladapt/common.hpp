#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "vesseladapt/errors.hpp"

namespace vesseladapt {

enum class Domain : int { kSource = 0, kTarget = 1 };

const char* to_string(Domain d);
Domain domain_from_string(const std::string& s);
inline Domain opposite(Domain d) {
  return d == Domain::kSource ? Domain::kTarget : Domain::kSource;
}

// Deterministic seed derivation (splitmix64). Used to give every phantom,
// sweep point, etc. its own independent stream from one user-facing seed.
uint64_t mix_seed(uint64_t seed, uint64_t salt);
uint64_t mix_seed(uint64_t seed, uint64_t salt_a, uint64_t salt_b);

// RNG with explicitly implemented distributions so that generated bytes are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // uniform in [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // inclusive bounds
  int64_t uniform_int(int64_t lo, int64_t hi);
  // standard normal via Box-Muller
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  std::array<double, 3> unit_vector();

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// FNV-1a over the contiguous byte image of a tensor; used by determinism and
// freeze-invariant checks.
uint64_t tensor_checksum(const torch::Tensor& t);
uint64_t parameters_checksum(const std::vector<torch::Tensor>& params);

bool all_finite(const torch::Tensor& t);

}  // namespace vesseladapt
