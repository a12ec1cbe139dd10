#include "vesseladapt/common.hpp"

#include <cmath>

namespace vesseladapt {

const char* to_string(Domain d) {
  return d == Domain::kSource ? "source" : "target";
}

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw CorruptHeader("unknown domain tag: " + s);
}

namespace {
uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t state = seed ^ (0xD1B54A32D192ED03ull * (salt + 1));
  return splitmix64(state);
}

uint64_t mix_seed(uint64_t seed, uint64_t salt_a, uint64_t salt_b) {
  return mix_seed(mix_seed(seed, salt_a), salt_b);
}

double Rng::uniform() {
  // 53 random bits into [0, 1)
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  // rejection-free modulo is fine here: ranges are tiny relative to 2^64
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(gen_() % span);
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

std::array<double, 3> Rng::unit_vector() {
  while (true) {
    std::array<double, 3> v = {uniform(-1, 1), uniform(-1, 1), uniform(-1, 1)};
    double n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    if (n2 > 1e-6 && n2 <= 1.0) {
      double n = std::sqrt(n2);
      return {v[0] / n, v[1] / n, v[2] / n};
    }
  }
}

uint64_t tensor_checksum(const torch::Tensor& t) {
  auto c = t.contiguous();
  const auto* bytes = static_cast<const uint8_t*>(c.data_ptr());
  size_t n = c.numel() * c.element_size();
  uint64_t h = 0xCBF29CE484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

uint64_t parameters_checksum(const std::vector<torch::Tensor>& params) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& p : params) {
    uint64_t c = tensor_checksum(p.detach());
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

bool all_finite(const torch::Tensor& t) {
  return torch::isfinite(t).all().item<bool>();
}

}  // namespace vesseladapt
