#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>

// shared test utilities

namespace testutil {

namespace fs = std::filesystem;

// fresh scratch directory per test case, removed on destruction
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = fs::temp_directory_path() / "vesseladapt_tests";
    fs::create_directories(base);
    static std::atomic<uint64_t> counter{0};
    path_ = base / (tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& sub) const { return path_ / sub; }

 private:
  fs::path path_;
};

inline torch::Tensor random_volume(int64_t d, int64_t h, int64_t w,
                                   uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand({d, h, w}, gen);
}

}  // namespace testutil
