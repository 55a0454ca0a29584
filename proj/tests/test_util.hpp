#pragma once

#include <atomic>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "cardiovae/tensor.hpp"

namespace testutil {

template <typename S = double>
cardiovae::BasicTensor<S> random_tensor(cardiovae::Dims dims, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  cardiovae::BasicTensor<S> t(std::move(dims));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = static_cast<S>(u(rng));
  return t;
}

template <typename S>
bool bitwise_equal(const cardiovae::BasicTensor<S>& a, const cardiovae::BasicTensor<S>& b) {
  return a.dims() == b.dims() && std::memcmp(a.data(), b.data(), a.size() * sizeof(S)) == 0;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cardiovae-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
