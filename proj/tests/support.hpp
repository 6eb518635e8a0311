#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "namseg/rng.hpp"
#include "namseg/tensor.hpp"

namespace testing {

inline namseg::Tensor random_tensor(namseg::Shape shape, namseg::Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  namseg::Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const namseg::Tensor& a, const namseg::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Fresh scratch directory under the build tree, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::current_path() / ("tmp_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
