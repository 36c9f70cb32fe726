#pragma once

#include <filesystem>
#include <string>

#include "tal/rng.hpp"
#include "tal/tensor.hpp"

namespace testutil {

// Scratch directory under the system temp root, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("tal_test_" + tag);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

inline tal::Tensor4 random_tensor(int n, int c, int h, int w, tal::Rng& rng, double stddev = 1.0) {
  tal::Tensor4 t(n, c, h, w);
  for (auto& v : t.v) v = rng.normal(0.0, stddev);
  return t;
}

inline tal::Mat random_mat(int r, int c, tal::Rng& rng, double stddev = 1.0) {
  tal::Mat m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, stddev);
  return m;
}

inline double max_abs_diff(const tal::Tensor4& a, const tal::Tensor4& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace testutil
