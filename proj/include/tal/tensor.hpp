#pragma once

#include <Eigen/Dense>

#include <cstring>
#include <vector>

#include "tal/common.hpp"

namespace tal {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Dense NCHW tensor. Layout: ((b * c + ch) * h + y) * w + x.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  std::size_t size() const { return v.size(); }
  int plane() const { return h * w; }
  int per_image() const { return c * h * w; }

  double& at(int b, int ch, int y, int x) {
    return v[((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x];
  }
  double at(int b, int ch, int y, int x) const {
    return v[((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x];
  }

  double* image(int b) { return v.data() + static_cast<std::size_t>(b) * per_image(); }
  const double* image(int b) const { return v.data() + static_cast<std::size_t>(b) * per_image(); }

  double* channel(int b, int ch) { return image(b) + static_cast<std::size_t>(ch) * plane(); }
  const double* channel(int b, int ch) const {
    return image(b) + static_cast<std::size_t>(ch) * plane();
  }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.n, t.c, t.h, t.w); }

inline bool bitwise_equal(const Tensor4& a, const Tensor4& b) {
  return a.same_shape(b) &&
         (a.v.empty() ||
          std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0);
}

}  // namespace tal
