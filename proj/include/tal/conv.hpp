#pragma once

#include <vector>

#include "tal/params.hpp"
#include "tal/tensor.hpp"

namespace tal {

struct ConvCache {
  Tensor4 input;
};

// 3x3 convolution with padding 1, configurable stride, via im2col + GEMM.
struct Conv2d {
  int cin = 0, cout = 0, stride = 1;
  static constexpr int kKernel = 3, kPad = 1;

  ParamTensor w;  // cout x (cin*9), row-major
  ParamTensor b;  // cout

  void build(const std::string& prefix, int cin_, int cout_, int stride_, int group,
             ParamRegistry& reg, Rng& rng) {
    cin = cin_;
    cout = cout_;
    stride = stride_;
    const double s = std::sqrt(2.0 / (cin * kKernel * kKernel));  // He init
    w.init_normal(prefix + ".w", group, static_cast<std::size_t>(cout) * cin * kKernel * kKernel,
                  rng, s);
    b.init(prefix + ".b", group, static_cast<std::size_t>(cout));
    reg.add(w);
    reg.add(b);
  }

  static int out_dim(int in, int stride) { return (in + 2 * kPad - kKernel) / stride + 1; }

  Mat im2col(const Tensor4& x, int bi, int oh, int ow) const {
    Mat col(cin * kKernel * kKernel, oh * ow);
    for (int ch = 0; ch < cin; ++ch) {
      const double* plane = x.channel(bi, ch);
      for (int ky = 0; ky < kKernel; ++ky)
        for (int kx = 0; kx < kKernel; ++kx) {
          double* row = col.row(static_cast<Eigen::Index>((ch * kKernel + ky) * kKernel + kx)).data();
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - kPad;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - kPad;
              row[oy * ow + ox] = (iy >= 0 && iy < x.h && ix >= 0 && ix < x.w)
                                      ? plane[iy * x.w + ix]
                                      : 0.0;
            }
          }
        }
    }
    return col;
  }

  Tensor4 forward(const Tensor4& x, ConvCache* cache = nullptr) const {
    check_arg(x.c == cin, "conv input channel mismatch");
    const int oh = out_dim(x.h, stride), ow = out_dim(x.w, stride);
    Tensor4 y(x.n, cout, oh, ow);
    Eigen::Map<const Mat> W(w.w.data(), cout, cin * kKernel * kKernel);
    for (int bi = 0; bi < x.n; ++bi) {
      const Mat col = im2col(x, bi, oh, ow);
      Eigen::Map<Mat> out(y.image(bi), cout, oh * ow);
      out.noalias() = W * col;
      for (int ch = 0; ch < cout; ++ch) out.row(ch).array() += b.w[static_cast<std::size_t>(ch)];
    }
    if (cache) cache->input = x;
    return y;
  }

  // Accumulates weight/bias gradients when param_grads is set; always returns
  // the input gradient.
  Tensor4 backward(const Tensor4& dy, const ConvCache& cache, bool param_grads) {
    const Tensor4& x = cache.input;
    const int oh = dy.h, ow = dy.w;
    Tensor4 dx(x.n, x.c, x.h, x.w);
    Eigen::Map<const Mat> W(w.w.data(), cout, cin * kKernel * kKernel);
    Eigen::Map<Mat> dW(w.g.data(), cout, cin * kKernel * kKernel);
    for (int bi = 0; bi < x.n; ++bi) {
      Eigen::Map<const Mat> dout(dy.image(bi), cout, oh * ow);
      if (param_grads) {
        const Mat col = im2col(x, bi, oh, ow);
        dW.noalias() += dout * col.transpose();
        for (int ch = 0; ch < cout; ++ch) b.g[static_cast<std::size_t>(ch)] += dout.row(ch).sum();
      }
      const Mat dcol = W.transpose() * dout;  // (cin*9) x (oh*ow)
      // col2im
      for (int ch = 0; ch < cin; ++ch) {
        double* plane = dx.channel(bi, ch);
        for (int ky = 0; ky < kKernel; ++ky)
          for (int kx = 0; kx < kKernel; ++kx) {
            const double* row =
                dcol.row(static_cast<Eigen::Index>((ch * kKernel + ky) * kKernel + kx)).data();
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride + ky - kPad;
              if (iy < 0 || iy >= x.h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride + kx - kPad;
                if (ix < 0 || ix >= x.w) continue;
                plane[iy * x.w + ix] += row[oy * ow + ox];
              }
            }
          }
      }
    }
    return dx;
  }
};

}  // namespace tal
