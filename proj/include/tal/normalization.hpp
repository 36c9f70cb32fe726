#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tal/params.hpp"
#include "tal/tensor.hpp"

namespace tal {

struct BnCache {
  Tensor4 xhat;
  std::vector<double> inv_std;  // per channel, 1/sqrt(var+eps)
  int count = 0;                // N*H*W per channel
};

// Per-domain batch normalization: K (gamma, beta) parameter sets plus K
// running-statistic sets over the same channel width. A plain BN layer is the
// K=1 special case.
struct DsbnBank {
  int channels = 0;
  int num_domains = 0;
  double eps = 1e-5;
  double momentum = 0.1;

  std::vector<ParamTensor> gamma, beta;     // [K]
  std::vector<StateTensor> run_mean, run_var;  // [K]

  void build(const std::string& prefix, int channels_, int num_domains_, double eps_,
             double momentum_, ParamRegistry& reg,
             const std::function<int(int)>& group_of_domain) {
    channels = channels_;
    num_domains = num_domains_;
    eps = eps_;
    momentum = momentum_;
    gamma.resize(num_domains);
    beta.resize(num_domains);
    run_mean.resize(num_domains);
    run_var.resize(num_domains);
    for (int i = 0; i < num_domains; ++i) {
      const std::string d = prefix + ".dom" + std::to_string(i + 1);
      const int grp = group_of_domain(i + 1);
      gamma[i].init(d + ".gamma", grp, static_cast<std::size_t>(channels), 1.0);
      beta[i].init(d + ".beta", grp, static_cast<std::size_t>(channels), 0.0);
      run_mean[i].init(d + ".run_mean", grp, static_cast<std::size_t>(channels), 0.0);
      run_var[i].init(d + ".run_var", grp, static_cast<std::size_t>(channels), 1.0);
      reg.add(gamma[i]);
      reg.add(beta[i]);
      reg.add(run_mean[i]);
      reg.add(run_var[i]);
    }
  }

  void check_domain(int dom) const {
    check_arg(dom >= 1 && dom <= num_domains, "invalid domain index " + std::to_string(dom));
  }
  void check_channels(const Tensor4& x) const {
    check_arg(x.c == channels, "channel mismatch: got " + std::to_string(x.c) + ", bank has " +
                                   std::to_string(channels));
  }

  // Train mode: normalize with batch statistics of x, update running stats.
  Tensor4 forward_train(const Tensor4& x, int dom, BnCache* cache) {
    check_domain(dom);
    check_channels(x);
    const int di = dom - 1;
    const int plane = x.plane();
    const int count = x.n * plane;
    check_arg(count > 0, "empty batch");
    Tensor4 y(x.n, x.c, x.h, x.w);
    if (cache) {
      cache->xhat = Tensor4(x.n, x.c, x.h, x.w);
      cache->inv_std.assign(static_cast<std::size_t>(x.c), 0.0);
      cache->count = count;
    }
    for (int ch = 0; ch < x.c; ++ch) {
      double sum = 0.0, sq = 0.0;
      for (int b = 0; b < x.n; ++b) {
        const double* p = x.channel(b, ch);
        for (int i = 0; i < plane; ++i) {
          sum += p[i];
          sq += p[i] * p[i];
        }
      }
      const double mean = sum / count;
      double var = sq / count - mean * mean;
      if (var < 0.0) var = 0.0;
      const double inv = 1.0 / std::sqrt(var + eps);
      const double g = gamma[di].w[static_cast<std::size_t>(ch)];
      const double be = beta[di].w[static_cast<std::size_t>(ch)];
      for (int b = 0; b < x.n; ++b) {
        const double* p = x.channel(b, ch);
        double* q = y.channel(b, ch);
        double* xh = cache ? cache->xhat.channel(b, ch) : nullptr;
        for (int i = 0; i < plane; ++i) {
          const double v = (p[i] - mean) * inv;
          if (xh) xh[i] = v;
          q[i] = g * v + be;
        }
      }
      if (cache) cache->inv_std[static_cast<std::size_t>(ch)] = inv;
      const double var_run = count > 1 ? var * count / (count - 1) : var;
      auto& rm = run_mean[di].v[static_cast<std::size_t>(ch)];
      auto& rv = run_var[di].v[static_cast<std::size_t>(ch)];
      rm = (1.0 - momentum) * rm + momentum * mean;
      rv = (1.0 - momentum) * rv + momentum * var_run;
    }
    return y;
  }

  // Eval mode: normalize with stored running statistics.
  Tensor4 forward_eval(const Tensor4& x, int dom) const {
    check_domain(dom);
    check_channels(x);
    const int di = dom - 1;
    const int plane = x.plane();
    Tensor4 y(x.n, x.c, x.h, x.w);
    for (int ch = 0; ch < x.c; ++ch) {
      const double scale = gamma[di].w[static_cast<std::size_t>(ch)] /
                           std::sqrt(run_var[di].v[static_cast<std::size_t>(ch)] + eps);
      const double off = beta[di].w[static_cast<std::size_t>(ch)] -
                         scale * run_mean[di].v[static_cast<std::size_t>(ch)];
      for (int b = 0; b < x.n; ++b) {
        const double* p = x.channel(b, ch);
        double* q = y.channel(b, ch);
        for (int i = 0; i < plane; ++i) q[i] = scale * p[i] + off;
      }
    }
    return y;
  }

  // eval-mode input gradient: dy -> dx through the fixed affine map
  Tensor4 backward_eval(const Tensor4& dy, int dom) const {
    check_domain(dom);
    const int di = dom - 1;
    const int plane = dy.plane();
    Tensor4 dx(dy.n, dy.c, dy.h, dy.w);
    for (int ch = 0; ch < dy.c; ++ch) {
      const double scale = gamma[di].w[static_cast<std::size_t>(ch)] /
                           std::sqrt(run_var[di].v[static_cast<std::size_t>(ch)] + eps);
      for (int b = 0; b < dy.n; ++b) {
        const double* p = dy.channel(b, ch);
        double* q = dx.channel(b, ch);
        for (int i = 0; i < plane; ++i) q[i] = scale * p[i];
      }
    }
    return dx;
  }

  // Train-mode backward through the batch statistics. Accumulates gamma/beta
  // gradients when param_grads is set.
  Tensor4 backward_train(const Tensor4& dy, int dom, const BnCache& cache, bool param_grads) {
    check_domain(dom);
    const int di = dom - 1;
    const int plane = dy.plane();
    const double n = static_cast<double>(cache.count);
    Tensor4 dx(dy.n, dy.c, dy.h, dy.w);
    for (int ch = 0; ch < dy.c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < dy.n; ++b) {
        const double* d = dy.channel(b, ch);
        const double* xh = cache.xhat.channel(b, ch);
        for (int i = 0; i < plane; ++i) {
          sum_dy += d[i];
          sum_dy_xhat += d[i] * xh[i];
        }
      }
      if (param_grads) {
        gamma[di].g[static_cast<std::size_t>(ch)] += sum_dy_xhat;
        beta[di].g[static_cast<std::size_t>(ch)] += sum_dy;
      }
      const double g = gamma[di].w[static_cast<std::size_t>(ch)];
      const double inv = cache.inv_std[static_cast<std::size_t>(ch)];
      const double mean_dy = sum_dy / n;
      const double mean_dy_xhat = sum_dy_xhat / n;
      for (int b = 0; b < dy.n; ++b) {
        const double* d = dy.channel(b, ch);
        const double* xh = cache.xhat.channel(b, ch);
        double* q = dx.channel(b, ch);
        for (int i = 0; i < plane; ++i)
          q[i] = g * inv * (d[i] - mean_dy - xh[i] * mean_dy_xhat);
      }
    }
    return dx;
  }
};

inline Tensor4 dsbn_forward(DsbnBank& bank, const Tensor4& x, int dom, bool train,
                            BnCache* cache = nullptr) {
  return train ? bank.forward_train(x, dom, cache) : bank.forward_eval(x, dom);
}

struct DabnCache {
  Tensor4 x;          // input, kept to rebuild the frozen DSBN branch outputs
  Mat alpha;          // B x K
  Mat gp;             // B x C
  Mat h1;             // B x bottleneck, post-ReLU
  Mat h1_pre;         // B x bottleneck
};

// Input-conditioned convex mixture over the co-located DSBN bank. The mixture
// weights follow the squeeze-excitation pattern: global average pool, linear
// bottleneck with ReLU, linear to K logits, softmax per sample. During
// training only W1/W2 (and their biases) receive gradients; the DSBN branch
// always runs on its stored per-domain running statistics.
struct DabnHead {
  int channels = 0;
  int num_domains = 0;
  int bottleneck = 0;

  ParamTensor w1, b1;  // bottleneck x C, bottleneck
  ParamTensor w2, b2;  // K x bottleneck, K

  void build(const std::string& prefix, int channels_, int num_domains_, int reduction, int group,
             ParamRegistry& reg, Rng& rng) {
    check_arg(reduction >= 1, "reduction rate must be >= 1");
    channels = channels_;
    num_domains = num_domains_;
    bottleneck = (channels_ + reduction - 1) / reduction;
    if (bottleneck < 1) bottleneck = 1;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(channels));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(bottleneck));
    w1.init_normal(prefix + ".w1", group, static_cast<std::size_t>(bottleneck) * channels, rng, s1);
    b1.init(prefix + ".b1", group, static_cast<std::size_t>(bottleneck));
    w2.init_normal(prefix + ".w2", group, static_cast<std::size_t>(num_domains) * bottleneck, rng, s2);
    b2.init(prefix + ".b2", group, static_cast<std::size_t>(num_domains));
    reg.add(w1);
    reg.add(b1);
    reg.add(w2);
    reg.add(b2);
  }

  // alpha = softmax(W2 relu(W1 GP(x) + b1) + b2), one simplex row per sample
  Mat weights(const Tensor4& x, DabnCache* cache = nullptr) const {
    check_arg(x.c == channels, "channel mismatch in DABN head");
    const int B = x.n, plane = x.plane();
    Mat gp(B, channels);
    for (int b = 0; b < B; ++b)
      for (int ch = 0; ch < channels; ++ch) {
        const double* p = x.channel(b, ch);
        double s = 0.0;
        for (int i = 0; i < plane; ++i) s += p[i];
        gp(b, ch) = s / plane;
      }
    Mat h1p(B, bottleneck), h1(B, bottleneck);
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < bottleneck; ++j) {
        double s = b1.w[static_cast<std::size_t>(j)];
        const double* wr = w1.w.data() + static_cast<std::size_t>(j) * channels;
        for (int ch = 0; ch < channels; ++ch) s += wr[ch] * gp(b, ch);
        h1p(b, j) = s;
        h1(b, j) = s > 0.0 ? s : 0.0;
      }
    Mat alpha(B, num_domains);
    for (int b = 0; b < B; ++b) {
      double mx = -1e300;
      for (int k = 0; k < num_domains; ++k) {
        double s = b2.w[static_cast<std::size_t>(k)];
        const double* wr = w2.w.data() + static_cast<std::size_t>(k) * bottleneck;
        for (int j = 0; j < bottleneck; ++j) s += wr[j] * h1(b, j);
        alpha(b, k) = s;
        if (s > mx) mx = s;
      }
      double z = 0.0;
      for (int k = 0; k < num_domains; ++k) {
        alpha(b, k) = std::exp(alpha(b, k) - mx);
        z += alpha(b, k);
      }
      for (int k = 0; k < num_domains; ++k) alpha(b, k) /= z;
    }
    if (cache) {
      cache->gp = gp;
      cache->h1 = h1;
      cache->h1_pre = h1p;
      cache->alpha = alpha;
    }
    return alpha;
  }

  // y = sum_i alpha_i(x) . DSBN_i(x) with every branch on running statistics
  Tensor4 forward(const Tensor4& x, const DsbnBank& bank, DabnCache* cache = nullptr,
                  bool uniform_alpha = false) const {
    check_arg(bank.channels == channels && bank.num_domains == num_domains,
              "DABN head / DSBN bank mismatch");
    Mat alpha;
    if (uniform_alpha) {
      alpha = Mat::Constant(x.n, num_domains, 1.0 / num_domains);
      if (cache) cache->alpha = alpha;
    } else {
      alpha = weights(x, cache);
    }
    if (cache) cache->x = x;
    const int plane = x.plane();
    Tensor4 y(x.n, x.c, x.h, x.w);
    for (int i = 0; i < num_domains; ++i) {
      for (int ch = 0; ch < channels; ++ch) {
        const double scale =
            bank.gamma[i].w[static_cast<std::size_t>(ch)] /
            std::sqrt(bank.run_var[i].v[static_cast<std::size_t>(ch)] + bank.eps);
        const double off = bank.beta[i].w[static_cast<std::size_t>(ch)] -
                           scale * bank.run_mean[i].v[static_cast<std::size_t>(ch)];
        for (int b = 0; b < x.n; ++b) {
          const double a = alpha(b, i);
          const double* p = x.channel(b, ch);
          double* q = y.channel(b, ch);
          for (int j = 0; j < plane; ++j) q[j] += a * (scale * p[j] + off);
        }
      }
    }
    return y;
  }

  // Backward to the input plus W1/W2 gradient accumulation. The DSBN branch is
  // frozen: no gamma/beta/stat gradients.
  Tensor4 backward(const Tensor4& dy, const DsbnBank& bank, const DabnCache& cache,
                   bool param_grads, bool uniform_alpha = false) {
    const Tensor4& x = cache.x;
    const int B = x.n, plane = x.plane();
    Tensor4 dx(x.n, x.c, x.h, x.w);
    // branch scales/offsets
    Mat scale(num_domains, channels), off(num_domains, channels);
    for (int i = 0; i < num_domains; ++i)
      for (int ch = 0; ch < channels; ++ch) {
        const double sc = bank.gamma[i].w[static_cast<std::size_t>(ch)] /
                          std::sqrt(bank.run_var[i].v[static_cast<std::size_t>(ch)] + bank.eps);
        scale(i, ch) = sc;
        off(i, ch) = bank.beta[i].w[static_cast<std::size_t>(ch)] -
                     sc * bank.run_mean[i].v[static_cast<std::size_t>(ch)];
      }
    // path through the normalized branches
    for (int b = 0; b < B; ++b)
      for (int ch = 0; ch < channels; ++ch) {
        double s = 0.0;
        for (int i = 0; i < num_domains; ++i) s += cache.alpha(b, i) * scale(i, ch);
        const double* d = dy.channel(b, ch);
        double* q = dx.channel(b, ch);
        for (int j = 0; j < plane; ++j) q[j] = s * d[j];
      }
    if (uniform_alpha) return dx;  // fixed mixture, no weight path
    // path through alpha
    Mat dalpha = Mat::Zero(B, num_domains);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < num_domains; ++i) {
        double s = 0.0;
        for (int ch = 0; ch < channels; ++ch) {
          const double* d = dy.channel(b, ch);
          const double* p = x.channel(b, ch);
          const double sc = scale(i, ch), of = off(i, ch);
          double t = 0.0;
          for (int j = 0; j < plane; ++j) t += d[j] * (sc * p[j] + of);
          s += t;
        }
        dalpha(b, i) = s;
      }
    // softmax backward
    Mat da(B, num_domains);
    for (int b = 0; b < B; ++b) {
      double dot = 0.0;
      for (int k = 0; k < num_domains; ++k) dot += cache.alpha(b, k) * dalpha(b, k);
      for (int k = 0; k < num_domains; ++k) da(b, k) = cache.alpha(b, k) * (dalpha(b, k) - dot);
    }
    // linear layers
    Mat dh1 = Mat::Zero(B, bottleneck);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < num_domains; ++k) {
        const double d = da(b, k);
        const double* wr = w2.w.data() + static_cast<std::size_t>(k) * bottleneck;
        double* w2g = w2.g.data() + static_cast<std::size_t>(k) * bottleneck;
        if (param_grads) {
          for (int j = 0; j < bottleneck; ++j) w2g[j] += d * cache.h1(b, j);
          b2.g[static_cast<std::size_t>(k)] += d;
        }
        for (int j = 0; j < bottleneck; ++j) dh1(b, j) += d * wr[j];
      }
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < bottleneck; ++j)
        if (cache.h1_pre(b, j) <= 0.0) dh1(b, j) = 0.0;
    Mat dgp = Mat::Zero(B, channels);
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < bottleneck; ++j) {
        const double d = dh1(b, j);
        if (d == 0.0) continue;
        const double* wr = w1.w.data() + static_cast<std::size_t>(j) * channels;
        double* w1g = w1.g.data() + static_cast<std::size_t>(j) * channels;
        if (param_grads) {
          for (int ch = 0; ch < channels; ++ch) w1g[ch] += d * cache.gp(b, ch);
          b1.g[static_cast<std::size_t>(j)] += d;
        }
        for (int ch = 0; ch < channels; ++ch) dgp(b, ch) += d * wr[ch];
      }
    for (int b = 0; b < B; ++b)
      for (int ch = 0; ch < channels; ++ch) {
        const double d = dgp(b, ch) / plane;
        double* q = dx.channel(b, ch);
        for (int j = 0; j < plane; ++j) q[j] += d;
      }
    return dx;
  }
};

inline Mat dabn_weights(const DabnHead& head, const Tensor4& x) { return head.weights(x); }

// mode is accepted for interface symmetry with dsbn_forward; the mixture uses
// stored running statistics in both modes.
inline Tensor4 dabn_forward(const DabnHead& head, const DsbnBank& bank, const Tensor4& x,
                            bool /*train*/ = false, DabnCache* cache = nullptr) {
  return head.forward(x, bank, cache);
}

}  // namespace tal
