#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tal/params.hpp"
#include "tal/tensor.hpp"

namespace tal {

struct MatchingConfig {
  std::vector<int> scales{0, 1};  // indices into the backbone taps
  bool bidirectional = true;
  bool per_scale_heads = false;

  void validate(int num_stages) const {
    check_config(!scales.empty(), "matching.scales must not be empty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      check_config(scales[i] >= 0 && scales[i] < num_stages, "matching scale out of range");
      if (i > 0) check_config(scales[i] > scales[i - 1], "matching.scales must be increasing");
    }
  }
};

// Local patches of one feature map, re-organized as 1x1 correlation kernels:
// one row per spatial position, L2-normalized over channels. Positions whose
// raw norm is ~0 stay zero (norms[i] == 0 marks them dead for backward).
struct MatchKernels {
  int C = 0, H = 0, W = 0;
  Mat k;      // (H*W) x C
  Vec norms;  // raw norms before normalization; 0 for dead positions
};

inline MatchKernels make_kernels(const Tensor4& stage, int image_index) {
  MatchKernels mk;
  mk.C = stage.c;
  mk.H = stage.h;
  mk.W = stage.w;
  const int n = stage.plane();
  mk.k = Mat(n, stage.c);
  mk.norms = Vec(n);
  for (int p = 0; p < n; ++p) {
    double sq = 0.0;
    for (int ch = 0; ch < stage.c; ++ch) {
      const double v = stage.channel(image_index, ch)[p];
      mk.k(p, ch) = v;
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm < 1e-8) {
      mk.k.row(p).setZero();
      mk.norms(p) = 0.0;
    } else {
      mk.k.row(p) /= norm;
      mk.norms(p) = norm;
    }
  }
  return mk;
}

// d(loss)/d(raw feature rows) from d(loss)/d(normalized rows).
inline void kernels_backward(const MatchKernels& mk, const Mat& dk, Tensor4& dstage,
                             int image_index) {
  const int n = mk.H * mk.W;
  for (int p = 0; p < n; ++p) {
    if (mk.norms(p) == 0.0) continue;
    const double dot = dk.row(p).dot(mk.k.row(p));
    for (int ch = 0; ch < mk.C; ++ch)
      dstage.channel(image_index, ch)[p] += (dk(p, ch) - dot * mk.k(p, ch)) / mk.norms(p);
  }
}

// Best-match responses of one ordered (query, gallery) pair at one scale.
// Query-side responses come first; the gallery side is appended when running
// bidirectionally. Ties in the argmax break toward the lowest index.
struct ScaleResponse {
  Vec r;
  std::vector<int> arg_q;  // per query position: best gallery position
  std::vector<int> arg_g;  // per gallery position: best query position
};

inline ScaleResponse qaconv_response(const MatchKernels& query, const MatchKernels& gallery,
                                     bool bidirectional = true) {
  check_arg(query.C == gallery.C, "channel mismatch between query and gallery kernels");
  const int nq = query.H * query.W, ng = gallery.H * gallery.W;
  const Mat corr = query.k * gallery.k.transpose();  // nq x ng cosine responses
  ScaleResponse out;
  out.r = Vec(bidirectional ? nq + ng : nq);
  out.arg_q.assign(static_cast<std::size_t>(nq), 0);
  for (int m = 0; m < nq; ++m) {
    int best = 0;
    double bv = corr(m, 0);
    for (int n2 = 1; n2 < ng; ++n2)
      if (corr(m, n2) > bv) {
        bv = corr(m, n2);
        best = n2;
      }
    out.arg_q[static_cast<std::size_t>(m)] = best;
    out.r(m) = bv;
  }
  if (bidirectional) {
    out.arg_g.assign(static_cast<std::size_t>(ng), 0);
    for (int n2 = 0; n2 < ng; ++n2) {
      int best = 0;
      double bv = corr(0, n2);
      for (int m = 1; m < nq; ++m)
        if (corr(m, n2) > bv) {
          bv = corr(m, n2);
          best = m;
        }
      out.arg_g[static_cast<std::size_t>(n2)] = best;
      out.r(nq + n2) = bv;
    }
  }
  return out;
}

// Scatter response gradients back onto the two normalized kernel matrices.
inline void response_backward(const ScaleResponse& resp, const MatchKernels& query,
                              const MatchKernels& gallery, const Vec& dr, Mat& dkq, Mat& dkg) {
  const int nq = query.H * query.W;
  for (int m = 0; m < nq; ++m) {
    const double d = dr(m);
    if (d == 0.0) continue;
    const int n2 = resp.arg_q[static_cast<std::size_t>(m)];
    dkq.row(m) += d * gallery.k.row(n2);
    dkg.row(n2) += d * query.k.row(m);
  }
  if (!resp.arg_g.empty()) {
    const int ng = gallery.H * gallery.W;
    for (int n2 = 0; n2 < ng; ++n2) {
      const double d = dr(nq + n2);
      if (d == 0.0) continue;
      const int m = resp.arg_g[static_cast<std::size_t>(n2)];
      dkg.row(n2) += d * query.k.row(m);
      dkq.row(m) += d * gallery.k.row(n2);
    }
  }
}

struct HeadCache {
  Mat xhat;      // P x D
  Vec inv1;      // D
  Vec zhat;      // P
  double inv2 = 0.0;
};

// BN-FC-BN block reducing a batch of response vectors to scalar scores.
// Train mode normalizes over the pair batch and updates running statistics;
// eval mode is a fixed per-feature affine map.
struct SimilarityHead {
  int dim = 0;
  double eps = 1e-5;
  double momentum = 0.1;

  ParamTensor g1, b1;  // D
  ParamTensor w, b0;   // D, 1
  ParamTensor g2, b2;  // 1, 1
  StateTensor rm1, rv1, rm2, rv2;

  void build(const std::string& prefix, int dim_, int group, double eps_, double momentum_,
             ParamRegistry& reg, Rng& rng) {
    dim = dim_;
    eps = eps_;
    momentum = momentum_;
    g1.init(prefix + ".bn1.gamma", group, static_cast<std::size_t>(dim), 1.0);
    b1.init(prefix + ".bn1.beta", group, static_cast<std::size_t>(dim), 0.0);
    w.init_normal(prefix + ".fc.w", group, static_cast<std::size_t>(dim), rng,
                  1.0 / std::sqrt(static_cast<double>(dim)));
    b0.init(prefix + ".fc.b", group, 1, 0.0);
    g2.init(prefix + ".bn2.gamma", group, 1, 1.0);
    b2.init(prefix + ".bn2.beta", group, 1, 0.0);
    rm1.init(prefix + ".bn1.run_mean", group, static_cast<std::size_t>(dim), 0.0);
    rv1.init(prefix + ".bn1.run_var", group, static_cast<std::size_t>(dim), 1.0);
    rm2.init(prefix + ".bn2.run_mean", group, 1, 0.0);
    rv2.init(prefix + ".bn2.run_var", group, 1, 1.0);
    for (auto* p : {&g1, &b1, &w, &b0, &g2, &b2}) reg.add(*p);
    for (auto* s : {&rm1, &rv1, &rm2, &rv2}) reg.add(*s);
  }

  void check_dim(const Mat& v) const {
    check_arg(static_cast<int>(v.cols()) == dim,
              "response dimension mismatch: head built for " + std::to_string(dim) + ", got " +
                  std::to_string(v.cols()));
  }

  Vec forward_train(const Mat& v, HeadCache& cache) {
    check_dim(v);
    const auto P = v.rows();
    check_arg(P >= 2, "train-mode head needs >= 2 pairs");
    cache.xhat = Mat(P, dim);
    cache.inv1 = Vec(dim);
    for (int j = 0; j < dim; ++j) {
      const double mean = v.col(j).mean();
      double var = (v.col(j).array() - mean).square().sum() / static_cast<double>(P);
      if (var < 0.0) var = 0.0;
      const double inv = 1.0 / std::sqrt(var + eps);
      cache.inv1(j) = inv;
      cache.xhat.col(j) = (v.col(j).array() - mean) * inv;
      const double var_run = var * static_cast<double>(P) / static_cast<double>(P - 1);
      rm1.v[static_cast<std::size_t>(j)] =
          (1.0 - momentum) * rm1.v[static_cast<std::size_t>(j)] + momentum * mean;
      rv1.v[static_cast<std::size_t>(j)] =
          (1.0 - momentum) * rv1.v[static_cast<std::size_t>(j)] + momentum * var_run;
    }
    Vec z(P);
    Eigen::Map<const Vec> wv(w.w.data(), dim);
    for (Eigen::Index p = 0; p < P; ++p) {
      double s = b0.w[0];
      for (int j = 0; j < dim; ++j) s += (g1.w[static_cast<std::size_t>(j)] * cache.xhat(p, j) +
                                          b1.w[static_cast<std::size_t>(j)]) *
                                         wv(j);
      z(p) = s;
    }
    const double mz = z.mean();
    double vz = (z.array() - mz).square().sum() / static_cast<double>(P);
    if (vz < 0.0) vz = 0.0;
    cache.inv2 = 1.0 / std::sqrt(vz + eps);
    cache.zhat = (z.array() - mz) * cache.inv2;
    rm2.v[0] = (1.0 - momentum) * rm2.v[0] + momentum * mz;
    rv2.v[0] = (1.0 - momentum) * rv2.v[0] +
               momentum * vz * static_cast<double>(P) / static_cast<double>(P - 1);
    return g2.w[0] * cache.zhat.array() + b2.w[0];
  }

  Vec forward_eval(const Mat& v) const {
    check_dim(v);
    const auto P = v.rows();
    Vec z = Vec::Constant(P, b0.w[0]);
    for (int j = 0; j < dim; ++j) {
      const double inv = 1.0 / std::sqrt(rv1.v[static_cast<std::size_t>(j)] + eps);
      const double sc = g1.w[static_cast<std::size_t>(j)] * inv;
      const double off = b1.w[static_cast<std::size_t>(j)] -
                         sc * rm1.v[static_cast<std::size_t>(j)];
      z.array() += (sc * v.col(j).array() + off) * w.w[static_cast<std::size_t>(j)];
    }
    const double inv2 = 1.0 / std::sqrt(rv2.v[0] + eps);
    return (g2.w[0] * inv2) * (z.array() - rm2.v[0]) + b2.w[0];
  }

  Mat backward_train(const Vec& ds, const HeadCache& cache, bool param_grads) {
    const auto P = cache.xhat.rows();
    const double n = static_cast<double>(P);
    if (param_grads) {
      g2.g[0] += ds.dot(cache.zhat);
      b2.g[0] += ds.sum();
    }
    Vec dzh = g2.w[0] * ds;
    const double mean_dzh = dzh.mean();
    const double mean_dzh_zh = dzh.dot(cache.zhat) / n;
    Vec dz =
        cache.inv2 * (dzh.array() - mean_dzh - cache.zhat.array() * mean_dzh_zh);
    Mat dv(P, dim);
    for (int j = 0; j < dim; ++j) {
      const double wj = w.w[static_cast<std::size_t>(j)];
      const double g1j = g1.w[static_cast<std::size_t>(j)];
      // y1_j = g1 * xhat + b1
      double dw_j = 0.0, dg1_j = 0.0, db1_j = 0.0;
      Vec dxh(P);
      for (Eigen::Index p = 0; p < P; ++p) {
        const double y1 = g1j * cache.xhat(p, j) + b1.w[static_cast<std::size_t>(j)];
        dw_j += dz(p) * y1;
        const double dy1 = dz(p) * wj;
        dg1_j += dy1 * cache.xhat(p, j);
        db1_j += dy1;
        dxh(p) = dy1 * g1j;
      }
      if (param_grads) {
        w.g[static_cast<std::size_t>(j)] += dw_j;
        g1.g[static_cast<std::size_t>(j)] += dg1_j;
        b1.g[static_cast<std::size_t>(j)] += db1_j;
      }
      const double mean_dxh = dxh.mean();
      const double mean_dxh_xh = dxh.dot(cache.xhat.col(j)) / n;
      dv.col(j) = cache.inv1(j) *
                  (dxh.array() - mean_dxh - cache.xhat.col(j).array() * mean_dxh_xh);
    }
    if (param_grads) b0.g[0] += dz.sum();
    return dv;
  }
};

struct HeadStackCache {
  std::vector<HeadCache> heads;
};

// Similarity prediction over per-scale response matrices: either one BN-FC-BN
// on the concatenation (default) or one per scale with summed scores.
struct HeadStack {
  bool per_scale = false;
  std::vector<int> dims;  // per-scale response dims
  std::vector<SimilarityHead> heads;

  int total_dim() const {
    int d = 0;
    for (int x : dims) d += x;
    return d;
  }

  void build(const std::string& prefix, const std::vector<int>& dims_, bool per_scale_, int group,
             double eps, double momentum, ParamRegistry& reg, Rng& rng) {
    dims = dims_;
    per_scale = per_scale_;
    heads.clear();
    if (per_scale) {
      heads.resize(dims.size());
      for (std::size_t s = 0; s < dims.size(); ++s)
        heads[s].build(prefix + ".scale" + std::to_string(s), dims[s], group, eps, momentum, reg,
                       rng);
    } else {
      heads.resize(1);
      heads[0].build(prefix, total_dim(), group, eps, momentum, reg, rng);
    }
  }

  static Mat hconcat(const std::vector<Mat>& rs) {
    Eigen::Index P = rs.empty() ? 0 : rs[0].rows(), D = 0;
    for (const auto& r : rs) D += r.cols();
    Mat v(P, D);
    Eigen::Index off = 0;
    for (const auto& r : rs) {
      v.middleCols(off, r.cols()) = r;
      off += r.cols();
    }
    return v;
  }

  Vec forward_train(const std::vector<Mat>& rs, HeadStackCache& cache) {
    check_arg(rs.size() == dims.size(), "scale count mismatch in head");
    if (per_scale) {
      cache.heads.resize(heads.size());
      Vec s = heads[0].forward_train(rs[0], cache.heads[0]);
      for (std::size_t k = 1; k < heads.size(); ++k)
        s += heads[k].forward_train(rs[k], cache.heads[k]);
      return s;
    }
    cache.heads.resize(1);
    return heads[0].forward_train(hconcat(rs), cache.heads[0]);
  }

  Vec forward_eval(const std::vector<Mat>& rs) const {
    check_arg(rs.size() == dims.size(), "scale count mismatch in head");
    if (per_scale) {
      Vec s = heads[0].forward_eval(rs[0]);
      for (std::size_t k = 1; k < heads.size(); ++k) s += heads[k].forward_eval(rs[k]);
      return s;
    }
    return heads[0].forward_eval(hconcat(rs));
  }

  std::vector<Mat> backward_train(const Vec& ds, HeadStackCache& cache, bool param_grads) {
    std::vector<Mat> drs(dims.size());
    if (per_scale) {
      for (std::size_t k = 0; k < heads.size(); ++k)
        drs[k] = heads[k].backward_train(ds, cache.heads[k], param_grads);
      return drs;
    }
    const Mat dv = heads[0].backward_train(ds, cache.heads[0], param_grads);
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < dims.size(); ++k) {
      drs[k] = dv.middleCols(off, dims[k]);
      off += dims[k];
    }
    return drs;
  }
};

struct AttentionCache {
  Mat u;       // P x (K*D)
  Mat h1, h1_pre;
  Mat alpha;   // P x K
};

// FC-ReLU-FC-Softmax over the concatenated per-domain response vectors,
// emitting one K-simplex per pair.
struct DomainAttention {
  int num_domains = 0, din = 0, bottleneck = 0;
  ParamTensor w1, b1, w2, b2;

  void build(const std::string& prefix, int num_domains_, int per_domain_dim, int reduction,
             int group, ParamRegistry& reg, Rng& rng) {
    num_domains = num_domains_;
    din = num_domains_ * per_domain_dim;
    bottleneck = (din + reduction - 1) / reduction;
    if (bottleneck < 1) bottleneck = 1;
    w1.init_normal(prefix + ".w1", group, static_cast<std::size_t>(bottleneck) * din, rng,
                   1.0 / std::sqrt(static_cast<double>(din)));
    b1.init(prefix + ".b1", group, static_cast<std::size_t>(bottleneck));
    w2.init_normal(prefix + ".w2", group, static_cast<std::size_t>(num_domains) * bottleneck, rng,
                   1.0 / std::sqrt(static_cast<double>(bottleneck)));
    b2.init(prefix + ".b2", group, static_cast<std::size_t>(num_domains));
    for (auto* p : {&w1, &b1, &w2, &b2}) reg.add(*p);
  }

  Mat forward(const Mat& u, AttentionCache* cache = nullptr) const {
    check_arg(static_cast<int>(u.cols()) == din, "attention input dimension mismatch");
    const auto P = u.rows();
    Mat h1p(P, bottleneck), h1(P, bottleneck);
    Eigen::Map<const Mat> W1(w1.w.data(), bottleneck, din);
    h1p.noalias() = u * W1.transpose();
    for (int j = 0; j < bottleneck; ++j) h1p.col(j).array() += b1.w[static_cast<std::size_t>(j)];
    h1 = h1p.cwiseMax(0.0);
    Eigen::Map<const Mat> W2(w2.w.data(), num_domains, bottleneck);
    Mat logits = h1 * W2.transpose();
    for (int k = 0; k < num_domains; ++k)
      logits.col(k).array() += b2.w[static_cast<std::size_t>(k)];
    Mat alpha(P, num_domains);
    for (Eigen::Index p = 0; p < P; ++p) {
      const double mx = logits.row(p).maxCoeff();
      double z = 0.0;
      for (int k = 0; k < num_domains; ++k) {
        alpha(p, k) = std::exp(logits(p, k) - mx);
        z += alpha(p, k);
      }
      alpha.row(p) /= z;
    }
    if (cache) {
      cache->u = u;
      cache->h1 = h1;
      cache->h1_pre = h1p;
      cache->alpha = alpha;
    }
    return alpha;
  }

  void backward(const Mat& dalpha, const AttentionCache& cache, bool param_grads) {
    const auto P = cache.u.rows();
    Mat da(P, num_domains);
    for (Eigen::Index p = 0; p < P; ++p) {
      const double dot = cache.alpha.row(p).dot(dalpha.row(p));
      for (int k = 0; k < num_domains; ++k)
        da(p, k) = cache.alpha(p, k) * (dalpha(p, k) - dot);
    }
    Eigen::Map<const Mat> W2(w2.w.data(), num_domains, bottleneck);
    Mat dh1 = da * W2;
    if (param_grads) {
      Eigen::Map<Mat> dW2(w2.g.data(), num_domains, bottleneck);
      dW2.noalias() += da.transpose() * cache.h1;
      for (int k = 0; k < num_domains; ++k)
        b2.g[static_cast<std::size_t>(k)] += da.col(k).sum();
    }
    for (Eigen::Index p = 0; p < P; ++p)
      for (int j = 0; j < bottleneck; ++j)
        if (cache.h1_pre(p, j) <= 0.0) dh1(p, j) = 0.0;
    if (param_grads) {
      Eigen::Map<Mat> dW1(w1.g.data(), bottleneck, din);
      dW1.noalias() += dh1.transpose() * cache.u;
      for (int j = 0; j < bottleneck; ++j)
        b1.g[static_cast<std::size_t>(j)] += dh1.col(j).sum();
    }
  }
};

// Per-image matching features: one kernel set per matching scale.
using ImageFeats = std::vector<MatchKernels>;

// Responses of one ordered pair at every scale, as 1-row matrices so the
// heads can treat a single pair like a batch of one.
inline std::vector<Mat> pair_response_rows(const ImageFeats& q, const ImageFeats& g,
                                           bool bidirectional) {
  check_arg(q.size() == g.size(), "stage mismatch between query and gallery features");
  std::vector<Mat> rs(q.size());
  for (std::size_t s = 0; s < q.size(); ++s) {
    const ScaleResponse r = qaconv_response(q[s], g[s], bidirectional);
    rs[s] = Mat(1, r.r.size());
    rs[s].row(0) = r.r.transpose();
  }
  return rs;
}

// Multi-scale query-adaptive similarity of one pair (eval-mode head).
inline double ms_qaconv_similarity(const ImageFeats& q, const ImageFeats& g, const HeadStack& head,
                                   bool bidirectional = true) {
  return head.forward_eval(pair_response_rows(q, g, bidirectional))(0);
}

// Aggregation over domain experts in the DS stream.
enum class DsAggregation { kAttention, kUniform, kVoting };

inline DsAggregation parse_ds_aggregation(const std::string& s) {
  if (s == "msda") return DsAggregation::kAttention;
  if (s == "avgpool") return DsAggregation::kUniform;
  if (s == "voting") return DsAggregation::kVoting;
  throw ConfigError("unknown ds aggregation: " + s);
}

// Domain-adaptive multi-scale similarity of one pair across K experts
// (eval-mode heads). Per-domain response vectors are computed at each scale,
// mixed by one attention simplex (or uniformly), and scored; voting skips the
// mixing and averages per-domain scores instead.
inline double msda_qaconv_similarity(const std::vector<ImageFeats>& q_experts,
                                     const std::vector<ImageFeats>& g_experts,
                                     const DomainAttention& attention, const HeadStack& head,
                                     DsAggregation agg = DsAggregation::kAttention,
                                     bool bidirectional = true) {
  const auto K = q_experts.size();
  check_arg(K >= 1 && K == g_experts.size(), "expert count mismatch");
  check_arg(agg != DsAggregation::kAttention ||
                static_cast<int>(K) == attention.num_domains,
            "expert count does not match attention block");
  std::vector<std::vector<Mat>> per_domain(K);
  for (std::size_t k = 0; k < K; ++k)
    per_domain[k] = pair_response_rows(q_experts[k], g_experts[k], bidirectional);
  if (agg == DsAggregation::kVoting) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += head.forward_eval(per_domain[k])(0);
    return s / static_cast<double>(K);
  }
  Vec alpha;
  if (agg == DsAggregation::kUniform) {
    alpha = Vec::Constant(static_cast<Eigen::Index>(K), 1.0 / static_cast<double>(K));
  } else {
    Mat u(1, attention.din);
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < K; ++k)
      for (const auto& r : per_domain[k]) {
        u.row(0).segment(off, r.cols()) = r.row(0);
        off += r.cols();
      }
    alpha = attention.forward(u).row(0).transpose();
  }
  const std::size_t num_scales = per_domain[0].size();
  std::vector<Mat> mixed(num_scales);
  for (std::size_t s = 0; s < num_scales; ++s) {
    mixed[s] = Mat::Zero(1, per_domain[0][s].cols());
    for (std::size_t k = 0; k < K; ++k) mixed[s] += alpha(static_cast<Eigen::Index>(k)) * per_domain[k][s];
  }
  return head.forward_eval(mixed)(0);
}

}  // namespace tal
