#pragma once

#include <string>
#include <vector>

#include "tal/backbone.hpp"
#include "tal/dataset.hpp"
#include "tal/loss.hpp"
#include "tal/matching.hpp"

namespace tal {

enum class DiNorm { kDabn, kPlain, kAvgPool };

inline DiNorm parse_di_norm(const std::string& s) {
  if (s == "dabn") return DiNorm::kDabn;
  if (s == "bn") return DiNorm::kPlain;
  if (s == "avgpool") return DiNorm::kAvgPool;
  throw ConfigError("unknown di normalization: " + s);
}

struct ModelConfig {
  BackboneConfig backbone;
  MatchingConfig matching;
  int num_domains = 3;
  int reduction = 16;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  DsAggregation ds_agg = DsAggregation::kAttention;
  DiNorm di_norm = DiNorm::kDabn;
  double pixel_mean = 0.5;
  double pixel_std = 0.25;
  std::uint64_t init_seed = 1;

  void validate() const {
    backbone.validate();
    matching.validate(backbone.num_stages());
    check_config(num_domains >= 1, "model needs >= 1 domain");
    check_config(reduction >= 1, "reduction must be >= 1");
    check_config(pixel_std > 0.0, "pixel_std must be > 0");
  }
};

// All pairwise scores of one batch (square) or one query/gallery pairing,
// with the labels the loss and metrics need.
struct SimilarityMatrix {
  Mat s;
  std::vector<int> row_ids, col_ids, row_cams, col_cams;
};

// The two-stream model: a shared convolutional trunk whose normalization
// sites hold per-domain banks plus adaptive mixtures, a similarity head per
// stream, an MSDA head + attention for the hybrid DS path.
struct TwoStreamModel {
  ModelConfig cfg;
  GroupIds groups;
  ParamRegistry reg;
  Backbone net;
  HeadStack ds_head;    // phase A supervision of experts
  HeadStack msda_head;  // hybrid DS scoring (phase B + inference)
  HeadStack di_head;    // invariant stream scoring (phase C + inference)
  DomainAttention attention;

  int num_domains() const { return cfg.num_domains; }

  // per-scale response dimensions implied by resolution + direction flag
  std::vector<int> response_dims() const {
    const auto dims = cfg.backbone.block_dims();
    std::vector<int> out;
    for (int sc : cfg.matching.scales) {
      const int block = cfg.backbone.taps[static_cast<std::size_t>(sc)] - 1;
      const int hw = dims[static_cast<std::size_t>(block)].first *
                     dims[static_cast<std::size_t>(block)].second;
      out.push_back(cfg.matching.bidirectional ? 2 * hw : hw);
    }
    return out;
  }

  void build(const ModelConfig& c) {
    cfg = c;
    cfg.validate();
    groups = GroupIds::make(cfg.num_domains);
    reg = ParamRegistry{};
    Rng rng(cfg.init_seed);
    net.build(cfg.backbone, cfg.num_domains, cfg.reduction, cfg.bn_eps, cfg.bn_momentum,
              cfg.di_norm == DiNorm::kPlain, groups, reg, rng);
    const auto dims = response_dims();
    ds_head.build("ds_head", dims, cfg.matching.per_scale_heads, groups.ds_head, cfg.bn_eps,
                  cfg.bn_momentum, reg, rng);
    msda_head.build("msda_head", dims, cfg.matching.per_scale_heads, groups.msda, cfg.bn_eps,
                    cfg.bn_momentum, reg, rng);
    di_head.build("di_head", dims, cfg.matching.per_scale_heads, groups.di_head, cfg.bn_eps,
                  cfg.bn_momentum, reg, rng);
    int d_total = 0;
    for (int d : dims) d_total += d;
    attention.build("msda_attention", cfg.num_domains, d_total, cfg.reduction, groups.msda, reg,
                    rng);
  }

  Tensor4 to_tensor(const std::vector<Image>& imgs) const {
    return images_to_tensor(imgs, cfg.pixel_mean, cfg.pixel_std);
  }

  NormSelect di_mode(bool train) const {
    switch (cfg.di_norm) {
      case DiNorm::kPlain: return NormSelect::plain(train);
      case DiNorm::kAvgPool: return NormSelect::adaptive_uniform();
      case DiNorm::kDabn: return NormSelect::adaptive();
    }
    return NormSelect::adaptive();
  }

  // ---- feature extraction (eval semantics) ----

  std::vector<ImageFeats> feats_from_taps(const std::vector<Tensor4>& taps) const {
    const int b = taps.empty() ? 0 : taps[0].n;
    std::vector<ImageFeats> out(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      out[static_cast<std::size_t>(i)].reserve(cfg.matching.scales.size());
      for (int sc : cfg.matching.scales)
        out[static_cast<std::size_t>(i)].push_back(
            make_kernels(taps[static_cast<std::size_t>(sc)], i));
    }
    return out;
  }

  // [K][N] kernel sets through every expert
  std::vector<std::vector<ImageFeats>> expert_features(const Tensor4& images) {
    std::vector<std::vector<ImageFeats>> out;
    out.reserve(static_cast<std::size_t>(cfg.num_domains));
    for (int d = 1; d <= cfg.num_domains; ++d)
      out.push_back(feats_from_taps(net.forward(images, NormSelect::expert(d, false))));
    return out;
  }

  std::vector<ImageFeats> di_features(const Tensor4& images) {
    return feats_from_taps(net.forward(images, di_mode(false)));
  }

  // ---- batched scoring (eval mode) ----

  // MSDA path over precomputed per-expert features: rows index queries,
  // cols index galleries.
  Mat ds_scores(const std::vector<std::vector<ImageFeats>>& q_experts,
                const std::vector<std::vector<ImageFeats>>& g_experts) const {
    const auto K = q_experts.size();
    check_arg(K == static_cast<std::size_t>(cfg.num_domains), "expert count mismatch");
    const auto nq = q_experts[0].size(), ng = g_experts[0].size();
    check_arg(nq > 0 && ng > 0, "empty input");
    const auto P = nq * ng;
    const auto dims = response_dims();
    std::vector<std::vector<Mat>> rk(K);  // [K][scale] response rows
    for (std::size_t k = 0; k < K; ++k) {
      rk[k].resize(dims.size());
      for (std::size_t s = 0; s < dims.size(); ++s)
        rk[k][s] = Mat(static_cast<Eigen::Index>(P), dims[s]);
    }
    for (std::size_t q = 0; q < nq; ++q)
      for (std::size_t g = 0; g < ng; ++g) {
        const auto p = static_cast<Eigen::Index>(q * ng + g);
        for (std::size_t k = 0; k < K; ++k) {
          auto rows = pair_response_rows(q_experts[k][q], g_experts[k][g],
                                         cfg.matching.bidirectional);
          for (std::size_t s = 0; s < rows.size(); ++s) rk[k][s].row(p) = rows[s].row(0);
        }
      }
    Vec scores;
    if (cfg.ds_agg == DsAggregation::kVoting) {
      scores = Vec::Zero(static_cast<Eigen::Index>(P));
      for (std::size_t k = 0; k < K; ++k) scores += msda_head.forward_eval(rk[k]);
      scores /= static_cast<double>(K);
    } else {
      Mat alpha;
      if (cfg.ds_agg == DsAggregation::kUniform) {
        alpha = Mat::Constant(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(K),
                              1.0 / static_cast<double>(K));
      } else {
        Mat u(static_cast<Eigen::Index>(P), attention.din);
        Eigen::Index off = 0;
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t s = 0; s < dims.size(); ++s) {
            u.middleCols(off, dims[s]) = rk[k][s];
            off += dims[s];
          }
        alpha = attention.forward(u);
      }
      std::vector<Mat> mixed(dims.size());
      for (std::size_t s = 0; s < dims.size(); ++s) {
        mixed[s] = Mat::Zero(static_cast<Eigen::Index>(P), dims[s]);
        for (std::size_t k = 0; k < K; ++k)
          mixed[s] += rk[k][s].array().colwise() * alpha.col(static_cast<Eigen::Index>(k)).array();
      }
      scores = msda_head.forward_eval(mixed);
    }
    return Eigen::Map<const Mat>(scores.data(), static_cast<Eigen::Index>(nq),
                                 static_cast<Eigen::Index>(ng));
  }

  // MS path over one feature set per image.
  Mat ms_scores(const std::vector<ImageFeats>& q, const std::vector<ImageFeats>& g,
                const HeadStack& head) const {
    const auto nq = q.size(), ng = g.size();
    check_arg(nq > 0 && ng > 0, "empty input");
    const auto dims = response_dims();
    std::vector<Mat> rs(dims.size());
    for (std::size_t s = 0; s < dims.size(); ++s)
      rs[s] = Mat(static_cast<Eigen::Index>(nq * ng), dims[s]);
    for (std::size_t qi = 0; qi < nq; ++qi)
      for (std::size_t gi = 0; gi < ng; ++gi) {
        auto rows = pair_response_rows(q[qi], g[gi], cfg.matching.bidirectional);
        for (std::size_t s = 0; s < rows.size(); ++s)
          rs[s].row(static_cast<Eigen::Index>(qi * ng + gi)) = rows[s].row(0);
      }
    Vec scores = head.forward_eval(rs);
    return Eigen::Map<const Mat>(scores.data(), static_cast<Eigen::Index>(nq),
                                 static_cast<Eigen::Index>(ng));
  }

  // Spec-facing batching wrapper: full score matrix for a stream with labels
  // attached, features extracted once per image.
  SimilarityMatrix pairwise_scores(const std::vector<Image>& query_imgs,
                                   const std::vector<int>& query_ids,
                                   const std::vector<int>& query_cams,
                                   const std::vector<Image>& gallery_imgs,
                                   const std::vector<int>& gallery_ids,
                                   const std::vector<int>& gallery_cams, bool ds_stream) {
    check_arg(!query_imgs.empty() && !gallery_imgs.empty(), "empty input");
    const Tensor4 qt = to_tensor(query_imgs), gt = to_tensor(gallery_imgs);
    SimilarityMatrix out;
    if (ds_stream) {
      out.s = ds_scores(expert_features(qt), expert_features(gt));
    } else {
      out.s = ms_scores(di_features(qt), di_features(gt), di_head);
    }
    out.row_ids = query_ids;
    out.col_ids = gallery_ids;
    out.row_cams = query_cams;
    out.col_cams = gallery_cams;
    return out;
  }

  // ---- training steps ----

  struct StepResult {
    double loss = 0.0;
    double active_fraction = 0.0;
  };

  // Square-batch response rows with the caches needed for backward.
  struct BatchResponses {
    std::vector<ImageFeats> kernels;                  // [B][scale]
    std::vector<std::vector<ScaleResponse>> resp;     // [P][scale]
    std::vector<Mat> rows;                            // [scale] P x D_s
  };

  BatchResponses batch_responses(const std::vector<Tensor4>& taps) const {
    BatchResponses br;
    br.kernels = feats_from_taps(taps);
    const auto b = br.kernels.size();
    const auto dims = response_dims();
    br.rows.resize(dims.size());
    for (std::size_t s = 0; s < dims.size(); ++s)
      br.rows[s] = Mat(static_cast<Eigen::Index>(b * b), dims[s]);
    br.resp.resize(b * b);
    for (std::size_t q = 0; q < b; ++q)
      for (std::size_t g = 0; g < b; ++g) {
        const auto p = q * b + g;
        br.resp[p].resize(dims.size());
        for (std::size_t s = 0; s < dims.size(); ++s) {
          br.resp[p][s] = qaconv_response(br.kernels[q][s], br.kernels[g][s],
                                          cfg.matching.bidirectional);
          br.rows[s].row(static_cast<Eigen::Index>(p)) = br.resp[p][s].r.transpose();
        }
      }
    return br;
  }

  // From per-scale response-row gradients back to tap-tensor gradients.
  std::vector<Tensor4> responses_backward(const BatchResponses& br,
                                          const std::vector<Mat>& drows,
                                          const std::vector<Tensor4>& taps) const {
    const auto b = br.kernels.size();
    // gradient wrt normalized kernels
    std::vector<std::vector<Mat>> dk(b);
    for (std::size_t i = 0; i < b; ++i) {
      dk[i].resize(br.rows.size());
      for (std::size_t s = 0; s < br.rows.size(); ++s)
        dk[i][s] = Mat::Zero(br.kernels[i][s].k.rows(), br.kernels[i][s].k.cols());
    }
    for (std::size_t q = 0; q < b; ++q)
      for (std::size_t g = 0; g < b; ++g) {
        const auto p = q * b + g;
        for (std::size_t s = 0; s < br.rows.size(); ++s) {
          const Vec dr = drows[s].row(static_cast<Eigen::Index>(p)).transpose();
          response_backward(br.resp[p][s], br.kernels[q][s], br.kernels[g][s], dr, dk[q][s],
                            dk[g][s]);
        }
      }
    std::vector<Tensor4> dtaps;
    for (int sc : cfg.matching.scales)
      dtaps.push_back(zeros_like(taps[static_cast<std::size_t>(sc)]));
    // taps not used by matching keep zero gradients
    std::vector<Tensor4> full(taps.size());
    for (std::size_t t = 0; t < taps.size(); ++t) full[t] = zeros_like(taps[t]);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t s = 0; s < br.rows.size(); ++s) {
        const int tap_index = cfg.matching.scales[s];
        kernels_backward(br.kernels[i][s], dk[i][s], full[static_cast<std::size_t>(tap_index)],
                         static_cast<int>(i));
      }
    return full;
  }

  // Phase A: homogeneous batch from domain i through expert i (train-mode
  // DSBN), MS-QAConv scoring, triplet loss. Gradients reach the shared convs,
  // DSBN_i, and the DS head; everything else stays untouched.
  StepResult phase_a_step(const Tensor4& images, const std::vector<int>& ids, int domain,
                          double margin) {
    BackboneCache bc;
    const auto taps = net.forward(images, NormSelect::expert(domain, true), &bc);
    BatchResponses br = batch_responses(taps);
    HeadStackCache hc;
    const Vec scores = ds_head.forward_train(br.rows, hc);
    const auto b = static_cast<Eigen::Index>(ids.size());
    const Mat s = Eigen::Map<const Mat>(scores.data(), b, b);
    TripletResult tr = batch_hard_triplet(s, ids, margin);
    check_arg(std::isfinite(tr.loss), "non-finite loss in phase A");
    const Vec ds = Eigen::Map<const Vec>(tr.ds.data(), b * b);
    const auto drows = ds_head.backward_train(ds, hc, true);
    const auto dtaps = responses_backward(br, drows, taps);
    net.backward(dtaps, bc, true, true);
    return {tr.loss, tr.active_fraction()};
  }

  // Phase B: hybrid batch through every expert on stored statistics; only the
  // MSDA group (attention + head) accumulates gradients.
  StepResult phase_b_step(const Tensor4& images, const std::vector<int>& ids, double margin) {
    const auto K = static_cast<std::size_t>(cfg.num_domains);
    const auto dims = response_dims();
    std::vector<BatchResponses> per_domain(K);
    for (std::size_t k = 0; k < K; ++k)
      per_domain[k] =
          batch_responses(net.forward(images, NormSelect::expert(static_cast<int>(k) + 1, false)));
    const auto b = static_cast<Eigen::Index>(ids.size());
    const auto P = b * b;
    TripletResult tr;
    if (cfg.ds_agg == DsAggregation::kVoting) {
      std::vector<HeadStackCache> hcs(K);
      Vec scores = Vec::Zero(P);
      for (std::size_t k = 0; k < K; ++k)
        scores += msda_head.forward_train(per_domain[k].rows, hcs[k]);
      scores /= static_cast<double>(K);
      const Mat s = Eigen::Map<const Mat>(scores.data(), b, b);
      tr = batch_hard_triplet(s, ids, margin);
      check_arg(std::isfinite(tr.loss), "non-finite loss in phase B");
      const Vec dsv = Eigen::Map<const Vec>(tr.ds.data(), P) / static_cast<double>(K);
      for (std::size_t k = 0; k < K; ++k) msda_head.backward_train(dsv, hcs[k], true);
      return {tr.loss, tr.active_fraction()};
    }
    Mat alpha;
    AttentionCache ac;
    if (cfg.ds_agg == DsAggregation::kUniform) {
      alpha = Mat::Constant(P, static_cast<Eigen::Index>(K), 1.0 / static_cast<double>(K));
    } else {
      Mat u(P, attention.din);
      Eigen::Index off = 0;
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t s = 0; s < dims.size(); ++s) {
          u.middleCols(off, dims[s]) = per_domain[k].rows[s];
          off += dims[s];
        }
      alpha = attention.forward(u, &ac);
    }
    std::vector<Mat> mixed(dims.size());
    for (std::size_t s = 0; s < dims.size(); ++s) {
      mixed[s] = Mat::Zero(P, dims[s]);
      for (std::size_t k = 0; k < K; ++k)
        mixed[s] += per_domain[k].rows[s].array().colwise() *
                    alpha.col(static_cast<Eigen::Index>(k)).array();
    }
    HeadStackCache hc;
    const Vec scores = msda_head.forward_train(mixed, hc);
    const Mat s = Eigen::Map<const Mat>(scores.data(), b, b);
    tr = batch_hard_triplet(s, ids, margin);
    check_arg(std::isfinite(tr.loss), "non-finite loss in phase B");
    const Vec dsv = Eigen::Map<const Vec>(tr.ds.data(), P);
    const auto dmixed = msda_head.backward_train(dsv, hc, true);
    if (cfg.ds_agg == DsAggregation::kAttention) {
      Mat dalpha = Mat::Zero(P, static_cast<Eigen::Index>(K));
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t s = 0; s < dims.size(); ++s)
          dalpha.col(static_cast<Eigen::Index>(k)) +=
              (dmixed[s].array() * per_domain[k].rows[s].array()).rowwise().sum().matrix();
      attention.backward(dalpha, ac, true);
    }
    return {tr.loss, tr.active_fraction()};
  }

  // Phase C: hybrid batch through the invariant stream; DABN weight heads and
  // the DI head train, the trunk and DSBN stay frozen (input gradients still
  // propagate through the stacked sites).
  StepResult phase_c_step(const Tensor4& images, const std::vector<int>& ids, double margin) {
    BackboneCache bc;
    const auto taps = net.forward(images, di_mode(true), &bc);
    BatchResponses br = batch_responses(taps);
    HeadStackCache hc;
    const Vec scores = di_head.forward_train(br.rows, hc);
    const auto b = static_cast<Eigen::Index>(ids.size());
    const Mat s = Eigen::Map<const Mat>(scores.data(), b, b);
    TripletResult tr = batch_hard_triplet(s, ids, margin);
    check_arg(std::isfinite(tr.loss), "non-finite loss in phase C");
    const Vec dsv = Eigen::Map<const Vec>(tr.ds.data(), b * b);
    const auto drows = di_head.backward_train(dsv, hc, true);
    const auto dtaps = responses_backward(br, drows, taps);
    net.backward(dtaps, bc, false, true);
    return {tr.loss, tr.active_fraction()};
  }

  std::set<int> active_groups_phase_a(int domain) const {
    return {groups.backbone_conv, groups.dsbn(domain), groups.ds_head};
  }
  std::set<int> active_groups_phase_b() const { return {groups.msda}; }
  std::set<int> active_groups_phase_c() const {
    switch (cfg.di_norm) {
      case DiNorm::kDabn: return {groups.dabn_heads, groups.di_head};
      case DiNorm::kPlain: return {groups.di_plain_bn, groups.di_head};
      case DiNorm::kAvgPool: return {groups.di_head};
    }
    return {groups.di_head};
  }
};

}  // namespace tal
