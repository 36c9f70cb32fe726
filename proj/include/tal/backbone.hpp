#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tal/conv.hpp"
#include "tal/normalization.hpp"

namespace tal {

struct BackboneConfig {
  int blocks = 4;
  std::vector<int> channels{32, 32, 64, 64};
  std::vector<int> strides{2, 2, 2, 1};
  std::vector<int> taps{2, 4};  // 1-based block indices feeding the matcher
  int in_h = 96, in_w = 32;

  int num_stages() const { return static_cast<int>(taps.size()); }

  void validate() const {
    check_config(blocks >= 1, "backbone.blocks must be >= 1");
    check_config(static_cast<int>(channels.size()) == blocks, "backbone.channels length != blocks");
    check_config(static_cast<int>(strides.size()) == blocks, "backbone.strides length != blocks");
    for (int c : channels) check_config(c > 0, "backbone channel counts must be > 0");
    for (int s : strides) check_config(s >= 1, "backbone strides must be >= 1");
    check_config(taps.size() >= 2, "backbone.taps needs >= 2 stages");
    for (std::size_t i = 0; i < taps.size(); ++i) {
      check_config(taps[i] >= 1 && taps[i] <= blocks, "backbone tap out of range");
      if (i > 0) check_config(taps[i] > taps[i - 1], "backbone taps must be increasing");
    }
    check_config(in_h >= 8 && in_w >= 8, "input resolution too small");
  }

  // spatial size of each block output
  std::vector<std::pair<int, int>> block_dims() const {
    std::vector<std::pair<int, int>> d;
    int h = in_h, w = in_w;
    for (int i = 0; i < blocks; ++i) {
      h = Conv2d::out_dim(h, strides[static_cast<std::size_t>(i)]);
      w = Conv2d::out_dim(w, strides[static_cast<std::size_t>(i)]);
      d.emplace_back(h, w);
    }
    return d;
  }
};

// Multi-stage feature maps for one batch. domain: 1..K for an expert pass,
// 0 for hybrid/invariant passes.
struct FeatureMapSet {
  std::vector<Tensor4> stages;
  int domain = 0;
};

// How every normalization site behaves during one forward pass.
struct NormSelect {
  enum Kind { kExpert, kAdaptive, kAdaptiveUniform, kPlain } kind = kExpert;
  int domain = 1;     // for kExpert
  bool train = false;  // batch stats + running update (kExpert/kPlain only)

  static NormSelect expert(int dom, bool train_) { return {kExpert, dom, train_}; }
  static NormSelect adaptive() { return {kAdaptive, 1, false}; }
  static NormSelect adaptive_uniform() { return {kAdaptiveUniform, 1, false}; }
  static NormSelect plain(bool train_) { return {kPlain, 1, train_}; }
};

struct BackboneCache {
  NormSelect mode;
  std::vector<ConvCache> conv;
  std::vector<BnCache> bn;
  std::vector<DabnCache> dabn;
  std::vector<Tensor4> pre_norm;   // conv outputs, before normalization
  std::vector<Tensor4> pre_relu;   // normalization outputs, before ReLU
};

// Small plain CNN: blocks of conv3x3 -> normalization site -> ReLU, with the
// configured blocks tapped as matching stages. All convolutional parameters
// are shared across domain experts; each normalization site owns a DSBN bank,
// a DABN head, and (optionally) a single plain BN set for the invariant-stream
// ablation.
struct Backbone {
  BackboneConfig cfg;
  int num_domains = 0;

  std::vector<Conv2d> convs;
  std::vector<DsbnBank> banks;       // one per site
  std::vector<DabnHead> dabn;        // one per site
  std::vector<DsbnBank> plain_bn;    // one per site, K=1; empty unless enabled

  void build(const BackboneConfig& cfg_, int num_domains_, int reduction, double bn_eps,
             double bn_momentum, bool with_plain_di, const GroupIds& groups, ParamRegistry& reg,
             Rng& rng) {
    cfg = cfg_;
    cfg.validate();
    check_arg(num_domains_ >= 1, "need at least one domain");
    num_domains = num_domains_;
    convs.resize(static_cast<std::size_t>(cfg.blocks));
    banks.resize(static_cast<std::size_t>(cfg.blocks));
    dabn.resize(static_cast<std::size_t>(cfg.blocks));
    if (with_plain_di) plain_bn.resize(static_cast<std::size_t>(cfg.blocks));
    int cin = 3;
    for (int i = 0; i < cfg.blocks; ++i) {
      const auto si = static_cast<std::size_t>(i);
      const std::string prefix = "backbone.block" + std::to_string(i + 1);
      convs[si].build(prefix + ".conv", cin, cfg.channels[si], cfg.strides[si],
                      groups.backbone_conv, reg, rng);
      banks[si].build(prefix + ".dsbn", cfg.channels[si], num_domains, bn_eps, bn_momentum, reg,
                      [&groups](int dom) { return groups.dsbn(dom); });
      dabn[si].build(prefix + ".dabn", cfg.channels[si], num_domains, reduction,
                     groups.dabn_heads, reg, rng);
      if (with_plain_di)
        plain_bn[si].build(prefix + ".dibn", cfg.channels[si], 1, bn_eps, bn_momentum, reg,
                           [&groups](int) { return groups.di_plain_bn; });
      cin = cfg.channels[si];
    }
  }

  void check_input(const Tensor4& x) const {
    check_arg(x.c == 3, "backbone expects 3-channel input");
    check_arg(x.h == cfg.in_h && x.w == cfg.in_w,
              "input resolution mismatch: got " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                  ", configured " + std::to_string(cfg.in_h) + "x" + std::to_string(cfg.in_w));
  }

  std::vector<Tensor4> forward(const Tensor4& x, const NormSelect& mode,
                               BackboneCache* cache = nullptr) {
    check_input(x);
    if (mode.kind == NormSelect::kExpert) banks[0].check_domain(mode.domain);
    if (cache) {
      cache->mode = mode;
      cache->conv.assign(static_cast<std::size_t>(cfg.blocks), {});
      cache->bn.assign(static_cast<std::size_t>(cfg.blocks), {});
      cache->dabn.assign(static_cast<std::size_t>(cfg.blocks), {});
      cache->pre_norm.assign(static_cast<std::size_t>(cfg.blocks), {});
      cache->pre_relu.assign(static_cast<std::size_t>(cfg.blocks), {});
    }
    std::vector<Tensor4> taps;
    Tensor4 cur = x;
    for (int i = 0; i < cfg.blocks; ++i) {
      const auto si = static_cast<std::size_t>(i);
      Tensor4 z = convs[si].forward(cur, cache ? &cache->conv[si] : nullptr);
      if (cache) cache->pre_norm[si] = z;
      Tensor4 y;
      switch (mode.kind) {
        case NormSelect::kExpert:
          y = mode.train ? banks[si].forward_train(z, mode.domain, cache ? &cache->bn[si] : nullptr)
                         : banks[si].forward_eval(z, mode.domain);
          break;
        case NormSelect::kAdaptive:
          y = dabn[si].forward(z, banks[si], cache ? &cache->dabn[si] : nullptr, false);
          break;
        case NormSelect::kAdaptiveUniform:
          y = dabn[si].forward(z, banks[si], cache ? &cache->dabn[si] : nullptr, true);
          break;
        case NormSelect::kPlain:
          check_arg(!plain_bn.empty(), "plain DI normalization not enabled");
          y = mode.train ? plain_bn[si].forward_train(z, 1, cache ? &cache->bn[si] : nullptr)
                         : plain_bn[si].forward_eval(z, 1);
          break;
      }
      if (cache) cache->pre_relu[si] = y;
      for (auto& v : y.v) v = v > 0.0 ? v : 0.0;
      if (std::find(cfg.taps.begin(), cfg.taps.end(), i + 1) != cfg.taps.end()) taps.push_back(y);
      cur = std::move(y);
    }
    return taps;
  }

  // Reverse pass. dtaps aligns with cfg.taps. conv_param_grads /
  // norm_param_grads gate which groups accumulate; input gradients always
  // propagate so stacked DABN sites can train.
  void backward(const std::vector<Tensor4>& dtaps, BackboneCache& cache, bool conv_param_grads,
                bool norm_param_grads) {
    check_arg(dtaps.size() == cfg.taps.size(), "tap gradient count mismatch");
    Tensor4 dchain;  // gradient flowing from block i+1 into block i's output
    bool have_chain = false;
    for (int i = cfg.blocks - 1; i >= 0; --i) {
      const auto si = static_cast<std::size_t>(i);
      // combine chain gradient with tap gradient at this block
      Tensor4 dout;
      const auto tap_it = std::find(cfg.taps.begin(), cfg.taps.end(), i + 1);
      if (tap_it != cfg.taps.end()) {
        const auto ti = static_cast<std::size_t>(tap_it - cfg.taps.begin());
        dout = dtaps[ti];
        if (have_chain)
          for (std::size_t j = 0; j < dout.v.size(); ++j) dout.v[j] += dchain.v[j];
      } else if (have_chain) {
        dout = std::move(dchain);
      } else {
        // blocks above the last tap never influence the loss
        continue;
      }
      // ReLU
      const Tensor4& pre = cache.pre_relu[si];
      for (std::size_t j = 0; j < dout.v.size(); ++j)
        if (pre.v[j] <= 0.0) dout.v[j] = 0.0;
      // normalization site
      Tensor4 dz;
      switch (cache.mode.kind) {
        case NormSelect::kExpert:
          dz = cache.mode.train
                   ? banks[si].backward_train(dout, cache.mode.domain, cache.bn[si],
                                              norm_param_grads)
                   : banks[si].backward_eval(dout, cache.mode.domain);
          break;
        case NormSelect::kAdaptive:
          dz = dabn[si].backward(dout, banks[si], cache.dabn[si], norm_param_grads, false);
          break;
        case NormSelect::kAdaptiveUniform:
          dz = dabn[si].backward(dout, banks[si], cache.dabn[si], false, true);
          break;
        case NormSelect::kPlain:
          dz = cache.mode.train
                   ? plain_bn[si].backward_train(dout, 1, cache.bn[si], norm_param_grads)
                   : plain_bn[si].backward_eval(dout, 1);
          break;
      }
      dchain = convs[si].backward(dz, cache.conv[si], conv_param_grads);
      have_chain = true;
    }
  }

  // Spec-facing extraction (eval semantics). selector: 1..K for one expert,
  // kAllExperts for all of them, kInvariant for the DABN stream.
  static constexpr int kAllExperts = -1;
  static constexpr int kInvariant = 0;

  std::vector<FeatureMapSet> extract(const Tensor4& images, int selector) {
    std::vector<FeatureMapSet> out;
    if (selector == kAllExperts) {
      for (int d = 1; d <= num_domains; ++d)
        out.push_back({forward(images, NormSelect::expert(d, false)), d});
    } else if (selector == kInvariant) {
      out.push_back({forward(images, NormSelect::adaptive()), 0});
    } else {
      out.push_back({forward(images, NormSelect::expert(selector, false)), selector});
    }
    return out;
  }
};

}  // namespace tal
