#pragma once

#include <set>
#include <string>
#include <vector>

#include "tal/common.hpp"
#include "tal/rng.hpp"

namespace tal {

// Learnable tensor: value, gradient accumulator, SGD momentum buffer.
struct ParamTensor {
  std::string name;
  int group = -1;
  std::vector<double> w, g, m;

  void init(std::string name_, int group_, std::size_t n, double val = 0.0) {
    name = std::move(name_);
    group = group_;
    w.assign(n, val);
    g.assign(n, 0.0);
    m.assign(n, 0.0);
  }

  void init_normal(std::string name_, int group_, std::size_t n, Rng& rng, double stddev) {
    init(std::move(name_), group_, n);
    for (auto& x : w) x = rng.normal(0.0, stddev);
  }

  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

// Non-learnable persistent state (running statistics).
struct StateTensor {
  std::string name;
  int group = -1;
  std::vector<double> v;

  void init(std::string name_, int group_, std::size_t n, double val) {
    name = std::move(name_);
    group = group_;
    v.assign(n, val);
  }
};

// Parameter groups drive the per-phase gradient-stop contract. DSBN gets one
// group per domain so a phase-A step on domain i can leave all other domains
// untouched.
struct GroupIds {
  int backbone_conv = 0;
  int dsbn_first = 1;  // domain i (1-based) -> dsbn_first + i - 1
  int num_domains = 0;
  int ds_head = 0;
  int msda = 0;
  int dabn_heads = 0;
  int di_head = 0;
  int di_plain_bn = 0;
  int count = 0;

  static GroupIds make(int num_domains) {
    GroupIds g;
    g.num_domains = num_domains;
    g.ds_head = g.dsbn_first + num_domains;
    g.msda = g.ds_head + 1;
    g.dabn_heads = g.msda + 1;
    g.di_head = g.dabn_heads + 1;
    g.di_plain_bn = g.di_head + 1;
    g.count = g.di_plain_bn + 1;
    return g;
  }

  int dsbn(int domain) const {  // domain is 1-based
    check_arg(domain >= 1 && domain <= num_domains, "invalid domain index");
    return dsbn_first + domain - 1;
  }
};

struct ParamRegistry {
  std::vector<ParamTensor*> params;
  std::vector<StateTensor*> states;

  void add(ParamTensor& p) { params.push_back(&p); }
  void add(StateTensor& s) { states.push_back(&s); }

  void zero_grads() {
    for (auto* p : params) p->zero_grad();
  }

  // Hash of parameter values, momenta and running state for one group.
  // Gradients are excluded; they are scratch space.
  std::uint64_t group_hash(int group) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto* p : params)
      if (p->group == group) {
        h = fnv1a64(p->name, h);
        h = fnv1a64(p->w, h);
        h = fnv1a64(p->m, h);
      }
    for (const auto* s : states)
      if (s->group == group) {
        h = fnv1a64(s->name, h);
        h = fnv1a64(s->v, h);
      }
    return h;
  }

  std::vector<std::uint64_t> all_group_hashes(int group_count) const {
    std::vector<std::uint64_t> hs(static_cast<std::size_t>(group_count));
    for (int g = 0; g < group_count; ++g) hs[static_cast<std::size_t>(g)] = group_hash(g);
    return hs;
  }
};

// SGD with momentum and L2 weight decay, restricted to the active groups of
// the current training phase.
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 0.0;

  void step(ParamRegistry& reg, const std::set<int>& active_groups, double lr) const {
    for (auto* p : reg.params) {
      if (!active_groups.count(p->group)) continue;
      for (std::size_t i = 0; i < p->w.size(); ++i) {
        const double g = p->g[i] + weight_decay * p->w[i];
        p->m[i] = momentum * p->m[i] + g;
        p->w[i] -= lr * p->m[i];
      }
    }
  }
};

}  // namespace tal
