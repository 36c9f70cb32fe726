#include <catch2/catch_amalgamated.hpp>

#include "tal/normalization.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

using namespace tal;
using testutil::random_tensor;

namespace {

struct BankFixture {
  ParamRegistry reg;
  GroupIds groups;
  DsbnBank bank;
  Rng rng{42};

  BankFixture(int channels, int num_domains, double eps = 1e-5, double momentum = 0.1)
      : groups(GroupIds::make(num_domains)) {
    bank.build("bank", channels, num_domains, eps, momentum, reg,
               [this](int d) { return groups.dsbn(d); });
  }
};

struct DabnFixture : BankFixture {
  DabnHead head;

  DabnFixture(int channels, int num_domains, int reduction = 16)
      : BankFixture(channels, num_domains) {
    head.build("dabn", channels, num_domains, reduction, groups.dabn_heads, reg, rng);
  }

  void randomize_bank() {
    for (int i = 0; i < bank.num_domains; ++i)
      for (int c = 0; c < bank.channels; ++c) {
        bank.gamma[i].w[c] = rng.uniform(0.5, 2.0);
        bank.beta[i].w[c] = rng.normal(0.0, 0.5);
        bank.run_mean[i].v[c] = rng.normal(0.0, 0.5);
        bank.run_var[i].v[c] = rng.uniform(0.3, 2.0);
      }
  }
};

}  // namespace

TEST_CASE("dsbn eval with identity statistics", "[normalization]") {
  BankFixture f(3, 2);
  Rng rng(1);
  Tensor4 x = random_tensor(2, 3, 4, 4, rng);
  Tensor4 y = f.bank.forward_eval(x, 1);
  const double scale = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < x.v.size(); ++i)
    REQUIRE(y.v[i] == Catch::Approx(x.v[i] * scale).margin(1e-12));
}

TEST_CASE("dsbn eval hand case", "[normalization]") {
  BankFixture f(1, 1);
  f.bank.gamma[0].w[0] = 3.0;
  f.bank.beta[0].w[0] = 0.5;
  f.bank.run_mean[0].v[0] = 1.0;
  f.bank.run_var[0].v[0] = 4.0;
  Tensor4 x(1, 1, 1, 1);
  x.v[0] = 2.0;
  Tensor4 y = f.bank.forward_eval(x, 1);
  REQUIRE(y.v[0] == Catch::Approx(3.0 * (2.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5).margin(1e-12));
  REQUIRE(y.v[0] == Catch::Approx(1.99999625).margin(1e-7));
}

TEST_CASE("dsbn train normalizes to (beta, gamma^2)", "[normalization]") {
  BankFixture f(3, 2);
  for (int c = 0; c < 3; ++c) {
    f.bank.gamma[1].w[c] = 1.5 + 0.25 * c;
    f.bank.beta[1].w[c] = -0.5 + 0.5 * c;
  }
  Rng rng(7);
  Tensor4 x = random_tensor(8, 3, 6, 5, rng, 2.0);
  for (auto& v : x.v) v += 3.0;
  Tensor4 y = f.bank.forward_train(x, 2, nullptr);
  const int plane = y.plane(), count = y.n * plane;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int b = 0; b < y.n; ++b) {
      const double* p = y.channel(b, c);
      for (int i = 0; i < plane; ++i) {
        sum += p[i];
        sq += p[i] * p[i];
      }
    }
    const double mean = sum / count, var = sq / count - mean * mean;
    REQUIRE(mean == Catch::Approx(f.bank.beta[1].w[c]).margin(1e-9));
    REQUIRE(var == Catch::Approx(f.bank.gamma[1].w[c] * f.bank.gamma[1].w[c]).epsilon(1e-3));
  }
}

TEST_CASE("dsbn train matches scalar oracle and updates running stats", "[normalization]") {
  BankFixture f(2, 1);
  f.bank.gamma[0].w = {1.3, 0.7};
  f.bank.beta[0].w = {0.2, -0.4};
  Rng rng(3);
  Tensor4 x = random_tensor(3, 2, 2, 2, rng);
  // oracle layout
  std::vector<std::vector<std::vector<double>>> xo(3,
      std::vector<std::vector<double>>(2, std::vector<double>(4)));
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 4; ++i) xo[b][c][i] = x.channel(b, c)[i];
  auto yo = oracle::bn_train_scalar(xo, f.bank.gamma[0].w, f.bank.beta[0].w, 1e-5);
  Tensor4 y = f.bank.forward_train(x, 1, nullptr);
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 4; ++i)
        REQUIRE(y.channel(b, c)[i] == Catch::Approx(yo[b][c][i]).margin(1e-9));
  // momentum 0.1 update from (0, 1) defaults
  for (int c = 0; c < 2; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 4; ++i) {
        sum += xo[b][c][i];
        sq += xo[b][c][i] * xo[b][c][i];
      }
    const double mean = sum / 12.0;
    const double var = sq / 12.0 - mean * mean;
    REQUIRE(f.bank.run_mean[0].v[c] == Catch::Approx(0.1 * mean).margin(1e-12));
    REQUIRE(f.bank.run_var[0].v[c] ==
            Catch::Approx(0.9 + 0.1 * var * 12.0 / 11.0).margin(1e-12));
  }
}

TEST_CASE("dsbn errors", "[normalization]") {
  BankFixture f(3, 2);
  Rng rng(1);
  Tensor4 x = random_tensor(1, 3, 2, 2, rng);
  Tensor4 bad = random_tensor(1, 4, 2, 2, rng);
  REQUIRE_THROWS_AS(f.bank.forward_eval(x, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(f.bank.forward_eval(x, 3), std::invalid_argument);
  REQUIRE_THROWS_AS(f.bank.forward_eval(bad, 1), std::invalid_argument);
}

TEST_CASE("dabn weights: zero W2 gives uniform, K=1 gives one", "[normalization]") {
  DabnFixture f(8, 3, 4);
  std::fill(f.head.w2.w.begin(), f.head.w2.w.end(), 0.0);
  std::fill(f.head.b2.w.begin(), f.head.b2.w.end(), 0.0);
  Rng rng(5);
  Tensor4 x = random_tensor(4, 8, 3, 3, rng);
  Mat a = f.head.weights(x);
  for (int b = 0; b < 4; ++b)
    for (int k = 0; k < 3; ++k) REQUIRE(a(b, k) == Catch::Approx(1.0 / 3.0).margin(1e-12));

  DabnFixture f1(8, 1, 4);
  Mat a1 = f1.head.weights(x);
  for (int b = 0; b < 4; ++b) REQUIRE(a1(b, 0) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("dabn weights match scalar SE oracle", "[normalization]") {
  DabnFixture f(6, 3, 2);
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    Tensor4 x = random_tensor(3, 6, 2, 4, rng);
    Mat a = f.head.weights(x);
    for (int b = 0; b < 3; ++b) {
      std::vector<double> gp(6, 0.0);
      for (int c = 0; c < 6; ++c) {
        const double* p = x.channel(b, c);
        for (int i = 0; i < 8; ++i) gp[c] += p[i];
        gp[c] /= 8.0;
      }
      auto ao = oracle::se_weights_scalar(gp, f.head.w1.w, f.head.b1.w, f.head.w2.w, f.head.b2.w);
      double row_sum = 0.0;
      for (int k = 0; k < 3; ++k) {
        REQUIRE(a(b, k) == Catch::Approx(ao[k]).margin(1e-9));
        REQUIRE(a(b, k) >= 0.0);
        row_sum += a(b, k);
      }
      REQUIRE(row_sum == Catch::Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("dabn K=1 equals dsbn eval", "[normalization]") {
  DabnFixture f(5, 1, 2);
  f.randomize_bank();
  Rng rng(9);
  Tensor4 x = random_tensor(3, 5, 4, 2, rng);
  Tensor4 yd = f.head.forward(x, f.bank);
  Tensor4 ye = f.bank.forward_eval(x, 1);
  REQUIRE(testutil::max_abs_diff(yd, ye) < 1e-12);
}

TEST_CASE("dabn one-hot via bias override equals selected branch", "[normalization]") {
  DabnFixture f(5, 3, 2);
  f.randomize_bank();
  std::fill(f.head.w2.w.begin(), f.head.w2.w.end(), 0.0);
  std::fill(f.head.b2.w.begin(), f.head.b2.w.end(), 0.0);
  f.head.b2.w[1] = 100.0;  // domain 2 wins with weight 1 - O(e^-100)
  Rng rng(13);
  Tensor4 x = random_tensor(2, 5, 3, 3, rng);
  Tensor4 yd = f.head.forward(x, f.bank);
  Tensor4 ye = f.bank.forward_eval(x, 2);
  REQUIRE(testutil::max_abs_diff(yd, ye) < 1e-9);
}

TEST_CASE("dabn with identical branches is alpha-independent", "[normalization]") {
  DabnFixture f(4, 2, 2);
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) {
      f.bank.gamma[i].w[c] = 1.7;
      f.bank.beta[i].w[c] = 0.3;
      f.bank.run_mean[i].v[c] = 0.1;
      f.bank.run_var[i].v[c] = 1.2;
    }
  Rng rng(17);
  Tensor4 x = random_tensor(3, 4, 2, 2, rng);
  Tensor4 yd = f.head.forward(x, f.bank);
  Tensor4 ye = f.bank.forward_eval(x, 1);
  REQUIRE(testutil::max_abs_diff(yd, ye) < 1e-12);
}

TEST_CASE("dabn output is the alpha mixture of branch outputs", "[normalization]") {
  DabnFixture f(6, 3, 2);
  f.randomize_bank();
  Rng rng(19);
  Tensor4 x = random_tensor(4, 6, 3, 2, rng);
  Mat a = f.head.weights(x);
  Tensor4 yd = f.head.forward(x, f.bank);
  Tensor4 mix(4, 6, 3, 2);
  for (int i = 1; i <= 3; ++i) {
    Tensor4 yi = f.bank.forward_eval(x, i);
    for (int b = 0; b < 4; ++b) {
      const double w = a(b, i - 1);
      double* dst = mix.image(b);
      const double* src = yi.image(b);
      for (int j = 0; j < mix.per_image(); ++j) dst[j] += w * src[j];
    }
  }
  REQUIRE(testutil::max_abs_diff(yd, mix) < 1e-6);
}

TEST_CASE("dabn head gradients match finite differences", "[normalization]") {
  DabnFixture f(4, 3, 16);  // bottleneck rounds up to 1
  f.randomize_bank();
  Rng rng(23);
  Tensor4 x = random_tensor(2, 4, 3, 3, rng);
  Tensor4 cot = random_tensor(2, 4, 3, 3, rng);  // fixed cotangent

  auto loss = [&]() {
    Tensor4 y = f.head.forward(x, f.bank);
    double s = 0.0;
    for (std::size_t i = 0; i < y.v.size(); ++i) s += y.v[i] * cot.v[i];
    return s;
  };

  DabnCache cache;
  Tensor4 y = f.head.forward(x, f.bank, &cache);
  (void)y;
  f.head.w1.zero_grad();
  f.head.b1.zero_grad();
  f.head.w2.zero_grad();
  f.head.b2.zero_grad();
  Tensor4 dx = f.head.backward(cot, f.bank, cache, true);

  for (auto* p : {&f.head.w1, &f.head.b1, &f.head.w2, &f.head.b2}) {
    for (std::size_t i = 0; i < p->w.size(); ++i) {
      const double fd = oracle::fdiff(loss, p->w[i]);
      REQUIRE(oracle::rel_err(p->g[i], fd) < 1e-4);
    }
  }
  // input gradient as well
  for (std::size_t i = 0; i < x.v.size(); i += 7) {
    const double fd = oracle::fdiff(loss, x.v[i]);
    REQUIRE(oracle::rel_err(dx.v[i], fd) < 1e-4);
  }
}

TEST_CASE("dsbn train backward matches finite differences", "[normalization]") {
  BankFixture f(3, 2);
  for (int c = 0; c < 3; ++c) {
    f.bank.gamma[1].w[c] = 1.2 + 0.1 * c;
    f.bank.beta[1].w[c] = -0.2 + 0.2 * c;
  }
  Rng rng(29);
  Tensor4 x = random_tensor(3, 3, 2, 3, rng);
  Tensor4 cot = random_tensor(3, 3, 2, 3, rng);

  auto loss = [&]() {
    // fresh bank copy so running-stat updates do not leak between calls
    DsbnBank tmp = f.bank;
    Tensor4 y = tmp.forward_train(x, 2, nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < y.v.size(); ++i) s += y.v[i] * cot.v[i];
    return s;
  };

  BnCache cache;
  DsbnBank work = f.bank;
  work.forward_train(x, 2, &cache);
  Tensor4 dx = work.backward_train(cot, 2, cache, true);
  for (int c = 0; c < 3; ++c) {
    const double fg = oracle::fdiff(loss, f.bank.gamma[1].w[c]);
    const double fb = oracle::fdiff(loss, f.bank.beta[1].w[c]);
    REQUIRE(oracle::rel_err(work.gamma[1].g[c], fg) < 1e-4);
    REQUIRE(oracle::rel_err(work.beta[1].g[c], fb) < 1e-4);
  }
  for (std::size_t i = 0; i < x.v.size(); i += 5) {
    const double fd = oracle::fdiff(loss, x.v[i]);
    REQUIRE(oracle::rel_err(dx.v[i], fd) < 1e-4);
  }
}
