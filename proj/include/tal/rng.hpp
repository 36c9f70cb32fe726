#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <vector>

namespace tal {

// Deterministic RNG wrapper. All draw functions are hand-rolled on top of
// mt19937_64 so that the stream is fully defined by this code (std
// distributions are implementation-defined) and the state round-trips
// through checkpoints exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(gen_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, regenerated per call (no cached spare -> serializable state).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream, e.g. one per concern (init, sampler, ...).
  Rng child(std::uint64_t salt) {
    return Rng(gen_() ^ (salt * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull));
  }

  void save(std::ostream& os) const { os << gen_; }
  void load(std::istream& is) { is >> gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace tal
