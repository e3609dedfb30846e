#ifndef TOXLENS_RNG_HPP_
#define TOXLENS_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace toxlens {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are hand-rolled because std:: distributions are
// implementation-defined and would break byte-identical outputs across
// toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of entropy.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (the sine half is discarded so the
  // draw count stays predictable).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Inclusive range, rejection-sampled to stay unbiased.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
    std::uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return lo + static_cast<int>(x % span);
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Derive an independent stream, e.g. one per planted layer.
  Rng fork(std::uint64_t stream) {
    return Rng(gen_() ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace toxlens

#endif  // TOXLENS_RNG_HPP_
