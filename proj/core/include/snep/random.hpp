#pragma once

#include <cstdint>
#include <random>

namespace snep {

/// Deterministic random source. Copying a stream copies its position, so two
/// copies produce identical draws.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed = 1) : engine_(seed) {}

  double normal() { return std::normal_distribution<double>{}(engine_); }
  double uniform() { return std::uniform_real_distribution<double>{}(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>{lo, hi}(engine_);
  }
  std::uint64_t next() { return engine_(); }
  std::size_t below(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>{0, n - 1}(engine_);
  }

  /// Independent child stream keyed by (seed, tag); does not advance *this.
  static SeedStream derive(std::uint64_t seed, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
                      0x5eedu};
    SeedStream out;
    out.engine_.seed(seq);
    return out;
  }

  std::mt19937_64& engine() { return engine_; }

  friend bool operator==(const SeedStream& a, const SeedStream& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace snep
