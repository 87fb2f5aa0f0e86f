#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "mesanet/linalg.hpp"

namespace mesanet {

// Seeded stream with platform-independent draws. The engine is the standard
// mt19937_64 (its output sequence is fixed by the standard); the distributions
// are implemented here because std:: distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  // Independent stream for a named purpose ("data", "init", "sweep", ...).
  Rng derive(std::string_view name) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  Vec normal_vec(Eigen::Index n, double stddev = 1.0);
  Mat normal_mat(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);
  Vec unit_vec(Eigen::Index n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t fnv1a64(std::string_view s);

}  // namespace mesanet
