#include "mesanet/rng.hpp"

#include <cmath>
#include <numbers>

namespace mesanet {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng Rng::derive(std::string_view name) const {
  // splitmix64 finalizer over (seed, name) so sibling streams decorrelate.
  std::uint64_t z = seed_ ^ fnv1a64(name);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return Rng(z);
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return engine_();
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) return 0;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Vec Rng::normal_vec(Eigen::Index n, double stddev) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = stddev * normal();
  return v;
}

Mat Rng::normal_mat(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat m(rows, cols);
  // Fill row by row so the draw order matches row-major parameter storage.
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * normal();
  return m;
}

Vec Rng::unit_vec(Eigen::Index n) {
  Vec v = normal_vec(n);
  return v / v.norm();
}

}  // namespace mesanet
