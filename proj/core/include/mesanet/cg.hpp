#pragma once

// Conjugate gradient for the regularized systems (H + Lambda) x = q that the
// Mesa layer solves at every timestep.
//
// The starting point is x0 = q / diag(A) where A is the applied operator
// (the diagonal of the current step, including any rank-one update). The
// iteration stops when ||r_k|| <= eps * ||r_0|| or after max_iters operator
// applications; a zero initial residual counts as converged in 0 iterations.

#include <optional>
#include <stdexcept>
#include <vector>

#include "mesanet/linalg.hpp"
#include "mesanet/rng.hpp"

namespace mesanet {

enum class CgInit {
  diagonal,  // x0 = q / diag(A)
  query,     // x0 = q
};

struct CgOptions {
  double eps = 1e-6;
  int max_iters = 30;
  CgInit init = CgInit::diagonal;
};

struct CgReport {
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
  std::optional<double> condition;
};

class NotPositiveDefinite : public NumericError {
 public:
  explicit NotPositiveDefinite(const std::string& what) : NumericError(what) {}
};

// gamma * H + k k^T + diag(lambda), or H + diag(lambda) without an update.
struct SpdOperator {
  Mat base;
  Vec lambda;
  std::optional<double> gamma;
  std::optional<Vec> key;

  Eigen::Index dim() const { return base.rows(); }
  Vec apply(const Vec& p) const;
  Vec diagonal() const;
  Mat dense() const;
};

struct CgResult {
  Vec x;
  CgReport report;
};

CgResult cg_solve(const SpdOperator& op, const Vec& q, const CgOptions& opts);

// Decay structure of one chunk of C steps following boundary c:
//   within(i, j) = prod_{s=i+1..j} gamma_{c+1+s} for j >= i, else 0
//   boundary(j)  = prod_{s=0..j}   gamma_{c+1+s}
struct DecayChunk {
  Mat within;
  Vec boundary;

  static DecayChunk from_gates(const Vec& gamma);
  Eigen::Index size() const { return boundary.size(); }
};

struct CgChunkResult {
  Mat x;
  std::vector<CgReport> reports;
};

// Solves (H_t + Lambda) x_t = rhs_t for every step t of a chunk, where
//   H_t = boundary(t) * h_boundary + sum_{i<=t} within(i, t) k_i k_i^T
// without materializing H_t. All columns share batched operator applications.
CgChunkResult cg_solve_chunk(const Mat& h_boundary, const Mat& keys, const DecayChunk& decay, const Vec& lambda,
                             const Mat& rhs, const CgOptions& opts);

// Applies the per-column operators of a chunk to a block of directions.
Mat chunk_operator_apply(const Mat& h_boundary, const Mat& keys, const DecayChunk& decay, const Vec& lambda,
                         const Mat& p);

// lambda_max by 50 power iterations over lambda_min from the Lanczos
// tridiagonal that `iters` CG steps build. Always >= 1.
double estimate_condition(const SpdOperator& op, int iters, Rng& rng);

}  // namespace mesanet
