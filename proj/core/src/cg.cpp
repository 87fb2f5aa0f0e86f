#include "mesanet/cg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mesanet {

Vec SpdOperator::apply(const Vec& p) const {
  Vec out = gamma ? Vec(*gamma * (base * p)) : Vec(base * p);
  if (key) out.noalias() += *key * key->dot(p);
  out.array() += lambda.array() * p.array();
  return out;
}

Vec SpdOperator::diagonal() const {
  Vec d = base.diagonal();
  if (gamma) d *= *gamma;
  if (key) d.array() += key->array().square();
  return d + lambda;
}

Mat SpdOperator::dense() const {
  Mat a = gamma ? Mat(*gamma * base) : base;
  if (key) a.noalias() += *key * key->transpose();
  a.diagonal() += lambda;
  return a;
}

namespace {

void check_inputs(const Vec& lambda, Eigen::Index dim, const CgOptions& opts) {
  if (lambda.size() != dim) throw ShapeError("cg: regularizer length does not match operator dimension");
  if (opts.eps < 0) throw std::invalid_argument("cg: eps must be >= 0");
  if (opts.max_iters < 0) throw std::invalid_argument("cg: max_iters must be >= 0");
}

[[noreturn]] void throw_not_pd(double pap, int iteration) {
  std::ostringstream os;
  os << "cg: operator lost positive definiteness (p^T A p = " << pap << " at iteration " << iteration << ")";
  throw NotPositiveDefinite(os.str());
}

}  // namespace

CgResult cg_solve(const SpdOperator& op, const Vec& q, const CgOptions& opts) {
  check_inputs(op.lambda, op.dim(), opts);
  if (q.size() != op.dim()) throw ShapeError("cg_solve: right-hand side has wrong length");
  if (!q.allFinite()) throw NumericError("cg_solve: non-finite right-hand side");

  CgResult out;
  Vec& x = out.x;
  x = opts.init == CgInit::diagonal ? Vec(q.array() / op.diagonal().array()) : q;
  Vec r = q - op.apply(x);
  Vec p = r;
  double delta_old = r.squaredNorm();
  const double delta0 = delta_old;
  double delta = delta_old;

  int k = 0;
  if (delta0 > 0) {
    while (k < opts.max_iters) {
      const Vec ap = op.apply(p);
      const double pap = p.dot(ap);
      if (!(pap > 0)) throw_not_pd(pap, k);
      const double alpha = delta_old / pap;
      x.noalias() += alpha * p;
      r.noalias() -= alpha * ap;
      delta = r.squaredNorm();
      ++k;
      if (delta == 0.0 || std::sqrt(delta) <= opts.eps * std::sqrt(delta0)) break;
      p = r + (delta / delta_old) * p;
      delta_old = delta;
    }
  }
  out.report.iterations = k;
  out.report.relative_residual = delta0 > 0 ? std::sqrt(delta / delta0) : 0.0;
  out.report.converged = delta0 == 0 || out.report.relative_residual <= opts.eps;
  return out;
}

DecayChunk DecayChunk::from_gates(const Vec& gamma) {
  const Eigen::Index n = gamma.size();
  DecayChunk d;
  d.within = Mat::Zero(n, n);
  d.boundary.resize(n);
  double run = 1.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    run *= gamma[j];
    d.boundary[j] = run;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    double z = 1.0;
    d.within(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      z *= gamma[j];
      d.within(i, j) = z;
    }
  }
  return d;
}

Mat chunk_operator_apply(const Mat& h_boundary, const Mat& keys, const DecayChunk& decay, const Vec& lambda,
                         const Mat& p) {
  Mat out = (h_boundary * p) * decay.boundary.asDiagonal();
  const Mat scores = decay.within.cwiseProduct(keys.transpose() * p);
  out.noalias() += keys * scores;
  out.array() += p.array().colwise() * lambda.array();
  return out;
}

CgChunkResult cg_solve_chunk(const Mat& h_boundary, const Mat& keys, const DecayChunk& decay, const Vec& lambda,
                             const Mat& rhs, const CgOptions& opts) {
  const Eigen::Index n = h_boundary.rows();
  const Eigen::Index cols = rhs.cols();
  check_inputs(lambda, n, opts);
  if (keys.rows() != n || keys.cols() != cols || rhs.rows() != n || decay.size() != cols) {
    throw ShapeError("cg_solve_chunk: inconsistent chunk shapes");
  }
  if (!rhs.allFinite()) throw NumericError("cg_solve_chunk: non-finite right-hand side");

  CgChunkResult out;
  out.reports.resize(static_cast<std::size_t>(cols));
  Mat& x = out.x;
  if (opts.init == CgInit::diagonal) {
    Mat diag = h_boundary.diagonal() * decay.boundary.transpose();
    diag.noalias() += keys.cwiseAbs2() * decay.within;
    diag.colwise() += lambda;
    x = rhs.cwiseQuotient(diag);
  } else {
    x = rhs;
  }
  Mat r = rhs - chunk_operator_apply(h_boundary, keys, decay, lambda, x);
  Mat p = r;
  Vec delta_old = r.colwise().squaredNorm().transpose();
  const Vec delta0 = delta_old;
  Vec delta = delta_old;
  std::vector<char> active(static_cast<std::size_t>(cols));
  std::vector<int> iters(static_cast<std::size_t>(cols), 0);
  for (Eigen::Index j = 0; j < cols; ++j) active[j] = delta0[j] > 0 && opts.max_iters > 0;

  for (int k = 0; k < opts.max_iters; ++k) {
    if (std::none_of(active.begin(), active.end(), [](char a) { return a != 0; })) break;
    const Mat ap = chunk_operator_apply(h_boundary, keys, decay, lambda, p);
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (!active[j]) continue;
      const double pap = p.col(j).dot(ap.col(j));
      if (!(pap > 0)) throw_not_pd(pap, k);
      const double alpha = delta_old[j] / pap;
      x.col(j).noalias() += alpha * p.col(j);
      r.col(j).noalias() -= alpha * ap.col(j);
      delta[j] = r.col(j).squaredNorm();
      ++iters[j];
      if (delta[j] == 0.0 || std::sqrt(delta[j]) <= opts.eps * std::sqrt(delta0[j])) {
        active[j] = 0;
        continue;
      }
      p.col(j) = r.col(j) + (delta[j] / delta_old[j]) * p.col(j);
      delta_old[j] = delta[j];
    }
  }

  for (Eigen::Index j = 0; j < cols; ++j) {
    CgReport& rep = out.reports[static_cast<std::size_t>(j)];
    rep.iterations = iters[j];
    rep.relative_residual = delta0[j] > 0 ? std::sqrt(delta[j] / delta0[j]) : 0.0;
    rep.converged = delta0[j] == 0 || rep.relative_residual <= opts.eps;
  }
  return out;
}

double estimate_condition(const SpdOperator& op, int iters, Rng& rng) {
  if (iters < 1) throw std::invalid_argument("estimate_condition: iters must be >= 1");
  const Eigen::Index n = op.dim();

  // Largest eigenvalue: Rayleigh quotient after a fixed number of power steps.
  constexpr int kPowerIterations = 50;
  Vec v = rng.unit_vec(n);
  double lambda_max = 0.0;
  for (int i = 0; i < kPowerIterations; ++i) {
    Vec w = op.apply(v);
    lambda_max = v.dot(w);
    const double norm = w.norm();
    if (norm == 0.0) break;
    v = w / norm;
  }

  // Smallest eigenvalue: CG from x0 = 0 on a random right-hand side; the step
  // lengths and direction updates are the Lanczos tridiagonal coefficients.
  Vec b = rng.unit_vec(n);
  Vec x = Vec::Zero(n);
  Vec r = b;
  Vec p = r;
  double delta_old = r.squaredNorm();
  std::vector<double> alphas, betas;
  for (int k = 0; k < iters; ++k) {
    const Vec ap = op.apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0)) throw_not_pd(pap, k);
    const double alpha = delta_old / pap;
    alphas.push_back(alpha);
    x.noalias() += alpha * p;
    r.noalias() -= alpha * ap;
    const double delta = r.squaredNorm();
    if (delta <= 1e-28 * b.squaredNorm()) break;
    const double beta = delta / delta_old;
    betas.push_back(beta);
    p = r + beta * p;
    delta_old = delta;
  }
  const auto m = static_cast<Eigen::Index>(alphas.size());
  Mat tri = Mat::Zero(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    tri(j, j) = 1.0 / alphas[j];
    if (j > 0) tri(j, j) += betas[j - 1] / alphas[j - 1];
    if (j + 1 < m) {
      const double off = std::sqrt(betas[j]) / alphas[j];
      tri(j, j + 1) = off;
      tri(j + 1, j) = off;
    }
  }
  const Vec ritz = Eigen::SelfAdjointEigenSolver<Mat>(tri, Eigen::EigenvaluesOnly).eigenvalues();
  const double lambda_min = ritz.minCoeff();
  lambda_max = std::max(lambda_max, ritz.maxCoeff());
  if (!(lambda_min > 0)) return 1.0;
  return std::max(1.0, lambda_max / lambda_min);
}

}  // namespace mesanet
