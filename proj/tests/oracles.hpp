#pragma once

// Reference implementations written directly from the defining formulas.
// They share no code with the library beyond the Eigen types.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Cumulative forget factor prod_{s=from+1..to} gamma_s (0-based, inclusive of `to`).
inline double zeta(const Vec& gamma, Eigen::Index to, Eigen::Index from) {
  double z = 1.0;
  for (Eigen::Index s = from + 1; s <= to; ++s) z *= gamma(s);
  return z;
}

// G_t and H_t from explicit discounted sums.
inline Mat mesa_G(const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma, Eigen::Index t) {
  Mat G = Mat::Zero(V.rows(), K.rows());
  for (Eigen::Index s = 0; s <= t; ++s) G += zeta(gamma, t, s) * beta(s) * V.col(s) * K.col(s).transpose();
  return G;
}

inline Mat mesa_H(const Mat& K, const Vec& beta, const Vec& gamma, Eigen::Index t) {
  Mat H = Mat::Zero(K.rows(), K.rows());
  for (Eigen::Index s = 0; s <= t; ++s) H += zeta(gamma, t, s) * beta(s) * K.col(s) * K.col(s).transpose();
  return H;
}

// o_t = G_t (H_t + Lambda)^{-1} q_t by Householder QR.
inline Mat mesa_outputs(const Mat& K, const Mat& V, const Mat& Q, const Vec& beta, const Vec& gamma,
                        const Vec& lambda) {
  Mat O(V.rows(), K.cols());
  for (Eigen::Index t = 0; t < K.cols(); ++t) {
    Mat A = mesa_H(K, beta, gamma, t);
    A.diagonal() += lambda;
    O.col(t) = mesa_G(K, V, beta, gamma, t) * A.colPivHouseholderQr().solve(Q.col(t));
  }
  return O;
}

// Brute-force sum of the discounted ridge objective.
inline double mesa_objective(const Mat& phi, const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma,
                             const Vec& lambda) {
  const Eigen::Index T = K.cols();
  double f = 0.0;
  for (Eigen::Index s = 0; s < T; ++s) {
    f += 0.5 * zeta(gamma, T - 1, s) * beta(s) * (V.col(s) - phi * K.col(s)).squaredNorm();
  }
  for (Eigen::Index i = 0; i < phi.cols(); ++i) f += 0.5 * lambda(i) * phi.col(i).squaredNorm();
  return f;
}

// Linear recurrences written out as sums over the past.
inline Vec gla_output(const Mat& K, const Mat& V, const Vec& q, const Vec& beta, const Vec& gamma, Eigen::Index t) {
  Vec o = Vec::Zero(V.rows());
  for (Eigen::Index s = 0; s <= t; ++s) o += zeta(gamma, t, s) * beta(s) * V.col(s) * K.col(s).dot(q);
  return o;
}

inline Vec softmax_output(const Mat& K, const Mat& V, const Vec& q, Eigen::Index t) {
  Vec logits(t + 1);
  for (Eigen::Index s = 0; s <= t; ++s) logits(s) = K.col(s).dot(q);
  const double m = logits.maxCoeff();
  Vec w = (logits.array() - m).exp().matrix();
  w /= w.sum();
  Vec o = Vec::Zero(V.rows());
  for (Eigen::Index s = 0; s <= t; ++s) o += w(s) * V.col(s);
  return o;
}

inline int cumulative_xor(const std::vector<int>& bits, std::size_t upto) {
  int acc = 0;
  for (std::size_t i = 0; i <= upto; ++i) acc ^= bits[i];
  return acc;
}

inline double cosine_schedule(int step, double peak, int warmup, int total, double final_fraction) {
  if (step < warmup) return 1e-6 + (peak - 1e-6) * step / warmup;
  const double progress = std::min(1.0, double(step - warmup) / double(total - warmup));
  const double lo = final_fraction * peak;
  return lo + 0.5 * (peak - lo) * (1.0 + std::cos(M_PI * progress));
}

// Central difference of f along every coordinate of x.
inline Vec central_difference(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-6) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x(i);
    x(i) = saved + h;
    const double fp = f(x);
    x(i) = saved - h;
    const double fm = f(x);
    x(i) = saved;
    g(i) = (fp - fm) / (2 * h);
  }
  return g;
}

inline bool fd_close(double analytic, double numeric, double rel = 1e-4, double floor = 1e-7) {
  return std::abs(analytic - numeric) <= std::max(rel * std::abs(numeric), floor);
}

inline Vec unit(Vec v) { return v / v.norm(); }

}  // namespace oracle
