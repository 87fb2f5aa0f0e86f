#include "mesanet/baselines.hpp"

#include <algorithm>
#include <cmath>

namespace mesanet {

LinearAttnState LinearAttnState::zeros(Eigen::Index n_v, Eigen::Index n_a, bool with_normalizer) {
  LinearAttnState s{Mat::Zero(n_v, n_a), std::nullopt};
  if (with_normalizer) s.z = Vec::Zero(n_a);
  return s;
}

BaselineStep gla_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta, double gamma) {
  BaselineStep out;
  out.state.G = gamma * s.G + beta * v * k.transpose();
  out.o = out.state.G * q;
  return out;
}

BaselineStep mamba2_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double gamma) {
  return gla_step(s, k, v, q, 1.0, gamma);
}

BaselineStep deltanet_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta) {
  return gated_deltanet_step(s, k, v, q, beta, 1.0);
}

BaselineStep gated_deltanet_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta,
                                 double gamma) {
  BaselineStep out;
  const Vec u = s.G * k;
  out.state.G = gamma * s.G - (gamma * beta) * u * k.transpose() + beta * v * k.transpose();
  out.o = out.state.G * q;
  return out;
}

BaselineStep mlstm_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta, double gamma) {
  BaselineStep out;
  const Vec z_prev = s.z ? *s.z : Vec::Zero(k.size());
  out.state.G = gamma * s.G + beta * v * k.transpose();
  out.state.z = gamma * z_prev + beta * k;
  const double denom = std::max(1.0, std::abs(out.state.z->dot(q)));
  out.o = out.state.G * q / denom;
  return out;
}

Vec softmax_attention(const Mat& K, const Mat& V, const Vec& q) {
  if (K.cols() < 1 || K.cols() != V.cols() || K.rows() != q.size()) throw ShapeError("softmax_attention: shape mismatch");
  Vec logits = K.transpose() * q;
  logits.array() -= logits.maxCoeff();
  Vec a = logits.array().exp();
  a /= a.sum();
  return V * a;
}

double gla_gradient_step_check(const Mat& phi, const Vec& k, const Vec& v, double beta, double gamma) {
  if (!(beta > 0)) throw std::invalid_argument("gla_gradient_step_check: beta must be positive");
  const Mat grad = -v * k.transpose() + ((1.0 - gamma) / beta) * phi;
  const Mat descent = phi - beta * grad;
  const Mat update = gla_step({phi, std::nullopt}, k, v, k, beta, gamma).state.G;
  return (descent - update).cwiseAbs().maxCoeff();
}

double deltanet_gradient_step_check(const Mat& phi, const Vec& k, const Vec& v, double beta) {
  const Mat grad = -(v - phi * k) * k.transpose();
  const Mat descent = phi - beta * grad;
  const Mat update = deltanet_step({phi, std::nullopt}, k, v, k, beta).state.G;
  return (descent - update).cwiseAbs().maxCoeff();
}

std::string_view to_string(Recurrence r) {
  switch (r) {
    case Recurrence::gla: return "gla";
    case Recurrence::mamba2: return "mamba2";
    case Recurrence::deltanet: return "deltanet";
    case Recurrence::gated_deltanet: return "gated_deltanet";
    case Recurrence::mlstm: return "mlstm";
  }
  return "unknown";
}

namespace {

bool uses_beta(Recurrence r) { return r != Recurrence::mamba2; }
bool uses_gamma(Recurrence r) { return r != Recurrence::deltanet; }
bool is_delta(Recurrence r) { return r == Recurrence::deltanet || r == Recurrence::gated_deltanet; }

}  // namespace

RecurrentForward recurrent_forward(Recurrence kind, const MesaSequence& seq) {
  const Eigen::Index T = seq.length();
  if (seq.V.cols() != T || seq.Q.cols() != T || seq.beta.size() != T || seq.gamma.size() != T ||
      seq.Q.rows() != seq.K.rows()) {
    throw ShapeError("recurrent_forward: inconsistent sequence shapes");
  }
  RecurrentForward out;
  out.O.resize(seq.V.rows(), T);
  out.before.reserve(static_cast<std::size_t>(T));
  LinearAttnState s = LinearAttnState::zeros(seq.V.rows(), seq.K.rows(), kind == Recurrence::mlstm);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double b = uses_beta(kind) ? seq.beta[t] : 1.0;
    const double g = uses_gamma(kind) ? seq.gamma[t] : 1.0;
    out.before.push_back(s);
    BaselineStep st;
    if (is_delta(kind)) {
      st = gated_deltanet_step(s, seq.K.col(t), seq.V.col(t), seq.Q.col(t), b, g);
    } else if (kind == Recurrence::mlstm) {
      st = mlstm_step(s, seq.K.col(t), seq.V.col(t), seq.Q.col(t), b, g);
    } else {
      st = gla_step(s, seq.K.col(t), seq.V.col(t), seq.Q.col(t), b, g);
    }
    out.O.col(t) = st.o;
    s = std::move(st.state);
  }
  out.final_state = std::move(s);
  return out;
}

RecurrentGrads recurrent_backward(Recurrence kind, const MesaSequence& seq, const RecurrentForward& fwd, const Mat& E) {
  const Eigen::Index T = seq.length();
  const Eigen::Index n_a = seq.K.rows(), n_v = seq.V.rows();
  if (E.rows() != n_v || E.cols() != T) throw ShapeError("recurrent_backward: upstream error has wrong shape");
  RecurrentGrads gr{Mat::Zero(n_a, T), Mat::Zero(n_v, T), Mat::Zero(n_a, T), Vec::Zero(T), Vec::Zero(T)};
  const bool mlstm = kind == Recurrence::mlstm;

  Mat D = Mat::Zero(n_v, n_a);
  Vec Dz = Vec::Zero(n_a);
  for (Eigen::Index t = T; t-- > 0;) {
    const double b = uses_beta(kind) ? seq.beta[t] : 1.0;
    const double g = uses_gamma(kind) ? seq.gamma[t] : 1.0;
    const Vec k = seq.K.col(t), v = seq.V.col(t), q = seq.Q.col(t), e = E.col(t);
    const LinearAttnState& prev = fwd.before[static_cast<std::size_t>(t)];
    const LinearAttnState& cur = t + 1 < T ? fwd.before[static_cast<std::size_t>(t + 1)] : fwd.final_state;

    double denom = 1.0;
    if (mlstm) {
      const double zq = cur.z->dot(q);
      denom = std::max(1.0, std::abs(zq));
      if (std::abs(zq) > 1.0) {
        const double dd = -e.dot(fwd.O.col(t)) / denom;
        const double sign = zq > 0 ? 1.0 : -1.0;
        Dz += dd * sign * q;
        gr.dQ.col(t) += dd * sign * *cur.z;
      }
    }
    D.noalias() += (e / denom) * q.transpose();
    gr.dQ.col(t) += cur.G.transpose() * e / denom;

    const Vec Dk = D * k;
    if (is_delta(kind)) {
      const Vec u = prev.G * k;
      if (uses_gamma(kind)) gr.dgamma[t] = (D.array() * prev.G.array()).sum() - b * u.dot(Dk);
      gr.dbeta[t] = (v - g * u).dot(Dk);
      gr.dV.col(t) = b * Dk;
      gr.dK.col(t) = -g * b * (prev.G.transpose() * Dk + D.transpose() * u) + b * D.transpose() * v;
      D = g * (D - b * Dk * k.transpose());
    } else {
      if (uses_gamma(kind)) gr.dgamma[t] = (D.array() * prev.G.array()).sum() + (mlstm ? Dz.dot(*prev.z) : 0.0);
      if (uses_beta(kind)) gr.dbeta[t] = v.dot(Dk) + (mlstm ? Dz.dot(k) : 0.0);
      gr.dV.col(t) = b * Dk;
      gr.dK.col(t) = b * D.transpose() * v + (mlstm ? Vec(b * Dz) : Vec::Zero(n_a));
      D *= g;
      Dz *= g;
    }
  }
  return gr;
}

Mat softmax_forward(const Mat& K, const Mat& V, const Mat& Q) {
  Mat O(V.rows(), Q.cols());
  for (Eigen::Index t = 0; t < Q.cols(); ++t) O.col(t) = softmax_attention(K.leftCols(t + 1), V.leftCols(t + 1), Q.col(t));
  return O;
}

SoftmaxGrads softmax_backward(const Mat& K, const Mat& V, const Mat& Q, const Mat& E) {
  SoftmaxGrads gr{Mat::Zero(K.rows(), K.cols()), Mat::Zero(V.rows(), V.cols()), Mat::Zero(Q.rows(), Q.cols())};
  for (Eigen::Index t = 0; t < Q.cols(); ++t) {
    const auto n = t + 1;
    Vec logits = K.leftCols(n).transpose() * Q.col(t);
    logits.array() -= logits.maxCoeff();
    Vec a = logits.array().exp();
    a /= a.sum();
    const Vec da = V.leftCols(n).transpose() * E.col(t);
    const Vec dl = a.cwiseProduct(da.array().matrix() - Vec::Constant(n, a.dot(da)));
    gr.dQ.col(t) += K.leftCols(n) * dl;
    gr.dK.leftCols(n) += Q.col(t) * dl.transpose();
    gr.dV.leftCols(n) += E.col(t) * a.transpose();
  }
  return gr;
}

}  // namespace mesanet
