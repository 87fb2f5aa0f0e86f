#include "mesanet/mixer.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "mesanet/mesa.hpp"
#include "mesanet/parallel.hpp"

namespace mesanet {

std::string_view to_string(MixerKind k) {
  switch (k) {
    case MixerKind::mesa: return "mesa";
    case MixerKind::gla: return "gla";
    case MixerKind::mamba2: return "mamba2";
    case MixerKind::deltanet: return "deltanet";
    case MixerKind::gated_deltanet: return "gated_deltanet";
    case MixerKind::mlstm: return "mlstm";
    case MixerKind::softmax: return "softmax";
  }
  return "unknown";
}

std::string_view to_string(GateMode m) {
  switch (m) {
    case GateMode::standard: return "standard";
    case GateMode::state_tracking: return "state_tracking";
    case GateMode::high_lambda: return "high_lambda";
  }
  return "unknown";
}

MixerKind parse_mixer_kind(std::string_view s) {
  for (MixerKind k : {MixerKind::mesa, MixerKind::gla, MixerKind::mamba2, MixerKind::deltanet,
                      MixerKind::gated_deltanet, MixerKind::mlstm, MixerKind::softmax}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown mixer kind '" + std::string(s) + "'");
}

GateMode parse_gate_mode(std::string_view s) {
  if (s == "standard") return GateMode::standard;
  if (s == "state_tracking") return GateMode::state_tracking;
  if (s == "high_lambda") return GateMode::high_lambda;
  throw std::invalid_argument("unknown gate mode '" + std::string(s) + "'");
}

bool mixer_uses_beta(MixerKind k) { return k != MixerKind::mamba2 && k != MixerKind::softmax; }
bool mixer_uses_gamma(MixerKind k) { return k != MixerKind::deltanet && k != MixerKind::softmax; }
bool mixer_uses_lambda(MixerKind k) { return k == MixerKind::mesa; }

std::optional<Recurrence> as_recurrence(MixerKind k) {
  switch (k) {
    case MixerKind::gla: return Recurrence::gla;
    case MixerKind::mamba2: return Recurrence::mamba2;
    case MixerKind::deltanet: return Recurrence::deltanet;
    case MixerKind::gated_deltanet: return Recurrence::gated_deltanet;
    case MixerKind::mlstm: return Recurrence::mlstm;
    default: return std::nullopt;
  }
}

void MixerConfig::validate() const {
  if (n_e == 0 || n_heads == 0 || n_a == 0) throw std::invalid_argument("mixer: dimensions must be positive");
  if (chunk < 1) throw std::invalid_argument("mixer: chunk size must be >= 1");
  if (cg.eps < 0 || cg.max_iters < 0) throw std::invalid_argument("mixer: invalid CG options");
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

void init_mixer_params(ParameterSet& params, const std::string& prefix, const MixerConfig& cfg, Rng& rng,
                       double out_std) {
  cfg.validate();
  const std::size_t w = cfg.width(), h = cfg.n_heads;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.n_e));
  params.add(prefix + "wq", normal_tensor({w, cfg.n_e}, in_std, rng));
  params.add(prefix + "wk", normal_tensor({w, cfg.n_e}, in_std, rng));
  params.add(prefix + "wv", normal_tensor({w, cfg.n_e}, in_std, rng));
  params.add(prefix + "conv_q", normal_tensor({4, w}, 0.5, rng));
  params.add(prefix + "conv_k", normal_tensor({4, w}, 0.5, rng));
  params.add(prefix + "conv_v", normal_tensor({4, w}, 0.5, rng));
  if (mixer_uses_beta(cfg.kind)) {
    params.add(prefix + "w_beta", normal_tensor({h, cfg.n_e}, in_std, rng));
    params.add(prefix + "b_beta", Tensor({h}, 0.0));
  }
  if (mixer_uses_gamma(cfg.kind)) {
    params.add(prefix + "w_gamma", normal_tensor({h, cfg.n_e}, in_std, rng));
    params.add(prefix + "b_gamma", Tensor({h}, cfg.gate_bias));
  }
  if (mixer_uses_lambda(cfg.kind)) {
    const double initial = cfg.mode == GateMode::standard ? 1.0 : 50.0;
    params.add(prefix + "lambda_raw", Tensor({h, cfg.n_a}, softplus_inverse(initial - cfg.lambda_floor())));
  }
  params.add(prefix + "out_norm", Tensor({w}, 1.0));
  params.add(prefix + "wo", normal_tensor({cfg.n_e, w}, out_std, rng));
}

std::size_t mixer_param_count(const MixerConfig& cfg) {
  const std::size_t w = cfg.width(), h = cfg.n_heads;
  std::size_t n = 3 * w * cfg.n_e + 3 * 4 * w + w + cfg.n_e * w;
  if (mixer_uses_beta(cfg.kind)) n += h * cfg.n_e + h;
  if (mixer_uses_gamma(cfg.kind)) n += h * cfg.n_e + h;
  if (mixer_uses_lambda(cfg.kind)) n += h * cfg.n_a;
  return n;
}

namespace {

struct SeqInputs {
  Tensor q, k, v, beta, gamma, lambda;
};

struct SeqSaved {
  MesaForward mesa;
  RecurrentForward rec;
};

MesaSequence extract(const SeqInputs& in, std::size_t b, std::size_t h, std::size_t T, std::size_t n_a) {
  const auto row = static_cast<Eigen::Index>(b * T);
  const auto col = static_cast<Eigen::Index>(h * n_a);
  const auto t = static_cast<Eigen::Index>(T);
  const auto n = static_cast<Eigen::Index>(n_a);
  MesaSequence s;
  s.K = in.k.as_matrix().block(row, col, t, n).transpose();
  s.V = in.v.as_matrix().block(row, col, t, n).transpose();
  s.Q = in.q.as_matrix().block(row, col, t, n).transpose();
  s.beta = in.beta.as_matrix().block(row, static_cast<Eigen::Index>(h), t, 1);
  s.gamma = in.gamma.as_matrix().block(row, static_cast<Eigen::Index>(h), t, 1);
  return s;
}

void scatter(Tensor& dst, const Mat& block_t, std::size_t b, std::size_t h, std::size_t T, std::size_t n_a) {
  dst.as_matrix().block(static_cast<Eigen::Index>(b * T), static_cast<Eigen::Index>(h * n_a),
                        static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(n_a)) += block_t.transpose();
}

void scatter_gate(Tensor& dst, const Vec& g, std::size_t b, std::size_t h, std::size_t T) {
  dst.as_matrix().block(static_cast<Eigen::Index>(b * T), static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(T),
                        1) += g;
}

}  // namespace

NodeId sequence_mix(Tape& tape, const MixerConfig& cfg, NodeId q, NodeId k, NodeId v, NodeId beta, NodeId gamma,
                    NodeId lambda, std::size_t seq_len, MixerTrace* trace) {
  auto in = std::make_shared<SeqInputs>(
      SeqInputs{tape.value(q), tape.value(k), tape.value(v), tape.value(beta), tape.value(gamma), tape.value(lambda)});
  const std::size_t rows = in->q.rows(), H = cfg.n_heads, n_a = cfg.n_a, T = seq_len;
  if (in->q.cols() != cfg.width() || !same_shape(in->q, in->k) || !same_shape(in->q, in->v)) {
    throw ShapeError("sequence_mix: q/k/v must be rows x " + std::to_string(cfg.width()));
  }
  if (in->beta.shape() != Shape{rows, H} || in->gamma.shape() != Shape{rows, H} || in->lambda.shape() != Shape{H, n_a}) {
    throw ShapeError("sequence_mix: gate or regularizer shape mismatch");
  }
  if (T == 0 || rows % T != 0) throw ShapeError("sequence_mix: rows not a multiple of the sequence length");
  const std::size_t B = rows / T;
  const MixerKind kind = cfg.kind;
  const auto rec = as_recurrence(kind);

  auto saved = std::make_shared<std::vector<SeqSaved>>(B * H);
  Tensor out({rows, cfg.width()});
  std::vector<std::vector<CgReport>> reports(B * H);
  parallel_for(B * H, [&](std::size_t idx) {
    const std::size_t b = idx / H, h = idx % H;
    MesaSequence s = extract(*in, b, h, T, n_a);
    Mat O;
    if (kind == MixerKind::mesa) {
      const Vec lam = in->lambda.as_matrix().row(static_cast<Eigen::Index>(h)).transpose();
      try {
        (*saved)[idx].mesa = mesa_forward_chunked(s, lam, cfg.chunk, cfg.cg);
      } catch (const NotPositiveDefinite& e) {
        throw NotPositiveDefinite(std::string(e.what()) + " (sequence " + std::to_string(b) + ", head " +
                                  std::to_string(h) + ")");
      }
      O = (*saved)[idx].mesa.O;
      reports[idx] = (*saved)[idx].mesa.reports;
    } else if (rec) {
      (*saved)[idx].rec = recurrent_forward(*rec, s);
      O = (*saved)[idx].rec.O;
    } else {
      O = softmax_forward(s.K, s.V, s.Q);
    }
    out.as_matrix().block(static_cast<Eigen::Index>(b * T), static_cast<Eigen::Index>(h * n_a),
                          static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(n_a)) = O.transpose();
  });
  if (trace) {
    for (const auto& rs : reports) {
      for (const CgReport& r : rs) {
        trace->cg_iterations += r.iterations;
        ++trace->cg_solves;
      }
    }
  }

  const MixerConfig c = cfg;
  return tape.record(
      "sequence_mix", {q, k, v, beta, gamma, lambda}, std::move(out),
      [in, saved, c, rec, B, T](const Tensor& gout, const std::vector<Tensor*>& gin) {
        const std::size_t H = c.n_heads, n_a = c.n_a;
        std::vector<Vec> dlambda(B * H);
        parallel_for(B * H, [&](std::size_t idx) {
          const std::size_t b = idx / H, h = idx % H;
          MesaSequence s = extract(*in, b, h, T, n_a);
          const Mat E = gout.as_matrix()
                            .block(static_cast<Eigen::Index>(b * T), static_cast<Eigen::Index>(h * n_a),
                                   static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(n_a))
                            .transpose();
          Mat dK, dV, dQ;
          Vec dbeta, dgamma;
          if (c.kind == MixerKind::mesa) {
            const Vec lam = in->lambda.as_matrix().row(static_cast<Eigen::Index>(h)).transpose();
            MesaGrads g = mesa_backward_chunked(s, lam, (*saved)[idx].mesa, E, c.cg);
            dK = std::move(g.dK), dV = std::move(g.dV), dQ = std::move(g.dQ);
            dbeta = std::move(g.dbeta), dgamma = std::move(g.dgamma);
            dlambda[idx] = std::move(g.dlambda);
          } else if (rec) {
            RecurrentGrads g = recurrent_backward(*rec, s, (*saved)[idx].rec, E);
            dK = std::move(g.dK), dV = std::move(g.dV), dQ = std::move(g.dQ);
            dbeta = std::move(g.dbeta), dgamma = std::move(g.dgamma);
          } else {
            SoftmaxGrads g = softmax_backward(s.K, s.V, s.Q, E);
            dK = std::move(g.dK), dV = std::move(g.dV), dQ = std::move(g.dQ);
          }
          if (gin[0]) scatter(*gin[0], dQ, b, h, T, n_a);
          if (gin[1]) scatter(*gin[1], dK, b, h, T, n_a);
          if (gin[2]) scatter(*gin[2], dV, b, h, T, n_a);
          if (gin[3] && dbeta.size()) scatter_gate(*gin[3], dbeta, b, h, T);
          if (gin[4] && dgamma.size()) scatter_gate(*gin[4], dgamma, b, h, T);
        });
        if (gin[5]) {
          for (std::size_t idx = 0; idx < B * H; ++idx) {
            if (dlambda[idx].size() == 0) continue;
            gin[5]->as_matrix().row(static_cast<Eigen::Index>(idx % H)) += dlambda[idx].transpose();
          }
        }
      });
}

NodeId mixer_forward(Tape& tape, const BoundParams& p, const std::string& prefix, const MixerConfig& cfg, NodeId x,
                     std::size_t seq_len, MixerTrace* trace, MixerInternals* internals) {
  cfg.validate();
  const std::size_t rows = tape.value(x).rows();
  auto stream = [&](const char* w, const char* conv) {
    NodeId y = ops::linear(tape, x, p[prefix + w]);
    return ops::silu(tape, ops::conv4(tape, y, p[prefix + conv], seq_len));
  };
  const NodeId q = ops::l2_normalize(tape, stream("wq", "conv_q"), cfg.n_a);
  const NodeId k = ops::l2_normalize(tape, stream("wk", "conv_k"), cfg.n_a);
  const NodeId v = stream("wv", "conv_v");

  const NodeId beta = mixer_uses_beta(cfg.kind)
                          ? ops::sigmoid(tape, ops::linear(tape, x, p[prefix + "w_beta"], p[prefix + "b_beta"]))
                          : tape.constant(Tensor({rows, cfg.n_heads}, 1.0));
  NodeId gamma;
  if (mixer_uses_gamma(cfg.kind)) {
    gamma = ops::sigmoid(tape, ops::linear(tape, x, p[prefix + "w_gamma"], p[prefix + "b_gamma"]));
    if (cfg.mode == GateMode::state_tracking) {
      gamma = ops::affine(tape, gamma, 2.0, -1.0);
    } else if (cfg.mode == GateMode::standard && cfg.kind == MixerKind::mesa) {
      const NodeId damp = ops::affine(tape, ops::mul(tape, beta, beta), -(1.0 - kGammaCap), 1.0);
      gamma = ops::mul(tape, gamma, damp);
    }
  } else {
    gamma = tape.constant(Tensor({rows, cfg.n_heads}, 1.0));
  }
  const NodeId lambda = mixer_uses_lambda(cfg.kind)
                            ? ops::affine(tape, ops::softplus(tape, p[prefix + "lambda_raw"]), 1.0, cfg.lambda_floor())
                            : tape.constant(Tensor({cfg.n_heads, cfg.n_a}, 1.0));
  if (cfg.mode != GateMode::standard && mixer_uses_lambda(cfg.kind)) {
    const Tensor& lam = tape.value(lambda);
    for (double l : lam.data()) {
      if (!(l >= kLambdaFloorStateTracking)) throw NumericError("mixer: regularizer below its floor of 49");
    }
  }

  const NodeId mixed = sequence_mix(tape, cfg, q, k, v, beta, gamma, lambda, seq_len, trace);
  const NodeId normed = ops::rms_norm(tape, mixed, p[prefix + "out_norm"], cfg.n_a);
  const NodeId out = ops::linear(tape, normed, p[prefix + "wo"]);
  if (internals) {
    *internals = {tape.value(q),     tape.value(k),      tape.value(v),    tape.value(beta),
                  tape.value(gamma), tape.value(lambda), tape.value(mixed)};
  }
  return out;
}

Mat mixer_forward_eval(const ParameterSet& params, const std::string& prefix, const MixerConfig& cfg, const Mat& x,
                       std::size_t seq_len, MixerTrace* trace, MixerInternals* internals) {
  Tape tape;
  BoundParams bound(tape, params, false);
  const NodeId xin = tape.constant(Tensor::from_matrix(x));
  return tape.value(mixer_forward(tape, bound, prefix, cfg, xin, seq_len, trace, internals)).to_matrix();
}

}  // namespace mesanet
