#include "mesanet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace mesanet {

namespace {

Vec vec_of(const Tensor& t) { return Eigen::Map<const Vec>(t.data().data(), static_cast<Eigen::Index>(t.size())); }

Vec matvec(const Tensor& w, const Vec& x) { return w.as_matrix() * x; }

}  // namespace

DecodeSession::DecodeSession(ModelConfig cfg, const ParameterSet& params, CgOptions decode_cg)
    : cfg_(std::move(cfg)), params_(params) {
  cfg_.cg = decode_cg;
  cfg_.validate();
  const MixerConfig mc = cfg_.mixer_config();
  const auto n_a = static_cast<Eigen::Index>(cfg_.n_a);
  const auto width = static_cast<Eigen::Index>(mc.width());
  layers_.resize(cfg_.n_layers);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    Layer& L = layers_[l];
    L.heads.resize(cfg_.n_heads);
    for (Head& h : L.heads) {
      h.mesa = MesaState::zeros(n_a, n_a);
      h.linear = LinearAttnState::zeros(n_a, n_a, cfg_.mixer == MixerKind::mlstm);
    }
    L.tail_q = L.tail_k = L.tail_v = Mat::Zero(3, width);
    L.lambda = Mat::Ones(static_cast<Eigen::Index>(cfg_.n_heads), n_a);
    if (mixer_uses_lambda(cfg_.mixer)) {
      const Tensor& raw = params_.at(block_prefix(l) + "mixer.lambda_raw");
      for (Eigen::Index i = 0; i < L.lambda.size(); ++i) L.lambda(i / n_a, i % n_a) = mc.lambda_floor() + softplus(raw[static_cast<std::size_t>(i)]);
    }
  }
}

Vec DecodeSession::mixer_step(std::size_t l, const Vec& x, std::vector<HeadReport>& reports) {
  Layer& L = layers_[l];
  const std::string pre = block_prefix(l) + "mixer.";
  const MixerConfig mc = cfg_.mixer_config();
  const auto n_a = static_cast<Eigen::Index>(cfg_.n_a);

  auto stream = [&](const char* w, const char* conv, Mat& tail) {
    const Vec raw = matvec(params_.at(pre + w), x);
    const auto c = params_.at(pre + conv).as_matrix();
    Vec y = c.row(0).transpose().cwiseProduct(raw);
    for (Eigen::Index i = 1; i < 4; ++i) y += c.row(i).transpose().cwiseProduct(tail.row(i - 1).transpose());
    tail.row(2) = tail.row(1);
    tail.row(1) = tail.row(0);
    tail.row(0) = raw.transpose();
    return Vec(y.unaryExpr([](double v) { return silu(v); }));
  };
  Vec q = stream("wq", "conv_q", L.tail_q);
  Vec k = stream("wk", "conv_k", L.tail_k);
  const Vec v = stream("wv", "conv_v", L.tail_v);

  const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
  Vec beta = Vec::Ones(H), gamma = Vec::Ones(H);
  if (mixer_uses_beta(cfg_.mixer)) {
    beta = (matvec(params_.at(pre + "w_beta"), x) + vec_of(params_.at(pre + "b_beta"))).unaryExpr([](double a) {
      return sigmoid(a);
    });
  }
  if (mixer_uses_gamma(cfg_.mixer)) {
    gamma = (matvec(params_.at(pre + "w_gamma"), x) + vec_of(params_.at(pre + "b_gamma"))).unaryExpr([](double a) {
      return sigmoid(a);
    });
    if (mc.mode == GateMode::state_tracking) {
      gamma = (2.0 * gamma.array() - 1.0).matrix();
    } else if (mc.mode == GateMode::standard && cfg_.mixer == MixerKind::mesa) {
      gamma = gamma.cwiseProduct((1.0 - (1.0 - kGammaCap) * beta.array().square()).matrix());
    }
  }

  Vec mixed(mc.width());
  const Vec norm_w = vec_of(params_.at(pre + "out_norm"));
  for (Eigen::Index h = 0; h < H; ++h) {
    Head& hs = L.heads[static_cast<std::size_t>(h)];
    const Vec qh = l2_normalize(q.segment(h * n_a, n_a));
    const Vec kh = l2_normalize(k.segment(h * n_a, n_a));
    const Vec vh = v.segment(h * n_a, n_a);
    HeadReport rep{l, static_cast<std::size_t>(h), {}, gamma[h]};
    Vec o;
    if (cfg_.mixer == MixerKind::mesa) {
      MesaStepResult st;
      try {
        st = mesa_step(hs.mesa, kh, vh, qh, {beta[h], gamma[h]}, L.lambda.row(h).transpose(), cfg_.cg);
      } catch (const NotPositiveDefinite& e) {
        throw NotPositiveDefinite(std::string(e.what()) + " (layer " + std::to_string(l) + ", head " +
                                  std::to_string(h) + ", position " + std::to_string(position_) + ")");
      }
      hs.mesa = std::move(st.state);
      o = std::move(st.o);
      rep.cg = st.report;
    } else if (cfg_.mixer == MixerKind::softmax) {
      hs.keys.push_back(kh);
      hs.values.push_back(vh);
      Mat Kh(n_a, static_cast<Eigen::Index>(hs.keys.size())), Vh(n_a, Kh.cols());
      for (Eigen::Index i = 0; i < Kh.cols(); ++i) {
        Kh.col(i) = hs.keys[static_cast<std::size_t>(i)];
        Vh.col(i) = hs.values[static_cast<std::size_t>(i)];
      }
      o = softmax_attention(Kh, Vh, qh);
    } else {
      BaselineStep st;
      switch (*as_recurrence(cfg_.mixer)) {
        case Recurrence::gla: st = gla_step(hs.linear, kh, vh, qh, beta[h], gamma[h]); break;
        case Recurrence::mamba2: st = mamba2_step(hs.linear, kh, vh, qh, gamma[h]); break;
        case Recurrence::deltanet: st = deltanet_step(hs.linear, kh, vh, qh, beta[h]); break;
        case Recurrence::gated_deltanet: st = gated_deltanet_step(hs.linear, kh, vh, qh, beta[h], gamma[h]); break;
        case Recurrence::mlstm: st = mlstm_step(hs.linear, kh, vh, qh, beta[h], gamma[h]); break;
      }
      hs.linear = std::move(st.state);
      o = std::move(st.o);
    }
    mixed.segment(h * n_a, n_a) = rms_norm(o, norm_w.segment(h * n_a, n_a));
    reports.push_back(rep);
  }
  return matvec(params_.at(pre + "wo"), mixed);
}

DecodeOutput DecodeSession::step(int token) {
  const Tensor& emb = params_.at("embed");
  if (token < 0 || static_cast<std::size_t>(token) >= cfg_.vocab) {
    throw std::out_of_range("decode: token id " + std::to_string(token) + " outside vocabulary");
  }
  DecodeOutput out;
  Vec x = emb.as_matrix().row(token).transpose() * std::sqrt(static_cast<double>(cfg_.n_e));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = block_prefix(l);
    x += mixer_step(l, rms_norm(x, vec_of(params_.at(pre + "norm1"))), out.heads);
    const Vec h2 = rms_norm(x, vec_of(params_.at(pre + "norm2")));
    const Vec gate = matvec(params_.at(pre + "mlp.w_gate"), h2).unaryExpr([](double a) { return silu(a); });
    const Vec up = matvec(params_.at(pre + "mlp.w_up"), h2);
    x += matvec(params_.at(pre + "mlp.w_down"), gate.cwiseProduct(up));
  }
  const Vec h = rms_norm(x, vec_of(params_.at("final_norm")));
  out.logits = logit_softcap(emb.as_matrix() * h, kLogitCap);
  ++position_;
  return out;
}

std::size_t DecodeSession::state_bytes() const {
  std::size_t n = 0;
  for (const Layer& L : layers_) {
    n += static_cast<std::size_t>(L.tail_q.size() + L.tail_k.size() + L.tail_v.size());
    for (const Head& h : L.heads) {
      n += static_cast<std::size_t>(h.mesa.G.size() + h.mesa.H.size() + h.linear.G.size());
      if (h.linear.z) n += static_cast<std::size_t>(h.linear.z->size());
      for (const Vec& k : h.keys) n += static_cast<std::size_t>(k.size());
      for (const Vec& v : h.values) n += static_cast<std::size_t>(v.size());
    }
  }
  return n * sizeof(double);
}

SpdOperator DecodeSession::mesa_operator(std::size_t layer, std::size_t head) const {
  const Layer& L = layers_.at(layer);
  return {L.heads.at(head).mesa.H, L.lambda.row(static_cast<Eigen::Index>(head)).transpose(), std::nullopt,
          std::nullopt};
}

Mat decode_logits(const ModelConfig& cfg, const ParameterSet& params, const std::vector<int>& tokens,
                  std::size_t seq_len, const CgOptions& decode_cg, std::vector<HeadReport>* reports) {
  if (seq_len == 0 || tokens.size() % seq_len != 0) throw ShapeError("decode_logits: token count not a multiple of seq_len");
  Mat logits(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(cfg.vocab));
  for (std::size_t s = 0; s < tokens.size() / seq_len; ++s) {
    DecodeSession session(cfg, params, decode_cg);
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t r = s * seq_len + t;
      DecodeOutput out = session.step(tokens[r]);
      logits.row(static_cast<Eigen::Index>(r)) = out.logits.transpose();
      if (reports) reports->insert(reports->end(), out.heads.begin(), out.heads.end());
    }
  }
  return logits;
}

void HeadStats::record(const HeadReport& r) {
  ++steps;
  total_iterations += r.cg.iterations;
  max_iterations = std::max(max_iterations, r.cg.iterations);
  gamma_sum += r.gamma;
  const auto bin = static_cast<std::size_t>(r.cg.iterations);
  if (iteration_histogram.size() <= bin) iteration_histogram.resize(bin + 1, 0);
  ++iteration_histogram[bin];
}

namespace {

std::vector<HeadStats> empty_stats(const ModelConfig& cfg) {
  std::vector<HeadStats> s(cfg.n_layers * cfg.n_heads);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i].layer = i / cfg.n_heads;
    s[i].head = i % cfg.n_heads;
  }
  return s;
}

}  // namespace

std::vector<StopSetting> default_stop_grid() { return {{1e-2, 30}, {1e-3, 30}, {1e-4, 30}, {1e-6, 30}, {0.0, 30}}; }

std::vector<SweepRow> sweep_stopping(const ModelConfig& cfg, const ParameterSet& params,
                                     const std::vector<StopSetting>& grid, const Batch& eval) {
  std::vector<SweepRow> rows;
  for (const StopSetting& setting : grid) {
    SweepRow row;
    row.eps = setting.eps;
    row.max_iters = setting.max_iters;
    row.heads = empty_stats(cfg);
    double correct = 0.0, weight = 0.0;
    for (std::size_t s = 0; s < eval.batch; ++s) {
      DecodeSession session(cfg, params, {setting.eps, setting.max_iters, cfg.cg.init});
      for (std::size_t t = 0; t < eval.seq_len; ++t) {
        const std::size_t r = s * eval.seq_len + t;
        const DecodeOutput out = session.step(eval.tokens[r]);
        for (const HeadReport& h : out.heads) {
          row.heads[h.layer * cfg.n_heads + h.head].record(h);
          row.mean_iterations += h.cg.iterations;
          ++row.solves;
        }
        if (eval.mask[r] <= 0) continue;
        Eigen::Index arg;
        out.logits.maxCoeff(&arg);
        correct += eval.mask[r] * (arg == eval.targets[r] ? 1.0 : 0.0);
        weight += eval.mask[r];
      }
    }
    if (row.solves) row.mean_iterations /= static_cast<double>(row.solves);
    row.accuracy = weight > 0 ? correct / weight : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<HeadStats> head_condition_profile(const ModelConfig& cfg, const ParameterSet& params,
                                              const std::vector<int>& sequence, const CgOptions& decode_cg, Rng& rng) {
  if (cfg.mixer != MixerKind::mesa) throw std::invalid_argument("head_condition_profile: requires a Mesa model");
  std::vector<HeadStats> stats = empty_stats(cfg);
  DecodeSession session(cfg, params, decode_cg);
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const DecodeOutput out = session.step(sequence[t]);
    for (const HeadReport& h : out.heads) {
      HeadStats& hs = stats[h.layer * cfg.n_heads + h.head];
      hs.record(h);
      if (t % kConditionStride != 0) continue;
      const double cond = estimate_condition(session.mesa_operator(h.layer, h.head), static_cast<int>(cfg.n_a), rng);
      hs.samples.push_back({t, h.cg.iterations, cond, hs.mean_gamma()});
    }
  }
  return stats;
}

void write_stats_csv(std::ostream& out, const std::vector<HeadStats>& stats) {
  out << "layer,head,position,cg_iters,cond_estimate,gamma_mean\n";
  const auto precision = out.precision(10);
  for (const HeadStats& s : stats) {
    for (const auto& smp : s.samples) {
      out << s.layer << ',' << s.head << ',' << smp.position << ',' << smp.cg_iters << ',' << smp.condition << ','
          << smp.gamma_mean << '\n';
    }
  }
  out.precision(precision);
}

}  // namespace mesanet
