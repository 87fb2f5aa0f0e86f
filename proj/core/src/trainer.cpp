#include "mesanet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mesanet {

std::string_view to_string(TaskKind k) { return k == TaskKind::parity ? "parity" : "recall"; }

TaskKind parse_task_kind(std::string_view s) {
  if (s == "parity") return TaskKind::parity;
  if (s == "recall") return TaskKind::recall;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (steps < 0 || warmup < 0 || warmup > steps) throw std::invalid_argument("train: need 0 <= warmup <= steps");
  if (!(final_lr_fraction > 0 && final_lr_fraction <= 1)) throw std::invalid_argument("train: final_lr_fraction must be in (0, 1]");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("train: Adam betas must be in [0, 1)");
  if (lr < 0 || weight_decay < 0 || adam_eps <= 0 || clip_norm <= 0) throw std::invalid_argument("train: invalid optimizer settings");
  if (batch == 0 || eval_interval <= 0) throw std::invalid_argument("train: batch and eval_interval must be positive");
}

double cosine_lr(int step, const TrainConfig& cfg) {
  if (cfg.warmup > 0 && step < cfg.warmup) {
    return kWarmupStartLr + (cfg.lr - kWarmupStartLr) * static_cast<double>(step) / cfg.warmup;
  }
  const int span = cfg.steps - cfg.warmup;
  if (span <= 0) return cfg.lr;
  const double frac = std::clamp(static_cast<double>(step - cfg.warmup) / span, 0.0, 1.0);
  const double floor = cfg.final_lr_fraction * cfg.lr;
  return floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void adamw_step(ParameterSet& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw std::invalid_argument("adamw_step: one gradient per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params.entry(i).value, grads[i], "adamw_step");
    if (!grads[i].all_finite()) throw NumericError("adamw_step: non-finite gradient for " + params.entry(i).name);
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros_like(p.value));
      state.v.push_back(Tensor::zeros_like(p.value));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params.entry(i);
    auto w = p.value.data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] *= 1.0 - decay;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.adam_eps);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) ss += x * x;
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g.data()) x *= s;
  }
  return norm;
}

std::size_t task_vocab(const TaskSpec& task, std::size_t n_a_hint) {
  if (task.kind == TaskKind::parity) return 2;
  return std::max<std::size_t>(4 * task.n_pairs, n_a_hint);
}

Batch make_task_batch(const TaskSpec& task, std::size_t vocab, std::size_t batch, std::size_t len, Rng& rng) {
  if (task.kind == TaskKind::parity) return make_parity_batch(batch, len, rng);
  return make_recall_batch(batch, task.n_pairs, vocab, rng);
}

namespace {

Batch slice_batch(const Batch& b, std::size_t first, std::size_t count) {
  Batch out;
  out.batch = count;
  out.seq_len = b.seq_len;
  const std::size_t lo = first * b.seq_len, hi = (first + count) * b.seq_len;
  out.tokens.assign(b.tokens.begin() + lo, b.tokens.begin() + hi);
  out.targets.assign(b.targets.begin() + lo, b.targets.begin() + hi);
  out.mask.assign(b.mask.begin() + lo, b.mask.begin() + hi);
  return out;
}

void apply_first_token_rule(Batch& b, bool skip) {
  if (!skip) return;
  for (std::size_t s = 0; s < b.batch; ++s) b.mask[s * b.seq_len] = 0.0;
}

}  // namespace

EvalResult evaluate(const ModelConfig& model, const ParameterSet& params, const Batch& batch,
                    std::size_t max_rows_per_pass) {
  const std::size_t per_pass = std::max<std::size_t>(1, max_rows_per_pass / std::max<std::size_t>(1, batch.seq_len));
  double loss = 0.0, correct = 0.0, weight = 0.0;
  MixerTrace cg;
  for (std::size_t first = 0; first < batch.batch; first += per_pass) {
    const Batch part = slice_batch(batch, first, std::min(per_pass, batch.batch - first));
    ForwardTrace trace;
    const Mat logits = model_logits(model, params, part.tokens, part.seq_len, &trace);
    cg.cg_iterations += trace.cg.cg_iterations;
    cg.cg_solves += trace.cg.cg_solves;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double w = part.mask[static_cast<std::size_t>(r)];
      if (w <= 0) continue;
      const int tgt = part.targets[static_cast<std::size_t>(r)];
      Eigen::Index arg;
      const double m = logits.row(r).maxCoeff(&arg);
      const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
      loss += w * (lse - logits(r, tgt));
      correct += w * (arg == tgt ? 1.0 : 0.0);
      weight += w;
    }
  }
  EvalResult out;
  if (weight > 0) {
    out.loss = loss / weight;
    out.accuracy = correct / weight;
  }
  out.mean_cg_iters = cg.mean_iterations();
  return out;
}

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const MetricsSink& sink,
                  const ParameterSet* initial) {
  model.validate();
  cfg.validate();
  const Rng root(cfg.seed);
  Rng init_rng = root.derive("init");
  Rng data_rng = root.derive("data");
  Rng eval_rng = root.derive("eval");

  TrainResult result;
  ParameterSet params = initial ? *initial : init_model_params(model, init_rng);
  const std::size_t vocab = model.vocab;
  const std::size_t train_len = cfg.task.seq_len;
  Batch eval_set = make_task_batch(cfg.task, vocab, cfg.task.eval_batch, cfg.task.eval_len, eval_rng);
  apply_first_token_rule(eval_set, cfg.skip_first_token_loss);

  AdamState adam;
  double loss_sum = 0.0;
  int loss_count = 0;
  MixerTrace cg_window;
  auto window_start = std::chrono::steady_clock::now();

  result.params = params;
  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = cosine_lr(step, cfg);
    Batch batch = make_task_batch(cfg.task, vocab, cfg.batch, train_len, data_rng);
    apply_first_token_rule(batch, cfg.skip_first_token_loss);

    std::vector<Tensor> grads;
    double loss_value = 0.0;
    try {
      Tape tape;
      BoundParams bound(tape, params, true);
      ForwardTrace trace;
      const NodeId logits = model_forward(tape, bound, model, batch.tokens, batch.seq_len, &trace);
      const NodeId loss = ops::cross_entropy(tape, logits, batch.targets, batch.mask);
      loss_value = tape.value(loss)[0];
      const Gradients g = tape.backward(loss);
      grads.reserve(params.size());
      for (const auto& [name, id] : bound.ordered()) grads.push_back(g.at(id));
      cg_window.cg_iterations += trace.cg.cg_iterations;
      cg_window.cg_solves += trace.cg.cg_solves;
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = "step " + std::to_string(step + 1) + ": " + e.what();
      break;
    }
    if (!std::isfinite(loss_value)) {
      result.aborted = true;
      result.abort_reason = "step " + std::to_string(step + 1) + ": non-finite loss";
      break;
    }

    clip_global_norm(grads, cfg.clip_norm);
    adamw_step(params, grads, adam, lr, cfg);
    loss_sum += loss_value;
    ++loss_count;

    bool finite = true;
    for (const auto& p : params) finite = finite && p.value.all_finite();
    if (!finite) {
      result.aborted = true;
      result.abort_reason = "step " + std::to_string(step + 1) + ": non-finite parameters";
      break;
    }
    result.params = params;

    if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps) {
      const auto now = std::chrono::steady_clock::now();
      const double ms = std::chrono::duration<double, std::milli>(now - window_start).count();
      const EvalResult ev = evaluate(model, params, eval_set);
      MetricsRecord rec;
      rec.step = step + 1;
      rec.lr = lr;
      rec.loss = loss_sum / loss_count;
      rec.task_accuracy = ev.accuracy;
      rec.mean_cg_iters = cg_window.mean_iterations();
      rec.wall_ms = cfg.wall_time_in_metrics ? ms : 0.0;
      result.metrics.push_back(rec);
      result.wall_ms.push_back(ms);
      if (sink) sink(rec);
      loss_sum = 0.0;
      loss_count = 0;
      cg_window = {};
      window_start = std::chrono::steady_clock::now();
    }
  }
  return result;
}

}  // namespace mesanet
