#include "mesanet/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mesanet {

Tensor& ParameterSet::add(std::string name, Tensor value, bool decay) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, items_.size());
  items_.push_back({std::move(name), std::move(value), decay});
  return items_.back().value;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return items_[it->second].value;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return items_[it->second].value;
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

BoundParams::BoundParams(Tape& tape, const ParameterSet& params, bool trainable) {
  for (const auto& p : params) {
    const NodeId id = trainable ? tape.variable(p.value, p.name) : tape.constant(p.value);
    ids_.emplace(p.name, id);
    ordered_.emplace_back(p.name, id);
  }
}

NodeId BoundParams::operator[](const std::string& name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) throw std::out_of_range("parameter '" + name + "' is not bound");
  return it->second;
}

MixerConfig ModelConfig::mixer_config() const {
  MixerConfig m;
  m.n_e = n_e;
  m.n_heads = n_heads;
  m.n_a = n_a;
  m.kind = mixer;
  m.mode = mode;
  m.chunk = chunk;
  m.cg = cg;
  m.gate_bias = gate_bias;
  return m;
}

void ModelConfig::validate() const {
  if (n_layers == 0) throw std::invalid_argument("model: n_layers must be >= 1");
  if (vocab < 2) throw std::invalid_argument("model: vocab must be >= 2");
  mixer_config().validate();
}

std::string block_prefix(std::size_t layer) { return "blocks." + std::to_string(layer) + "."; }

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

}  // namespace

ParameterSet init_model_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet ps;
  const double n_e = static_cast<double>(cfg.n_e);
  const double residual_scale = std::sqrt(2.0 / static_cast<double>(cfg.n_layers));
  ps.add("embed", normal_tensor({cfg.vocab, cfg.n_e}, 1.0 / std::sqrt(n_e), rng), false);
  const MixerConfig mc = cfg.mixer_config();
  const std::size_t hidden = 3 * cfg.n_e;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = block_prefix(l);
    ps.add(pre + "norm1", Tensor({cfg.n_e}, 1.0));
    init_mixer_params(ps, pre + "mixer.", mc, rng,
                      residual_scale / std::sqrt(static_cast<double>(mc.width())));
    ps.add(pre + "norm2", Tensor({cfg.n_e}, 1.0));
    ps.add(pre + "mlp.w_gate", normal_tensor({hidden, cfg.n_e}, 1.0 / std::sqrt(n_e), rng));
    ps.add(pre + "mlp.w_up", normal_tensor({hidden, cfg.n_e}, 1.0 / std::sqrt(n_e), rng));
    ps.add(pre + "mlp.w_down",
           normal_tensor({cfg.n_e, hidden}, residual_scale / std::sqrt(static_cast<double>(hidden)), rng));
  }
  ps.add("final_norm", Tensor({cfg.n_e}, 1.0));
  return ps;
}

std::size_t model_param_count(const ModelConfig& cfg) {
  const std::size_t per_block = 2 * cfg.n_e + mixer_param_count(cfg.mixer_config()) + 3 * 3 * cfg.n_e * cfg.n_e;
  return cfg.vocab * cfg.n_e + cfg.n_layers * per_block + cfg.n_e;
}

NodeId block_forward(Tape& tape, const BoundParams& p, const ModelConfig& cfg, std::size_t layer, NodeId x,
                     std::size_t seq_len, ForwardTrace* trace) {
  const std::string pre = block_prefix(layer);
  const NodeId h1 = ops::rms_norm(tape, x, p[pre + "norm1"], cfg.n_e);
  MixerInternals internals;
  const bool collect = trace && trace->collect_internals;
  const NodeId mixed = mixer_forward(tape, p, pre + "mixer.", cfg.mixer_config(), h1, seq_len,
                                     trace ? &trace->cg : nullptr, collect ? &internals : nullptr);
  if (collect) trace->layers.push_back(std::move(internals));
  const NodeId x1 = ops::add(tape, x, mixed);

  const NodeId h2 = ops::rms_norm(tape, x1, p[pre + "norm2"], cfg.n_e);
  const NodeId gate = ops::silu(tape, ops::linear(tape, h2, p[pre + "mlp.w_gate"]));
  const NodeId up = ops::linear(tape, h2, p[pre + "mlp.w_up"]);
  const NodeId down = ops::linear(tape, ops::mul(tape, gate, up), p[pre + "mlp.w_down"]);
  return ops::add(tape, x1, down);
}

NodeId model_forward(Tape& tape, const BoundParams& p, const ModelConfig& cfg, const std::vector<int>& tokens,
                     std::size_t seq_len, ForwardTrace* trace) {
  if (seq_len == 0 || tokens.size() % seq_len != 0) throw ShapeError("model_forward: token count not a multiple of seq_len");
  NodeId x = ops::scale(tape, ops::embed(tape, p["embed"], tokens), std::sqrt(static_cast<double>(cfg.n_e)));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) x = block_forward(tape, p, cfg, l, x, seq_len, trace);
  const NodeId h = ops::rms_norm(tape, x, p["final_norm"], cfg.n_e);
  const NodeId raw = ops::linear(tape, h, p["embed"]);
  return ops::scale(tape, ops::tanh(tape, ops::scale(tape, raw, 1.0 / kLogitCap)), kLogitCap);
}

Mat model_logits(const ModelConfig& cfg, const ParameterSet& params, const std::vector<int>& tokens,
                 std::size_t seq_len, ForwardTrace* trace) {
  Tape tape;
  BoundParams bound(tape, params, false);
  return tape.value(model_forward(tape, bound, cfg, tokens, seq_len, trace)).to_matrix();
}

}  // namespace mesanet
