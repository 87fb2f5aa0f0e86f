#include "mesanet_cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace mesanet::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key, "invalid value '" + value + "' for key '" + key + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key, "invalid boolean '" + value + "' for key '" + key + "'");
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "n_layers", "n_e", "n_heads", "n_a", "mixer", "mode", "chunk", "cg_eps", "cg_max_iters", "cg_init",
      "gate_bias", "lr", "warmup", "steps", "final_lr_fraction", "weight_decay", "beta1", "beta2", "adam_eps",
      "clip_norm", "batch", "seed", "eval_interval", "skip_first_token_loss", "wall_time_in_metrics", "task",
      "seq_len", "n_pairs", "eval_batch", "eval_len"};
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto& m = model;
  auto& t = train;
  try {
    if (key == "n_layers") m.n_layers = parse_number<std::size_t>(key, value);
    else if (key == "n_e") m.n_e = parse_number<std::size_t>(key, value);
    else if (key == "n_heads") m.n_heads = parse_number<std::size_t>(key, value);
    else if (key == "n_a") m.n_a = parse_number<std::size_t>(key, value);
    else if (key == "mixer") m.mixer = parse_mixer_kind(value);
    else if (key == "mode") m.mode = parse_gate_mode(value);
    else if (key == "chunk") m.chunk = parse_number<int>(key, value);
    else if (key == "cg_eps") m.cg.eps = parse_number<double>(key, value);
    else if (key == "cg_max_iters") m.cg.max_iters = parse_number<int>(key, value);
    else if (key == "cg_init") {
      if (value == "diagonal") m.cg.init = CgInit::diagonal;
      else if (value == "query") m.cg.init = CgInit::query;
      else throw ConfigError(key, "cg_init must be 'diagonal' or 'query'");
    } else if (key == "gate_bias") m.gate_bias = parse_number<double>(key, value);
    else if (key == "lr") t.lr = parse_number<double>(key, value);
    else if (key == "warmup") t.warmup = parse_number<int>(key, value);
    else if (key == "steps") t.steps = parse_number<int>(key, value);
    else if (key == "final_lr_fraction") t.final_lr_fraction = parse_number<double>(key, value);
    else if (key == "weight_decay") t.weight_decay = parse_number<double>(key, value);
    else if (key == "beta1") t.beta1 = parse_number<double>(key, value);
    else if (key == "beta2") t.beta2 = parse_number<double>(key, value);
    else if (key == "adam_eps") t.adam_eps = parse_number<double>(key, value);
    else if (key == "clip_norm") t.clip_norm = parse_number<double>(key, value);
    else if (key == "batch") t.batch = parse_number<std::size_t>(key, value);
    else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "eval_interval") t.eval_interval = parse_number<int>(key, value);
    else if (key == "skip_first_token_loss") t.skip_first_token_loss = parse_bool(key, value);
    else if (key == "wall_time_in_metrics") t.wall_time_in_metrics = parse_bool(key, value);
    else if (key == "task") t.task.kind = parse_task_kind(value);
    else if (key == "seq_len") t.task.seq_len = parse_number<std::size_t>(key, value);
    else if (key == "n_pairs") t.task.n_pairs = parse_number<std::size_t>(key, value);
    else if (key == "eval_batch") t.task.eval_batch = parse_number<std::size_t>(key, value);
    else if (key == "eval_len") t.task.eval_len = parse_number<std::size_t>(key, value);
    else throw ConfigError(key, "unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, std::string(e.what()) + " (key '" + key + "')");
  }
}

void RunConfig::finalize() {
  model.vocab = task_vocab(train.task, model.n_a);
  if (train.task.kind == TaskKind::recall) {
    train.task.seq_len = 2 * train.task.n_pairs + 1;
    train.task.eval_len = train.task.seq_len;
  }
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("", e.what());
  }
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  const auto& m = model;
  const auto& t = train;
  return {
      {"n_layers", std::to_string(m.n_layers)},
      {"n_e", std::to_string(m.n_e)},
      {"n_heads", std::to_string(m.n_heads)},
      {"n_a", std::to_string(m.n_a)},
      {"mixer", std::string(to_string(m.mixer))},
      {"mode", std::string(to_string(m.mode))},
      {"chunk", std::to_string(m.chunk)},
      {"cg_eps", fmt(m.cg.eps)},
      {"cg_max_iters", std::to_string(m.cg.max_iters)},
      {"cg_init", m.cg.init == CgInit::diagonal ? "diagonal" : "query"},
      {"gate_bias", fmt(m.gate_bias)},
      {"lr", fmt(t.lr)},
      {"warmup", std::to_string(t.warmup)},
      {"steps", std::to_string(t.steps)},
      {"final_lr_fraction", fmt(t.final_lr_fraction)},
      {"weight_decay", fmt(t.weight_decay)},
      {"beta1", fmt(t.beta1)},
      {"beta2", fmt(t.beta2)},
      {"adam_eps", fmt(t.adam_eps)},
      {"clip_norm", fmt(t.clip_norm)},
      {"batch", std::to_string(t.batch)},
      {"seed", std::to_string(t.seed)},
      {"eval_interval", std::to_string(t.eval_interval)},
      {"skip_first_token_loss", t.skip_first_token_loss ? "true" : "false"},
      {"wall_time_in_metrics", t.wall_time_in_metrics ? "true" : "false"},
      {"task", std::string(to_string(t.task.kind))},
      {"seq_len", std::to_string(t.task.seq_len)},
      {"n_pairs", std::to_string(t.task.n_pairs)},
      {"eval_batch", std::to_string(t.task.eval_batch)},
      {"eval_len", std::to_string(t.task.eval_len)},
  };
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(line, "line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace mesanet::cli
