#include "mesanet_cli/commands.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mesanet/baselines.hpp"
#include "mesanet/checkpoint.hpp"
#include "mesanet/inference.hpp"
#include "mesanet/mesa.hpp"
#include "mesanet/trainer.hpp"
#include "mesanet_cli/config.hpp"
#include "mesanet_cli/suites.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace mesanet::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& path, const ordered_json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

ordered_json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read " + path.string());
  return ordered_json::parse(f);
}

void refuse_collisions(const fs::path& dir, std::initializer_list<const char*> names, bool force) {
  if (force) return;
  for (const char* n : names) {
    if (fs::exists(dir / n)) {
      throw UsageError((dir / n).string() + " already exists (pass --force to overwrite)");
    }
  }
}

ordered_json config_json(const RunConfig& cfg) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : cfg.entries()) j[k] = v;
  return j;
}

RunConfig config_from_json(const ordered_json& j) {
  RunConfig cfg;
  for (const auto& [k, v] : j.items()) cfg.set(k, v.get<std::string>());
  cfg.finalize();
  return cfg;
}

ordered_json metrics_json(const MetricsRecord& m) {
  return ordered_json{{"step", m.step},
                      {"lr", m.lr},
                      {"loss", m.loss},
                      {"task_accuracy", m.task_accuracy},
                      {"mean_cg_iters", m.mean_cg_iters},
                      {"wall_ms", m.wall_ms}};
}

}  // namespace

std::string git_blob_sha1(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string header = "blob " + std::to_string(data.size()) + '\0';

  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, data.data(), data.size()) == 1 && EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

// ---------------------------------------------------------------- train

int cmd_train(const TrainOptions& opts, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    if (opts.config) {
      if (!fs::is_regular_file(*opts.config)) {
        err << "error: config file not found: " << opts.config->string() << '\n';
        return kExitUsage;
      }
      cfg = load_config(*opts.config);
    }
    if (opts.seed) cfg.set("seed", std::to_string(*opts.seed));
    if (opts.task) cfg.set("task", *opts.task);
    if (opts.steps) cfg.set("steps", std::to_string(*opts.steps));
    if (opts.mixer) cfg.set("mixer", *opts.mixer);
    if (opts.mode) cfg.set("mode", *opts.mode);
    if (cfg.train.warmup > cfg.train.steps) cfg.train.warmup = cfg.train.steps;
    cfg.finalize();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    fs::create_directories(opts.out);
    refuse_collisions(opts.out, {"manifest.json", "metrics.jsonl", "timings.jsonl", "model.ckpt"}, opts.force);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }

  const fs::path manifest_path = opts.out / "manifest.json";
  const fs::path metrics_path = opts.out / "metrics.jsonl";
  const fs::path timings_path = opts.out / "timings.jsonl";
  const fs::path ckpt_path = opts.out / "model.ckpt";

  ordered_json manifest;
  manifest["format"] = "mesanet-run-1";
  manifest["seed"] = cfg.train.seed;
  manifest["config"] = config_json(cfg);
  manifest["paths"] = {{"config", opts.config ? fs::absolute(*opts.config).string() : ""},
                       {"metrics", metrics_path.filename().string()},
                       {"timings", timings_path.filename().string()},
                       {"checkpoint", ckpt_path.filename().string()}};
  manifest["checkpoint_sha1"] = nullptr;
  manifest["status"] = "running";

  try {
    write_json(manifest_path, manifest);
    std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
    std::ofstream timings(timings_path, std::ios::binary | std::ios::trunc);
    if (!metrics || !timings) throw std::runtime_error("cannot open output files in " + opts.out.string());

    std::size_t record_index = 0;
    TrainResult result;
    const auto sink = [&](const MetricsRecord& m) {
      metrics << metrics_json(m).dump() << '\n';
      metrics.flush();
      if (!opts.quiet) {
        out << "step " << m.step << "  loss " << m.loss << "  acc " << m.task_accuracy << "  cg " << m.mean_cg_iters
            << '\n';
        out.flush();
      }
      ++record_index;
    };
    result = train(cfg.model, cfg.train, sink);
    for (std::size_t i = 0; i < result.metrics.size(); ++i) {
      timings << ordered_json{{"step", result.metrics[i].step}, {"wall_ms", result.wall_ms[i]}}.dump() << '\n';
    }

    save_checkpoint(ckpt_path, result.params);
    manifest["checkpoint_sha1"] = git_blob_sha1(ckpt_path);
    manifest["status"] = result.aborted ? "aborted" : "completed";
    if (result.aborted) manifest["abort_reason"] = result.abort_reason;
    write_json(manifest_path, manifest);

    if (result.aborted) {
      err << "error: training aborted at " << result.abort_reason << "; last finite parameters saved to "
          << ckpt_path.string() << '\n';
      return kExitFailure;
    }
    if (!opts.quiet) out << "wrote " << record_index << " metrics records to " << metrics_path.string() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

// ---------------------------------------------------------------- verify

int cmd_verify(const VerifyOptions& opts, std::ostream& out, std::ostream& err) {
  const auto& suites = verify_suites();
  const bool all = opts.suite == "all";
  if (!all && std::none_of(suites.begin(), suites.end(), [&](const auto& s) { return s.first == opts.suite; })) {
    err << "error: unknown suite '" << opts.suite << "' (expected cg, mesa, baselines, grads, app_f or all)\n";
    return kExitUsage;
  }
  bool ok = true;
  for (const auto& [name, run] : suites) {
    if (!all && name != opts.suite) continue;
    SuiteResult r;
    try {
      r = run(opts.seed);
    } catch (const std::exception& e) {
      r.name = name;
      r.check(false, std::string("exception: ") + e.what());
    }
    out << std::left << std::setw(10) << name << " passed " << r.passed << "  failed " << r.failed
        << "  worst deviation " << r.worst << '\n';
    for (const auto& f : r.failures) out << "    FAIL " << f << '\n';
    ok = ok && r.ok();
  }
  return ok ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------- bench

namespace {

using Clock = std::chrono::steady_clock;

template <class F>
double best_ms(int repeats, F&& f) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    f();
    best = std::min(best, std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  return best;
}

Vec step_output(Recurrence kind, LinearAttnState& s, const MesaSequence& seq, Eigen::Index t) {
  const Vec k = seq.K.col(t), v = seq.V.col(t), q = seq.Q.col(t);
  BaselineStep st;
  switch (kind) {
    case Recurrence::gla: st = gla_step(s, k, v, q, seq.beta(t), seq.gamma(t)); break;
    case Recurrence::mamba2: st = mamba2_step(s, k, v, q, seq.gamma(t)); break;
    case Recurrence::deltanet: st = deltanet_step(s, k, v, q, seq.beta(t)); break;
    case Recurrence::gated_deltanet: st = gated_deltanet_step(s, k, v, q, seq.beta(t), seq.gamma(t)); break;
    case Recurrence::mlstm: st = mlstm_step(s, k, v, q, seq.beta(t), seq.gamma(t)); break;
  }
  s = std::move(st.state);
  return st.o;
}

struct BenchRow {
  double fwd_ms = 0, fwd_bwd_ms = 0, seq_ms = 0;
};

BenchRow bench_one(MixerKind kind, int T, int C, int k, int n_a, int repeats, Rng& rng) {
  MesaSequence seq;
  seq.K.resize(n_a, T);
  seq.Q.resize(n_a, T);
  for (int t = 0; t < T; ++t) {
    seq.K.col(t) = rng.unit_vec(n_a);
    seq.Q.col(t) = rng.unit_vec(n_a);
  }
  seq.V = rng.normal_mat(n_a, T);
  seq.beta = Vec::NullaryExpr(T, [&] { return rng.uniform(0.1, 1.0); });
  seq.gamma = Vec::NullaryExpr(T, [&] { return rng.uniform(0.8, 1.0); });
  const Mat E = rng.normal_mat(n_a, T);
  const Vec lambda = Vec::Constant(n_a, 1.0);
  const CgOptions cg{0.0, k, CgInit::diagonal};

  BenchRow row;
  if (kind == MixerKind::mesa) {
    row.fwd_ms = best_ms(repeats, [&] { mesa_forward_chunked(seq, lambda, C, cg); });
    row.fwd_bwd_ms = best_ms(repeats, [&] {
      const MesaForward f = mesa_forward_chunked(seq, lambda, C, cg);
      mesa_backward_chunked(seq, lambda, f, E, cg);
    });
    row.seq_ms = best_ms(repeats, [&] { mesa_forward_sequential(seq, lambda, cg); });
  } else if (kind == MixerKind::softmax) {
    row.fwd_ms = best_ms(repeats, [&] { softmax_forward(seq.K, seq.V, seq.Q); });
    row.fwd_bwd_ms = best_ms(repeats, [&] { softmax_backward(seq.K, seq.V, seq.Q, E); });
    row.seq_ms = best_ms(repeats, [&] {
      for (int t = 0; t < T; ++t) softmax_attention(seq.K.leftCols(t + 1), seq.V.leftCols(t + 1), seq.Q.col(t));
    });
  } else {
    const Recurrence r = *as_recurrence(kind);
    row.fwd_ms = best_ms(repeats, [&] { recurrent_forward(r, seq); });
    row.fwd_bwd_ms = best_ms(repeats, [&] { recurrent_backward(r, seq, recurrent_forward(r, seq), E); });
    row.seq_ms = best_ms(repeats, [&] {
      LinearAttnState s = LinearAttnState::zeros(n_a, n_a, r == Recurrence::mlstm);
      for (int t = 0; t < T; ++t) step_output(r, s, seq, t);
    });
  }
  return row;
}

}  // namespace

int cmd_bench(const BenchOptions& opts, std::ostream& out, std::ostream& err) {
  MixerKind kind;
  try {
    kind = parse_mixer_kind(opts.mixer);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  auto positive = [](const std::vector<int>& v) {
    return !v.empty() && std::all_of(v.begin(), v.end(), [](int x) { return x > 0; });
  };
  if (!positive(opts.T) || !positive(opts.C) || !positive(opts.cg_steps) || opts.n_a <= 0 || opts.repeats <= 0) {
    err << "error: --T, --C, --cg-steps, --n-a and --repeats must be positive\n";
    return kExitUsage;
  }
  if (opts.csv && fs::exists(*opts.csv) && !opts.force) {
    err << "error: " << opts.csv->string() << " already exists (pass --force to overwrite)\n";
    return kExitUsage;
  }

  std::ostringstream csv;
  csv << "mixer,T,C,cg_steps,n_a,chunked_fwd_us_per_token,chunked_fwd_bwd_us_per_token,sequential_us_per_token,"
         "chunked_over_sequential\n";
  csv.precision(6);
  Rng rng = Rng(opts.seed).derive("bench");
  try {
    for (int T : opts.T)
      for (int C : opts.C)
        for (int k : opts.cg_steps) {
          const BenchRow r = bench_one(kind, T, C, k, opts.n_a, opts.repeats, rng);
          const double per = 1000.0 / T;
          csv << to_string(kind) << ',' << T << ',' << C << ',' << k << ',' << opts.n_a << ',' << r.fwd_ms * per
              << ',' << r.fwd_bwd_ms * per << ',' << r.seq_ms * per << ',' << r.fwd_ms / r.seq_ms << '\n';
        }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  out << csv.str();
  if (opts.csv) {
    std::ofstream f(*opts.csv, std::ios::trunc);
    if (!f) {
      err << "error: cannot write " << opts.csv->string() << '\n';
      return kExitFailure;
    }
    f << csv.str();
  }
  return kExitOk;
}

// ---------------------------------------------------------------- stats

int cmd_stats(const StatsOptions& opts, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  ParameterSet params;
  Batch eval;
  std::uint64_t seed = 0;
  try {
    const fs::path manifest_path = opts.ckpt.parent_path() / "manifest.json";
    if (!fs::is_regular_file(opts.ckpt)) throw UsageError("checkpoint not found: " + opts.ckpt.string());
    const ordered_json manifest = read_json(manifest_path);
    cfg = config_from_json(manifest.at("config"));
    seed = opts.seed.value_or(cfg.train.seed);
    cfg.train.task.kind = parse_task_kind(opts.eval);
    params = load_checkpoint(opts.ckpt, cfg.model);
    if (task_vocab(cfg.train.task, cfg.model.n_a) > cfg.model.vocab) {
      throw UsageError("task '" + opts.eval + "' needs a larger vocabulary than the checkpoint has");
    }
    if (opts.eval_batch == 0) throw UsageError("--eval-batch must be positive");
    fs::create_directories(opts.out);
    refuse_collisions(opts.out, {"sweep.csv", "head_stats.csv"}, opts.force);
    Rng rng = Rng(seed).derive("sweep");
    eval = make_task_batch(cfg.train.task, cfg.model.vocab, opts.eval_batch, cfg.train.task.eval_len, rng);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: manifest config: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }

  try {
    if (opts.eps_sweep) {
      std::vector<StopSetting> grid = default_stop_grid();
      if (!opts.eps.empty()) {
        grid.clear();
        for (double e : opts.eps) grid.push_back({e, cfg.model.cg.max_iters});
      }
      const std::vector<SweepRow> rows = sweep_stopping(cfg.model, params, grid, eval);
      std::ofstream f(opts.out / "sweep.csv", std::ios::trunc);
      f << "eps,max_iters,mean_cg_iters,accuracy,solves\n";
      f.precision(10);
      for (const SweepRow& r : rows) {
        f << r.eps << ',' << r.max_iters << ',' << r.mean_iterations << ',' << r.accuracy << ',' << r.solves << '\n';
        out << "eps " << r.eps << "  k_max " << r.max_iters << "  mean iters " << r.mean_iterations << "  accuracy "
            << r.accuracy << '\n';
      }
    }

    std::ofstream f(opts.out / "head_stats.csv", std::ios::trunc);
    if (cfg.model.mixer == MixerKind::mesa) {
      Rng rng = Rng(seed).derive("condition");
      const std::vector<int> first(eval.tokens.begin(), eval.tokens.begin() + static_cast<long>(eval.seq_len));
      write_stats_csv(f, head_condition_profile(cfg.model, params, first, cfg.model.cg, rng));
    } else {
      write_stats_csv(f, {});
      err << "note: condition profile needs a Mesa model; head_stats.csv has no rows\n";
    }
    out << "wrote " << (opts.out / "head_stats.csv").string() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace mesanet::cli
