#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mesanet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct TrainOptions {
  std::optional<std::filesystem::path> config;
  std::filesystem::path out;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<int> steps;
  std::optional<std::string> mixer;
  std::optional<std::string> mode;
  bool quiet = false;
};

// Writes <out>/manifest.json before training, then metrics.jsonl,
// timings.jsonl and model.ckpt; the manifest gains the checkpoint hash last.
int cmd_train(const TrainOptions& opts, std::ostream& out, std::ostream& err);

struct VerifyOptions {
  std::string suite = "all";
  std::uint64_t seed = 0;
};

int cmd_verify(const VerifyOptions& opts, std::ostream& out, std::ostream& err);

struct BenchOptions {
  std::string mixer = "mesa";
  std::vector<int> T{512};
  std::vector<int> C{64};
  std::vector<int> cg_steps{10};
  int n_a = 32;
  int repeats = 3;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> csv;
  bool force = false;
};

// CSV columns: mixer,T,C,cg_steps,n_a,chunked_fwd_us_per_token,
// chunked_fwd_bwd_us_per_token,sequential_us_per_token,chunked_over_sequential
int cmd_bench(const BenchOptions& opts, std::ostream& out, std::ostream& err);

struct StatsOptions {
  std::filesystem::path ckpt;
  std::string eval = "recall";
  bool eps_sweep = false;
  std::vector<double> eps;  // empty: default grid
  std::size_t eval_batch = 64;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  bool force = false;
};

// Writes <out>/head_stats.csv and, with eps_sweep, <out>/sweep.csv.
int cmd_stats(const StatsOptions& opts, std::ostream& out, std::ostream& err);

// Git blob hash: SHA-1 of "blob <size>\0" followed by the bytes.
std::string git_blob_sha1(const std::filesystem::path& path);

int run_cli(int argc, char** argv);

}  // namespace mesanet::cli
