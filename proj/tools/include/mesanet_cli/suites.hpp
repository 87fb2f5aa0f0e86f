#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mesanet::cli {

struct SuiteResult {
  SuiteResult() = default;
  explicit SuiteResult(std::string n) : name(std::move(n)) {}

  std::string name;
  int passed = 0;
  int failed = 0;
  double worst = 0.0;                 // largest observed deviation
  std::vector<std::string> failures;  // first few failing check descriptions

  bool ok() const { return failed == 0; }
  void check(bool ok, const std::string& what, double deviation = 0.0);
};

using Suite = std::function<SuiteResult(std::uint64_t seed)>;

// Named oracle suites in run order: cg, mesa, baselines, grads, app_f.
const std::vector<std::pair<std::string, Suite>>& verify_suites();

SuiteResult run_cg_suite(std::uint64_t seed);
SuiteResult run_mesa_suite(std::uint64_t seed);
SuiteResult run_baselines_suite(std::uint64_t seed);
SuiteResult run_grads_suite(std::uint64_t seed);
SuiteResult run_app_f_suite(std::uint64_t seed);

}  // namespace mesanet::cli
