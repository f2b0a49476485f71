#pragma once

#include <string>
#include <vector>

namespace rpm::selftest {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Invariant suite behind the `selftest` CLI command: exponential-family
// round trips and divergences, assignment matching against brute force,
// regression-metric affine invariance, generator determinism, and
// finite-difference gradient checks for the nets and a small GP factor
// model. Never throws; failures land in the results.
std::vector<CheckResult> run_all();

bool all_pass(const std::vector<CheckResult>& results);

}  // namespace rpm::selftest
