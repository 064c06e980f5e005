#pragma once

// Oracle and property suites shared by `vloss verify` and the acceptance run.
// Each check reports one TAP line.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "vloss/core/tensor.hpp"

namespace vloss {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const;
  Index failures() const;
  /// "1..n" followed by "ok k - name # detail" / "not ok k - ..." lines.
  void write_tap(std::ostream& os) const;
};

/// Finite differences (f64, step 1e-5) for every catalog op and every
/// composite loss over `seeds` seeds; a check passes below `tol`.
SuiteReport verify_gradcheck(int seeds = 10, double tol = 1e-4);

/// Random cost matrices up to 7x7 (rectangular included) against the
/// exhaustive permutation minimum.
SuiteReport verify_hungarian(int cases = 1000, std::uint64_t seed = 0);

/// PQ and mask AP against the brute-force references on random scenes, plus
/// the hand-worked values.
SuiteReport verify_metrics(int cases = 100, std::uint64_t seed = 0);

/// Exclusion, exactness, caption ubiquity and determinism over random
/// (sizes, seed) configurations, for every strategy.
SuiteReport verify_scheduler(int configs = 200, std::uint64_t seed = 0);

/// Dispatch by suite name; unknown names throw ValidationError.
SuiteReport run_verify_suite(const std::string& name);
const std::vector<std::string>& verify_suite_names();

}  // namespace vloss
