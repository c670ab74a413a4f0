#pragma once

// Fast invariant suite behind the `selfcheck` subcommand: streaming/scan
// equivalence, the dt->0 fixed point, router constraint satisfaction, the
// balanced fast initialization, gradient spot checks, and FLOP/parameter
// reconciliation on the tiny presets. Designed to finish well under a minute.

#include <string>
#include <vector>

#include "bm/common.hpp"

namespace bm {

struct SelfcheckOptions {
  // Test hook: flips the dA sign inside the full-sequence scan so the
  // equivalence check must fail and be reported.
  bool inject_flip_da_sign = false;
};

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opts = {});

}  // namespace bm
