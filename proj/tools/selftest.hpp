#pragma once

#include <string>

namespace caga::selftest {

// Runs the build's self-checks (gradient checks, oracle equivalences, shape
// and protocol invariants), printing one pass/fail line per check. Returns
// the number of failures. `inject_fault` names an op whose gradient-check
// result is deliberately corrupted before comparison, to prove the harness
// catches a wrong backward rule.
int run_all(const std::string& inject_fault = "");

} // namespace caga::selftest
