#pragma once

// Finite-difference verification suites (f64) behind `cama gradcheck`.

#include <string>
#include <vector>

namespace cama {

struct SuiteCheck {
  std::string scope;
  std::string name;
  double max_rel_err = 0;
  double threshold = 0;
  std::vector<std::string> failing;  // parameter names above threshold

  bool passed() const { return failing.empty(); }
};

/// Scopes in execution order: ops, ssm, sdssm, ttssm, decoders, stack.
const std::vector<std::string>& gradcheck_scopes();
double gradcheck_threshold(const std::string& scope);

/// Runs one scope ("all" runs every scope). With `inject_fault`, the ops scope also
/// checks an op whose reverse pass is deliberately wrong, so the suite must fail.
std::vector<SuiteCheck> run_gradcheck(const std::string& scope, bool inject_fault = false);

}  // namespace cama
