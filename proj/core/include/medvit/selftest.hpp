#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace medvit {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Fast invariant suite at 64-bit: primitive and micro-model gradient checks,
/// PMC identities, attack containment, AUC against pair counting. Fully
/// seeded; `progress` receives one line per check.
std::vector<CheckResult> run_selftest(std::ostream* progress = nullptr);

}  // namespace medvit
