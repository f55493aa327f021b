#pragma once

#include <string>
#include <vector>

#include "volflow/common.hpp"

// Runtime invariant suites: invertibility, dense-Jacobian log-det agreement,
// finite-difference gradient agreement, and the latent shape law. Backed by
// the independent oracles, not the implementation paths they check.

namespace volflow {

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

// resolution/levels size the random model used for the invertibility check;
// the Jacobian and gradient checks always run on small fixed toys.
VerifyReport run_verify(int64_t resolution, int levels, Precision precision, uint64_t seed);

}  // namespace volflow
