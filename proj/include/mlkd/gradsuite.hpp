#pragma once

#include <string>
#include <vector>

namespace mlkd {

// One loss-gradient check: the worst relative error between analytic and
// central-difference gradients over the seeded random instances.
struct GradCheckResult {
  std::string name;
  double max_rel_err;
  bool pass;
};

// Finite-difference checks for every loss with respect to every student-side
// input, 20 seeded random instances each, eps 1e-5, pass bound 1e-4.
std::vector<GradCheckResult> run_gradient_suite();

}  // namespace mlkd
