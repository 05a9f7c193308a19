#pragma once

#include <functional>
#include <string>

#include "taco/autograd.hpp"

namespace taco::num {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference verification of reverse-mode gradients. `build` must
// construct a fresh scalar graph from the current parameter values each time
// it is called; parameters are perturbed in place and restored. The relative
// error denominator is max(1, |analytic|, |numeric|) so near-zero gradients
// are compared absolutely.
GradCheckReport grad_check(const std::function<Var()>& build, const ParamSet& params,
                           double h = 1e-5);

}  // namespace taco::num
