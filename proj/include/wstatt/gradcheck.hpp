#pragma once

#include <functional>
#include <string>

#include "wstatt/kernels.hpp"

namespace wstatt {

struct GradcheckResult {
  double max_rel_err = 0.0;
  Index worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Central finite differences of a scalar closure against an analytic
// gradient. f() must read the current contents of x; coordinates are
// perturbed in place and restored. Relative error uses
// |a - n| / max(|a|, |n|, 1e-8). max_coords < n samples a seeded subset.
GradcheckResult gradcheck(const std::function<double()>& f, double* x, Index n,
                          const double* analytic, double step = 1e-5,
                          Index max_coords = -1, uint64_t seed = 0);

// Central finite difference along a seeded random unit direction over the
// whole coordinate block, compared with <analytic, v>. Certifies a parameter
// group at loss scales where per-coordinate differences drown in rounding.
GradcheckResult gradcheck_direction(const std::function<double()>& f, double* x, Index n,
                                    const double* analytic, double step = 1e-5,
                                    uint64_t seed = 0);

struct KernelCheck {
  std::string name;
  double max_rel_err;
};

// The finite-difference suite over every differentiable kernel plus the
// end-to-end model loss; seeds 0..n_seeds-1. Used by tests and the CLI.
std::vector<KernelCheck> run_gradcheck_suite(int n_seeds);

}  // namespace wstatt
