#pragma once

// Central finite-difference checks for every differentiable operation.
// The FD side evaluates a fixed random linear functional of the op output in
// double precision; the analytic side backpropagates the same cotangent.
// Agreement is scored as an L2-relative error per leaf tensor.

#include <string>
#include <vector>

namespace pocketnet {

struct GradCheckResult {
    std::string op;
    int seeds = 0;
    double worst_rel_err = 0.0;
    bool pass = false;
};

std::vector<GradCheckResult> run_gradient_suite(int seeds_per_op = 20,
                                                double tolerance = 1e-3,
                                                double step = 1e-3);

bool gradient_suite_passed(const std::vector<GradCheckResult>& results);

}  // namespace pocketnet
