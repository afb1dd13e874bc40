#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace minisam {

struct GradCheckResult {
    std::string name;
    float max_rel_err = 0.0f;
    bool pass = false;
};

// Compares every differentiable op's analytic gradient against central finite
// differences on seeded random inputs, including an end-to-end joint-loss
// check through the full model. Passing threshold: relative error <= 1e-3.
std::vector<GradCheckResult> run_gradcheck(uint64_t seed = 0);

bool gradcheck_all_pass(const std::vector<GradCheckResult>& results);

}  // namespace minisam
