#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apl/autodiff.hpp"

namespace apl::gradcheck {

// relative tolerance against central finite differences
constexpr double kTolerance = 1e-4;

struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass() const { return max_rel_err <= kTolerance; }
};

// builds a scalar-valued graph over the given leaves
using GraphBuilder = std::function<ag::NodePtr(const std::vector<ag::NodePtr>&)>;

// Compares reverse-mode gradients against central differences with step
// h = 1e-4 * max(1, |x|) per element; returns the max of
// |autodiff - fd| / max(1, |fd|) over all input elements.
double max_rel_grad_err(const GraphBuilder& build, const std::vector<Tensor>& inputs);

std::vector<CheckResult> check_ops(uint64_t seed, int rounds = 10);
std::vector<CheckResult> check_lm(uint64_t seed);
std::vector<CheckResult> check_losses(uint64_t seed);

double worst_err(std::span<const CheckResult> results);

} // namespace apl::gradcheck
