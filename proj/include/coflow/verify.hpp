#pragma once

// Fast self-check suite run by `coflow verify`: oracles and invariants that
// need no training.

#include <string>
#include <vector>

#include "coflow/experiment.hpp"

namespace coflow {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<CheckResult> run_verify_suite(const ExperimentConfig& cfg);

// Norm-wise relative error between the taped gradient of
// sum(f(inputs) * probe) and its central difference with step h, worst
// over the inputs.
double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                      double h, std::uint64_t probe_seed);

}  // namespace coflow
