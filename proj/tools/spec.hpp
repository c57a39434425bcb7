#pragma once

// YAML experiment spec: sections world, model, train, channel, eval and a
// mandatory top-level seed. Unknown keys are rejected with their line.

#include <string>

#include "coflow/experiment.hpp"

namespace coflow::cli {

struct LoadedSpec {
  ExperimentConfig config;
  std::string hash;  // FNV-1a of the spec text, hex
};

LoadedSpec parse_spec(const std::string& text);
LoadedSpec load_spec(const std::string& path);

}  // namespace coflow::cli
