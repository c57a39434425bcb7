#pragma once

// End-to-end experiment wiring shared by the CLI, the acceptance suite and
// the Python module: scenario sets, training of every variant's networks
// and checkpoint packing.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "coflow/eval.hpp"
#include "coflow/trainer.hpp"

namespace coflow {

struct ExperimentConfig {
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  int train_scenarios = 20;
  int eval_scenarios = 8;
  std::vector<double> latencies_ms{0, 100, 200, 300, 500};
  std::uint64_t channel_seed = 0;
  std::uint64_t seed = 1;

  void validate() const;
};

// Scenario i uses world seed mix_seed(seed, salt + i). Training and
// evaluation sets use different salts so they never share a world.
std::vector<Scenario> make_scenarios(const WorldConfig& world, int count, std::uint64_t seed, std::uint64_t salt);
std::vector<Scenario> training_scenarios(const ExperimentConfig& cfg);
std::vector<Scenario> evaluation_scenarios(const ExperimentConfig& cfg);

using ProgressFn = std::function<void(const std::string&)>;

struct SystemTrainingLog {
  std::vector<LogRow> rows;
  std::vector<std::string> warnings;
};

// Fresh networks for every variant, seeded from cfg.seed.
TrainedSystem init_system(const ExperimentConfig& cfg);

// Stage 1 for the middle-fusion models and the three single detectors,
// then stage 2 (infra side) and the vehicle-side flow generator.
SystemTrainingLog train_system(TrainedSystem& system, const std::vector<Scenario>& scenarios,
                               const ExperimentConfig& cfg, const ProgressFn& progress = {});

// One checkpoint for the whole system; names carry a per-network prefix.
ParamSet pack_system(const TrainedSystem& system);
void unpack_system(TrainedSystem& system, const ParamSet& packed);

}  // namespace coflow
