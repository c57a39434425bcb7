#include "coflow/experiment.hpp"

#include "coflow/errors.hpp"
#include "coflow/rng.hpp"

namespace coflow {
namespace {

constexpr std::uint64_t kTrainSalt = 0;
constexpr std::uint64_t kEvalSalt = 1u << 20;

void add_prefixed(ParamSet& dst, const std::string& prefix, const ParamSet& src) {
  for (const auto& [name, t] : src) dst.add(prefix + name, t);
}

ParamSet strip_prefix(const ParamSet& packed, const std::string& prefix) {
  ParamSet out;
  for (const auto& [name, t] : packed) {
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), t);
  }
  return out;
}

void require_all(const ParamSet& dst, const ParamSet& src, const std::string& what) {
  for (const auto& [name, t] : dst) {
    if (!src.contains(name)) throw FormatError("checkpoint is missing " + what + name, 0);
  }
}

void append(SystemTrainingLog& log, const TrainReport& r) {
  log.rows.insert(log.rows.end(), r.log.begin(), r.log.end());
  log.warnings.insert(log.warnings.end(), r.warnings.begin(), r.warnings.end());
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  model.grid.validate();
  model.anchors.validate();
  train.validate();
  eval.validate();
  if (train_scenarios < 1 || eval_scenarios < 1) throw ConfigError("scenario counts must be positive");
  if (model.codec.feature_channels != model.feature_channels) {
    throw ConfigError("model.codec feature channels must equal model.feature_channels");
  }
  for (double l : latencies_ms) {
    if (!(l >= 0.0)) throw ConfigError("latencies must be >= 0");
  }
  if (world.frame_count() < train.stage2.k_max + 2) throw ConfigError("world.duration too short for stage-2 pairs");
}

std::vector<Scenario> make_scenarios(const WorldConfig& world, int count, std::uint64_t seed, std::uint64_t salt) {
  std::vector<Scenario> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    WorldConfig w = world;
    w.seed = mix_seed(seed, salt + static_cast<std::uint64_t>(i));
    out.push_back(simulate(w));
  }
  return out;
}

std::vector<Scenario> training_scenarios(const ExperimentConfig& cfg) {
  return make_scenarios(cfg.world, cfg.train_scenarios, cfg.seed, kTrainSalt);
}

std::vector<Scenario> evaluation_scenarios(const ExperimentConfig& cfg) {
  return make_scenarios(cfg.world, cfg.eval_scenarios, cfg.seed, kEvalSalt);
}

TrainedSystem init_system(const ExperimentConfig& cfg) {
  TrainedSystem s;
  ModelConfig m = cfg.model;
  m.seed = mix_seed(cfg.seed, 1001);
  s.ffnet = CooperativeModel(m);
  ModelConfig wide = m;
  wide.codec.code_channels = 2 * m.codec.code_channels;
  wide.seed = mix_seed(cfg.seed, 1002);
  s.wide = CooperativeModel(wide);
  m.seed = mix_seed(cfg.seed, 1003);
  s.vehicle = SingleDetector(m, "vehicle_only");
  s.early = SingleDetector(m, "early");
  s.infra = SingleDetector(m, "infra_only");
  return s;
}

SystemTrainingLog train_system(TrainedSystem& system, const std::vector<Scenario>& scenarios,
                               const ExperimentConfig& cfg, const ProgressFn& progress) {
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  SystemTrainingLog log;
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 2001);

  note("stage1: FFNet");
  append(log, train_stage1(system.ffnet, scenarios, tc));
  note("stage1: MiddleNoPredWide");
  append(log, train_stage1(system.wide, scenarios, tc));
  note("detector: vehicle");
  append(log, train_detector(system.vehicle, DetectorRole::Vehicle, scenarios, tc));
  note("detector: early fusion");
  append(log, train_detector(system.early, DetectorRole::Early, scenarios, tc));
  note("detector: infrastructure");
  append(log, train_detector(system.infra, DetectorRole::Infra, scenarios, tc));

  note("stage2: infrastructure flow");
  const FlowCache cache = build_flow_cache(system.ffnet, scenarios);
  const auto pairs = build_pairs(scenarios, tc.stage2.k_min, tc.stage2.k_max, mix_seed(tc.seed, 3));
  append(log, train_stage2(system.ffnet, cache, pairs, tc, FlowSide::Infra));
  note("stage2: vehicle-side flow");
  append(log, train_stage2(system.ffnet, cache, pairs, tc, FlowSide::Vehicle));
  return log;
}

ParamSet pack_system(const TrainedSystem& system) {
  ParamSet p;
  add_prefixed(p, "ffnet/", system.ffnet.all_params());
  add_prefixed(p, "wide/", system.wide.all_params());
  add_prefixed(p, "vehicle/", system.vehicle.params());
  add_prefixed(p, "early/", system.early.params());
  add_prefixed(p, "infra/", system.infra.params());
  return p;
}

void unpack_system(TrainedSystem& system, const ParamSet& packed) {
  auto load = [&](ParamSet dst, const std::string& prefix) {
    const ParamSet src = strip_prefix(packed, prefix);
    require_all(dst, src, prefix);
    dst.assign(src);
  };
  load(system.ffnet.all_params(), "ffnet/");
  load(system.wide.all_params(), "wide/");
  load(system.vehicle.params(), "vehicle/");
  load(system.early.params(), "early/");
  load(system.infra.params(), "infra/");
}

}  // namespace coflow
