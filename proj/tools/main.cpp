// coflow: scenario generation, training, latency sweeps and self-checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "coflow/bytes.hpp"
#include "coflow/errors.hpp"
#include "coflow/experiment.hpp"
#include "coflow/verify.hpp"
#include "spec.hpp"

namespace fs = std::filesystem;
using namespace coflow;

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3 };

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_file(const fs::path& path, const std::string& bytes) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string with_header(const std::string& csv, const std::string& spec_hash, std::uint64_t seed) {
  return "# spec_hash=" + spec_hash + " seed=" + std::to_string(seed) + "\n" + csv;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Options {
  std::string spec;
  std::string out;
  std::string scenarios;
  std::string checkpoint;
  std::string variants;
  std::string latencies;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

cli::LoadedSpec load(const Options& o) {
  cli::LoadedSpec s = cli::load_spec(o.spec);
  if (o.seed_set) s.config.seed = o.seed;
  if (!o.latencies.empty()) {
    s.config.latencies_ms.clear();
    for (const auto& t : split(o.latencies)) {
      try {
        s.config.latencies_ms.push_back(std::stod(t));
      } catch (const std::exception&) {
        throw ConfigError("--latencies: bad value '" + t + "'");
      }
    }
    s.config.validate();
  }
  return s;
}

void write_scenarios(const fs::path& dir, const std::vector<Scenario>& scenarios, const std::string& hash) {
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scenario_%03zu", i);
    const fs::path sd = dir / name;
    write_file(sd / "index.json", scenario_index_json(scenarios[i], hash));
    for (const auto& fr : scenarios[i].frames) {
      write_file(sd / cloud_file_name(Frame::Infra, fr.index), encode_cloud(fr.infra_cloud));
      write_file(sd / cloud_file_name(Frame::Vehicle, fr.index), encode_cloud(fr.vehicle_cloud));
    }
  }
}

std::vector<Scenario> read_scenarios(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("scenario directory not found: " + dir.string());
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  std::vector<Scenario> out;
  for (const auto& d : subdirs) out.push_back(load_scenario(d.string()));
  if (out.empty()) throw IoError("no scenarios under " + dir.string());
  return out;
}

int cmd_gen(const Options& o) {
  const auto spec = load(o);
  const fs::path out(o.out);
  const auto train = training_scenarios(spec.config);
  const auto eval = evaluation_scenarios(spec.config);
  write_scenarios(out / "train", train, spec.hash);
  write_scenarios(out / "eval", eval, spec.hash);
  nlohmann::json m;
  m["spec_hash"] = spec.hash;
  m["seed"] = spec.config.seed;
  m["train_scenarios"] = train.size();
  m["eval_scenarios"] = eval.size();
  write_file(out / "manifest.json", m.dump(2) + "\n");
  std::printf("wrote %zu training and %zu evaluation scenarios to %s\n", train.size(), eval.size(), o.out.c_str());
  return kOk;
}

int cmd_train(const Options& o) {
  const auto spec = load(o);
  const fs::path out(o.out);
  const auto scenarios =
      o.scenarios.empty() ? training_scenarios(spec.config) : read_scenarios(fs::path(o.scenarios) / "train");
  TrainedSystem system = init_system(spec.config);
  const auto log = train_system(system, scenarios, spec.config,
                                [](const std::string& s) { std::fprintf(stderr, "[train] %s\n", s.c_str()); });
  for (const auto& w : log.warnings) std::fprintf(stderr, "[warn] %s\n", w.c_str());
  const std::string ckpt = encode_checkpoint(pack_system(system));
  write_file(out / "system.cfwt", ckpt);
  write_file(out / "training_log.csv", with_header(training_log_csv(log.rows), spec.hash, spec.config.seed));
  nlohmann::json m;
  m["spec_hash"] = spec.hash;
  m["seed"] = spec.config.seed;
  m["checkpoint"] = "system.cfwt";
  m["checkpoint_fnv1a64"] = hex64(fnv1a64(ckpt));
  m["training_scenarios"] = scenarios.size();
  m["warnings"] = log.warnings;
  write_file(out / "manifest.json", m.dump(2) + "\n");
  std::printf("wrote %s\n", (out / "system.cfwt").c_str());
  return kOk;
}

int cmd_sweep(const Options& o) {
  const auto spec = load(o);
  if (o.checkpoint.empty()) throw ConfigError("sweep needs --checkpoint");
  if (!fs::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
  TrainedSystem system = init_system(spec.config);
  unpack_system(system, decode_checkpoint(read_file(o.checkpoint)));
  std::vector<Variant> variants;
  if (o.variants.empty()) {
    variants = all_variants();
  } else {
    for (const auto& v : split(o.variants)) variants.push_back(parse_variant(v));
  }
  const auto scenarios =
      o.scenarios.empty() ? evaluation_scenarios(spec.config) : read_scenarios(fs::path(o.scenarios) / "eval");
  const auto rows =
      run_latency_sweep(system, scenarios, variants, spec.config.latencies_ms, spec.config.channel_seed, spec.config.eval);
  const fs::path out(o.out);
  const std::string csv = sweep_csv(rows, spec.hash);
  write_file(out / "results.csv", csv);
  for (Variant v : variants) {
    write_file(out / ("curve_" + to_string(v) + ".dat"), latency_curve(rows, to_string(v), spec.hash));
  }
  std::fputs(csv.c_str(), stdout);
  return kOk;
}

int cmd_verify(const Options& o) {
  ExperimentConfig cfg;
  if (!o.spec.empty()) cfg = load(o).config;
  int failed = 0;
  for (const auto& r : run_verify_suite(cfg)) {
    std::printf("%s  %s%s%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.empty() ? "" : "  ",
                r.detail.c_str());
    if (!r.passed) ++failed;
  }
  std::printf("%d check(s) failed\n", failed);
  return failed == 0 ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coflow: cooperative detection with feature-flow latency compensation"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub, bool spec_required) {
    auto* s = sub->add_option("--spec", o.spec, "experiment spec (YAML)");
    if (spec_required) s->required();
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t v) { o.seed = v, o.seed_set = true; }, "override the spec seed");
  };
  auto* gen = app.add_subcommand("gen", "simulate scenarios and write them to --out");
  add_common(gen, true);
  gen->add_option("--out", o.out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train every variant and write a checkpoint");
  add_common(train, true);
  train->add_option("--scenarios", o.scenarios, "directory written by gen (default: regenerate)");
  train->add_option("--out", o.out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "evaluate variants across latencies");
  add_common(sweep, true);
  sweep->add_option("--checkpoint", o.checkpoint, "system.cfwt from train")->required();
  sweep->add_option("--scenarios", o.scenarios, "directory written by gen (default: regenerate)");
  sweep->add_option("--out", o.out, "output directory")->required();
  sweep->add_option("--variants", o.variants, "comma-separated variant names");
  sweep->add_option("--latencies", o.latencies, "comma-separated latencies in ms");

  auto* verify = app.add_subcommand("verify", "run the oracle and invariant checks");
  add_common(verify, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*train) return cmd_train(o);
    if (*sweep) return cmd_sweep(o);
    if (*verify) return cmd_verify(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
