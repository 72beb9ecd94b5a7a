#pragma once

#include "sdlab/distill.hpp"
#include "sdlab/metrics.hpp"

#include <json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace sdlab {

struct ParticleInit {
  enum class Kind { noise, class_label, corruption_of_target } kind = Kind::noise;
  std::string label;  // class_label only
  double scale = 1.0;  // noise only: standard deviation of the draw
};

struct ExperimentConfig {
  nlohmann::json world_spec = "b1";  // builtin name, file path, or inline world object
  std::shared_ptr<const World> world;
  Renderer renderer;
  std::vector<DistillSpec> methods;
  std::vector<std::string> targets;  // cycled over scenarios; defaults to content classes
  int scenarios = 16;
  int n_particles = 64;
  ParticleInit init;
  OptimizerConfig optimizer;
  long iters = 2500;
  long eval_every = 100;
  long log_every = 10;
  long snapshot_every = 500;
  int metrics_n = 10000;
  int slices = 1024;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  int threads = 0;

  nlohmann::json source;  // the JSON this config was parsed from
};

/// Errors carry the JSON path of the offending key.
ExperimentConfig parse_experiment(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::string& path);
nlohmann::json experiment_to_json(const ExperimentConfig& c);

DistillSpec parse_method(const nlohmann::json& j, const std::string& path);
nlohmann::json method_to_json(const DistillSpec& spec);

/// Three fixed views of a 4-parameter object into the plane.
Renderer multiview_preset();

/// 64-bit FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);
/// Hash of everything that affects results; output_dir and threads are left out.
std::string experiment_hash(const ExperimentConfig& c);

/// Final per-scenario numbers for one method.
struct ScenarioResult {
  int scenario = 0;
  std::string target;
  MetricReport final_metrics;
  MetricReport init_metrics;
  long n_evals = 0;
  long fit_ops = 0;
  bool aborted = false;
  int non_monotone = 0;  // evaluation intervals where the Fréchet distance rose
  double wall_ms = 0.0;
};

struct MethodResult {
  std::string name;
  std::string hash;
  std::vector<ScenarioResult> scenarios;
  std::vector<RunRecord> records;

  double mean_final_frechet() const;
  double mean_final_loglik() const;
  long total_evals() const;
  long total_fit_ops() const;
  bool any_aborted() const;
};

struct BenchmarkResult {
  std::vector<MethodResult> methods;
  nlohmann::json summary;
  bool any_aborted() const;
  const MethodResult& at(std::string_view name) const;
};

struct RunOptions {
  bool write = true;
  bool keep_records = false;
  Exec exec = Exec::parallel;
};

BenchmarkResult run_benchmark(const ExperimentConfig& config, const RunOptions& opt = {});
/// Ours with stage-1 steps {0, configured} plus the stage-1 SDS arm on its own.
BenchmarkResult run_ablation_stage1(const ExperimentConfig& config, const RunOptions& opt = {});
/// {ours, bridge after warmup, bridge from scratch}.
BenchmarkResult run_bridge_study(const ExperimentConfig& config, const RunOptions& opt = {});

/// Built-in configuration for `bench` runs on a builtin world.
ExperimentConfig default_experiment(const std::string& world);
/// Methods the table run compares when the config lists none.
std::vector<DistillSpec> default_table_methods();

std::string format_double(double v);

/// Headerless CSV, one point per row.
Points read_points_csv(const std::string& path);
std::string points_csv(const Points& p);

/// CSV text for one method's records; `# config_hash=` comment first.
std::string record_csv(const MethodResult& m, const std::string& hash);

}  // namespace sdlab
