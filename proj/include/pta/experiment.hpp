#pragma once

#include "pta/attack.hpp"
#include "pta/detect.hpp"
#include "pta/evalharness.hpp"
#include "pta/synthworld.hpp"
#include "pta/theory.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace pta {

inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr int kResultsSchemaVersion = 1;

enum class Task { classification, retrieval, poisoning };
Task parse_task(std::string_view s);
std::string_view to_string(Task t);

struct WorldConfig {
  Preset preset = Preset::retrieval;
  int clusters = 8;
  WorldDims dims;
  std::vector<ClusterSpec> specs;  // overrides the preset when non-empty
};

struct EvaluationConfig {
  Task task = Task::retrieval;
  std::size_t K = 50;         // detection window per query
  std::size_t success_k = 1;  // an injected item in a query's top-success_k counts as success
  double injection_ratio = 0.01;
  std::size_t references = 100;   // classification detection pool
  int aes_per_class = 2;          // classification
  double query_dispersion = 0.8;  // poisoning: text-side query noise
};

struct SweepConfig {
  std::string parameter;  // alpha | N_c | N_s | epsilon | query_budget | injection_ratio
  std::vector<double> values;
};

/// The attack-side knobs of one trial.
struct AttackPlan {
  Objective method = Objective::pta;
  AttackConfig attack;
  int n_c = 50;
  int n_s = 25;
};

struct ExperimentConfig {
  std::string name = "experiment";
  WorldConfig world;
  std::vector<Objective> methods{Objective::illusion, Objective::pta};
  AttackConfig attack;
  bool step_from_epsilon = true;  // step_size = epsilon / 10 unless given
  int n_c = 50;
  int n_s = 25;
  DetectionConfig detection;
  EvaluationConfig evaluation;
  std::optional<SweepConfig> sweep;
  int trials = 1;
  std::uint64_t seed = 0;
  std::string output_dir = "results";
  int jobs = 1;

  /// Parses and validates, collecting every violation into one ValidationError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// FNV-1a 64 of the canonical JSON without output_dir and jobs, as 16 hex digits.
  std::string hash() const;
  /// Plan for one method at one sweep value (NaN-free; value ignored without a sweep).
  AttackPlan plan(Objective method, std::optional<double> sweep_value) const;
  EvaluationConfig evaluation_at(std::optional<double> sweep_value) const;
};

/// Parses "8/255", "0.03" or a JSON number.
double parse_fraction(const nlohmann::json& v);

/// Applies dotted overrides ("attack.alpha=0.4") on top of a JSON document.
/// Values are parsed as JSON when possible and kept as strings otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Everything a trial needs, computed once per (config, trial seed).
struct TrialWorld {
  WorldSnapshot world;
  std::vector<EmbeddingSet> source;  // per-cluster source embeddings
};
TrialWorld build_trial_world(const WorldConfig& cfg, std::uint64_t seed);

MetricReport run_classification_trial(const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                                      const EvaluationConfig& ev, std::uint64_t seed);
MetricReport run_retrieval_trial(const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                                 const EvaluationConfig& ev, std::uint64_t seed);
MetricReport run_poisoning_trial(const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                                 const EvaluationConfig& ev, std::uint64_t seed);
MetricReport run_trial(Task task, const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                       const EvaluationConfig& ev, std::uint64_t seed);

/// Goal for attacking target cluster `t` under `plan`.
Goal make_goal(const TrialWorld& tw, std::size_t t, const AttackPlan& plan);

struct ResultRow {
  std::string experiment_id;
  std::string config_hash;
  int trial = 0;
  std::uint64_t seed = 0;
  std::string sweep_parameter;
  std::optional<double> sweep_value;
  AttackPlan plan;
  Detector detector = Detector::knn;
  Task task = Task::retrieval;
  MetricReport report;

  nlohmann::json to_json() const;
};

void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows);
std::string format_double(double v);

struct RunManifest {
  std::string config_hash;
  std::string tool_version{kToolVersion};
  std::vector<std::uint64_t> trial_seeds;
  std::vector<std::string> emitted_files;
  std::string created_at;
  std::size_t failed_trials = 0;

  nlohmann::json to_json() const;
};

struct ExperimentOutput {
  RunManifest manifest;
  std::vector<ResultRow> rows;
  std::vector<std::string> errors;  // one per failed trial
};

/// Runs every trial (up to cfg.jobs concurrently), writes results.csv,
/// results.json and manifest.json into cfg.output_dir.
ExperimentOutput run_experiment(const ExperimentConfig& cfg);

/// Same computation without touching the filesystem.
ExperimentOutput compute_experiment(const ExperimentConfig& cfg);

struct TheorySuiteConfig {
  int count = 200;
  int dim_lo = 2;
  int dim_hi = 64;
  int bound_count = 500;
  std::uint64_t seed = 0;
  std::string output_dir = "theory";
  double gap_tol = 1e-4;
};

struct TheorySummary {
  double max_gap = 0.0;
  std::size_t gap_failures = 0;
  std::size_t monotonicity_violations = 0;
  std::size_t bound_violations = 0;
  std::size_t instances = 0;

  bool ok() const noexcept { return gap_failures == 0 && monotonicity_violations == 0 && bound_violations == 0; }
  nlohmann::json to_json() const;
};

struct TheorySuiteOutput {
  RunManifest manifest;
  TheorySummary summary;
  std::vector<Theorem1Row> theorem1;
  std::vector<BoundRow> bounds;
};

/// Runs the randomized theorem sweeps; writes theory.csv, summary.json,
/// manifest.json and, when anything fails, replay.json with the offending instances.
TheorySuiteOutput run_theory_suite(const TheorySuiteConfig& cfg);

/// Re-evaluates the instances of a replay document.
TheorySuiteOutput replay_theory(const nlohmann::json& replay, double gap_tol = 1e-4);

nlohmann::json theory_replay_document(const std::vector<Theorem1Row>& t1, const std::vector<BoundRow>& bounds);

enum class EmbeddingRole { source, target, reference };
EmbeddingRole parse_role(std::string_view s);

/// CSV rows "tag,x1,...,xd" (no header). Errors carry 1-based row numbers.
EmbeddingSet import_embeddings(const std::filesystem::path& path, EmbeddingRole role, bool normalize = false);
EmbeddingSet parse_embeddings_csv(std::istream& is, std::string label, bool normalize = false);
/// Shortest round-trip formatting, so import(export(s)) == s bit for bit.
void export_embeddings(std::ostream& os, const EmbeddingSet& s);

/// Groups an imported set by tag, in order of first appearance.
std::vector<EmbeddingSet> group_by_tag(const EmbeddingSet& s);

}  // namespace pta
