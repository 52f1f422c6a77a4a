#include "pta/errors.hpp"
#include "pta/experiment.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace {

using namespace pta;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitTheorem = 3;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << text;
}

std::uint64_t env_seed(std::uint64_t fallback) {
  const char* s = std::getenv("PTA_SEED");
  if (s == nullptr || *s == '\0') return fallback;
  std::uint64_t v = 0;
  std::istringstream is(s);
  if (!(is >> v) || !is.eof()) throw ConfigError(std::string("PTA_SEED: '") + s + "' is not a non-negative integer");
  return v;
}

struct RunOptions {
  std::string config;
  std::optional<int> trials;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;
};

void add_run_options(CLI::App* app, RunOptions& o) {
  app->add_option("-c,--config", o.config, "Experiment config (JSON)");
  app->add_option("--trials", o.trials, "Number of trials");
  app->add_option("--seed", o.seed, "Master seed (default: PTA_SEED or the config)");
  app->add_option("-o,--out", o.out, "Output directory");
  app->add_option("-j,--jobs", o.jobs, "Concurrent trials");
  app->allow_extras();
  app->footer("Extra arguments of the form key.path=value override config fields, e.g. attack.alpha=0.4");
}

void print_summary(const ExperimentOutput& out) {
  std::map<std::pair<std::string, std::string>, std::tuple<double, double, std::size_t>> agg;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : out.rows) {
    const std::pair<std::string, std::string> key{
        std::string(to_string(r.plan.method)),
        r.sweep_value ? r.sweep_parameter + "=" + format_double(*r.sweep_value) : ""};
    auto [it, fresh] = agg.try_emplace(key, 0.0, 0.0, 0);
    if (fresh) order.push_back(key);
    std::get<0>(it->second) += r.report.asr;
    std::get<1>(it->second) += r.report.asrd;
    std::get<2>(it->second) += 1;
  }
  for (const auto& key : order) {
    const auto& [asr, asrd, n] = agg[key];
    std::cout << key.first << (key.second.empty() ? "" : " " + key.second) << ": asr=" << format_double(asr / n)
              << " asrd=" << format_double(asrd / n) << " (" << n << " trials)\n";
  }
}

int run_config(const RunOptions& o, const std::vector<std::string>& extras, std::optional<Task> force_task,
               bool require_sweep) {
  nlohmann::json doc = o.config.empty() ? nlohmann::json::object() : read_json_file(o.config);
  if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
  if (force_task) apply_override(doc, "evaluation.task=\"" + std::string(to_string(*force_task)) + "\"");
  if (std::getenv("PTA_SEED")) doc["seed"] = env_seed(0);
  if (o.trials) doc["trials"] = *o.trials;
  if (o.seed) doc["seed"] = *o.seed;
  if (o.out) doc["output_dir"] = *o.out;
  if (o.jobs) doc["jobs"] = *o.jobs;
  for (const auto& e : extras) apply_override(doc, e);

  const auto cfg = ExperimentConfig::from_json(doc);
  if (require_sweep && !cfg.sweep) throw ConfigError("sweep: the config has no 'sweep' section");
  const auto out = run_experiment(cfg);
  print_summary(out);
  std::cout << "wrote " << cfg.output_dir << "/results.csv (config " << out.manifest.config_hash << ")\n";
  for (const auto& e : out.errors) std::cerr << "error: " << e << "\n";
  return out.errors.empty() ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proxy-targeted cross-modal attack toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  // attack
  auto* attack = app.add_subcommand("attack", "Craft one adversarial example in a synthetic world");
  std::string a_preset = "retrieval", a_method = "pta", a_optimizer = "pgd", a_out, a_eps;
  std::uint64_t a_seed = 0, a_attack_seed = 0;
  std::size_t a_target = 0, a_base = 1, a_index = 0;
  int a_nc = 50, a_ns = 25, a_iters = 100, a_budget = 10000;
  double a_alpha = 0.0;
  std::optional<double> a_step;
  attack->add_option("--preset", a_preset, "World preset (classification|retrieval)")->capture_default_str();
  attack->add_option("--world-seed", a_seed, "World seed")->capture_default_str();
  attack->add_option("--target", a_target, "Target cluster")->capture_default_str();
  attack->add_option("--base", a_base, "Cluster of the clean input")->capture_default_str();
  attack->add_option("--index", a_index, "Index of the clean input within its cluster")->capture_default_str();
  attack->add_option("--method", a_method, "pta|illusion|samemodal")->capture_default_str();
  attack->add_option("--optimizer", a_optimizer, "pgd|square")->capture_default_str();
  attack->add_option("--epsilon", a_eps, "L-inf budget, e.g. 8/255 (default 8/255 for pgd, 16/255 for square)");
  attack->add_option("--step", a_step, "PGD step size (default epsilon/10)");
  attack->add_option("--iterations", a_iters, "PGD iterations")->capture_default_str();
  attack->add_option("--budget", a_budget, "Square query budget")->capture_default_str();
  attack->add_option("--alpha", a_alpha, "Weight of the source-distance term")->capture_default_str();
  attack->add_option("--n-c", a_nc, "Target-modal proxies")->capture_default_str();
  attack->add_option("--n-s", a_ns, "Source-modal proxies")->capture_default_str();
  attack->add_option("--seed", a_attack_seed, "Attack seed (square)")->capture_default_str();
  attack->add_option("-o,--out", a_out, "Output JSON (default stdout)");

  // detect
  auto* detect_cmd = app.add_subcommand("detect", "Score embeddings from a CSV file and flag outliers");
  std::string d_in, d_out, d_method = "knn";
  DetectionConfig d_cfg;
  detect_cmd->add_option("-i,--input", d_in, "Embeddings CSV (tag,x1,...,xd)")->required();
  detect_cmd->add_option("--method", d_method, "knn|lof|iforest|pca")->capture_default_str();
  detect_cmd->add_option("--ratio", d_cfg.anomaly_ratio, "Anomaly ratio r")->capture_default_str();
  detect_cmd->add_option("-k,--neighbors", d_cfg.neighbors_k, "Neighbors for knn/lof")->capture_default_str();
  detect_cmd->add_option("--trees", d_cfg.n_trees, "iForest trees")->capture_default_str();
  detect_cmd->add_option("--subsample", d_cfg.subsample, "iForest subsample size")->capture_default_str();
  detect_cmd->add_option("--variance-keep", d_cfg.pca_variance_keep, "PCA retained variance")->capture_default_str();
  detect_cmd->add_option("--seed", d_cfg.seed, "iForest seed")->capture_default_str();
  detect_cmd->add_option("-o,--out", d_out, "Output CSV index,score,flagged (default stdout)");

  // eval / poison / sweep
  RunOptions eval_opts, poison_opts, sweep_opts;
  auto* eval = app.add_subcommand("eval", "Run an experiment config");
  add_run_options(eval, eval_opts);
  auto* poison = app.add_subcommand("poison", "Run a config as a poisoning experiment");
  add_run_options(poison, poison_opts);
  auto* sweep = app.add_subcommand("sweep", "Run a config that declares a sweep");
  add_run_options(sweep, sweep_opts);

  // theory
  auto* theory = app.add_subcommand("theory", "Check the closed forms and bounds on random instances");
  TheorySuiteConfig t_cfg;
  std::string t_replay;
  theory->add_option("--count", t_cfg.count, "Closed-form instances")->capture_default_str();
  theory->add_option("--dim-lo", t_cfg.dim_lo, "Smallest dimension")->capture_default_str();
  theory->add_option("--dim-hi", t_cfg.dim_hi, "Largest dimension")->capture_default_str();
  theory->add_option("--bound-count", t_cfg.bound_count, "Instances per bound")->capture_default_str();
  theory->add_option("--seed", t_cfg.seed, "Seed (default: PTA_SEED or 0)");
  theory->add_option("--gap-tol", t_cfg.gap_tol, "Allowed |closed form - oracle|")->capture_default_str();
  theory->add_option("-o,--out", t_cfg.output_dir, "Output directory")->capture_default_str();
  theory->add_option("--replay", t_replay, "Re-evaluate the instances of a replay.json");

  // import
  auto* import = app.add_subcommand("import", "Validate external embeddings and convert them");
  std::string i_file, i_role = "target", i_out, i_world_out, i_preset = "retrieval";
  std::uint64_t i_seed = 0;
  bool i_normalize = false;
  import->add_option("-i,--input", i_file, "Embeddings CSV (tag,x1,...,xd)")->required();
  import->add_option("--role", i_role, "source|target|reference")->capture_default_str();
  import->add_flag("--normalize", i_normalize, "Scale every row to unit norm");
  import->add_option("-o,--out", i_out, "Write the parsed set back as CSV");
  import->add_option("--world-out", i_world_out,
                     "Write a world JSON whose target embeddings are the imported groups (one per tag)");
  import->add_option("--preset", i_preset, "Preset of the base world for --world-out")->capture_default_str();
  import->add_option("--world-seed", i_seed, "Seed of the base world for --world-out")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*attack) {
      const auto world = make_preset_world(parse_preset(a_preset), a_seed);
      world.require_cluster(a_base);
      if (a_index >= world.source_inputs[a_base].size())
        throw ConfigError("--index " + std::to_string(a_index) + " exceeds the cluster size");
      AttackPlan plan;
      plan.method = parse_objective(a_method);
      plan.attack.optimizer = parse_optimizer(a_optimizer);
      if (!a_eps.empty()) {
        plan.attack.epsilon = parse_fraction(nlohmann::json(a_eps));
      } else if (plan.attack.optimizer == Optimizer::square) {
        plan.attack.epsilon = kSquareEpsilon;
      }
      plan.attack.step_size = a_step ? *a_step : plan.attack.epsilon / 10.0;
      plan.attack.iterations = a_iters;
      plan.attack.query_budget = a_budget;
      plan.attack.alpha = a_alpha;
      plan.attack.seed = a_attack_seed;
      plan.attack.validate();
      plan.n_c = a_nc;
      plan.n_s = a_ns;
      TrialWorld tw{world, source_embeddings(world)};
      const auto res = run_attack(tw.world.encoder, world.source_inputs[a_base][a_index], make_goal(tw, a_target, plan),
                                  plan.attack);
      write_text(a_out, res.to_json().dump(2) + "\n");
      return kExitOk;
    }
    if (*detect_cmd) {
      d_cfg.method = parse_detector(d_method);
      const auto set = import_embeddings(d_in, EmbeddingRole::reference);
      const auto res = detect(set.members, d_cfg);
      std::ostringstream os;
      res.write_csv(os);
      write_text(d_out, os.str());
      std::cerr << res.flagged_count << " of " << set.size() << " flagged\n";
      return kExitOk;
    }
    if (*eval) return run_config(eval_opts, eval->remaining(), std::nullopt, false);
    if (*poison) return run_config(poison_opts, poison->remaining(), Task::poisoning, false);
    if (*sweep) return run_config(sweep_opts, sweep->remaining(), std::nullopt, true);
    if (*theory) {
      if (theory->count("--seed") == 0) t_cfg.seed = env_seed(0);
      const auto out =
          t_replay.empty() ? run_theory_suite(t_cfg) : replay_theory(read_json_file(t_replay), t_cfg.gap_tol);
      std::cout << out.summary.to_json().dump(2) << "\n";
      return out.summary.ok() ? kExitOk : kExitTheorem;
    }
    if (*import) {
      const auto set = import_embeddings(i_file, parse_role(i_role), i_normalize);
      std::cerr << "parsed " << set.size() << " embeddings of dimension " << set.dim() << "\n";
      if (!i_out.empty()) {
        std::ostringstream os;
        export_embeddings(os, set);
        write_text(i_out, os.str());
      }
      if (!i_world_out.empty()) {
        auto world = make_preset_world(parse_preset(i_preset), i_seed);
        replace_target_embeddings(world, group_by_tag(set));
        write_text(i_world_out, world_to_json(world).dump() + "\n");
      }
      return kExitOk;
    }
  } catch (const ValidationError& e) {
    std::cerr << "invalid config:\n";
    for (const auto& v : e.violations()) std::cerr << "  " << v << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
