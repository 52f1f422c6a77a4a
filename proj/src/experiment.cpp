#include "pta/experiment.hpp"

#include "pta/errors.hpp"
#include "pta/rng.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace pta {

Task parse_task(std::string_view s) {
  if (s == "classification") return Task::classification;
  if (s == "retrieval") return Task::retrieval;
  if (s == "poisoning") return Task::poisoning;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected classification|retrieval|poisoning)");
}

std::string_view to_string(Task t) {
  switch (t) {
    case Task::classification:
      return "classification";
    case Task::retrieval:
      return "retrieval";
    case Task::poisoning:
      return "poisoning";
  }
  return "?";
}

double parse_fraction(const nlohmann::json& v) {
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) throw ConfigError("expected a number or a fraction string such as \"8/255\"");
  const auto s = v.get<std::string>();
  auto parse = [&](std::string_view t) {
    double x = 0.0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
    if (ec != std::errc() || p != t.data() + t.size()) throw ConfigError("cannot parse '" + s + "' as a number");
    return x;
  };
  const auto slash = s.find('/');
  if (slash == std::string::npos) return parse(s);
  const double den = parse(std::string_view(s).substr(slash + 1));
  if (den == 0.0) throw ConfigError("zero denominator in '" + s + "'");
  return parse(std::string_view(s).substr(0, slash)) / den;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  std::string a = assignment;
  if (a.rfind("--", 0) == 0) a.erase(0, 2);
  const auto eq = a.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key.path=value");
  const std::string key = a.substr(0, eq);
  const std::string raw = a.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override '" + assignment + "' descends into a non-object");
      *node = nlohmann::json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

namespace {

// Walks a JSON config object, recording every type error or unknown key
// instead of stopping at the first one.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& violations) : v_(violations) {}

  void object(const nlohmann::json& j, const std::string& path, std::initializer_list<std::string_view> known) {
    if (!j.is_object()) {
      v_.push_back(path + ": expected an object");
      return;
    }
    for (const auto& [k, _] : j.items()) {
      if (std::find(known.begin(), known.end(), k) == known.end()) v_.push_back(join(path, k) + ": unknown field");
    }
  }

  template <class T>
  void get(const nlohmann::json& j, std::string_view key, const std::string& path, T& out) {
    if (!j.is_object() || !j.contains(key)) return;
    const auto& v = j.at(std::string(key));
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)
            throw ConfigError("expected a non-negative integer");
        }
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      v_.push_back(join(path, key) + ": " + e.what());
    }
  }

  template <class F>
  void with(const nlohmann::json& j, std::string_view key, const std::string& path, F&& f) {
    if (!j.is_object() || !j.contains(key)) return;
    try {
      f(j.at(std::string(key)));
    } catch (const std::exception& e) {
      v_.push_back(join(path, key) + ": " + e.what());
    }
  }

  void fail(std::string msg) { v_.push_back(std::move(msg)); }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

 private:
  std::vector<std::string>& v_;
};

ClusterSpec spec_from_json(const nlohmann::json& c) {
  ClusterSpec s;
  const auto cd = c.at("concept_direction").get<std::vector<double>>();
  s.concept_direction = Eigen::Map<const Vector>(cd.data(), static_cast<Eigen::Index>(cd.size()));
  const auto mo = c.at("modality_offset").get<std::vector<double>>();
  s.modality_offset = Eigen::Map<const Vector>(mo.data(), static_cast<Eigen::Index>(mo.size()));
  s.source_dispersion = c.at("source_dispersion").get<double>();
  s.target_dispersion = c.at("target_dispersion").get<double>();
  s.count = c.value("count", 100);
  s.source_count = c.value("source_count", 0);
  return s;
}

std::vector<double> vec(const Vector& v) {
  return {v.data(), v.data() + v.size()};
}

const std::set<std::string>& sweep_parameters() {
  static const std::set<std::string> p{"alpha", "N_c", "N_s", "epsilon", "query_budget", "injection_ratio"};
  return p;
}

bool is_integer(double v) {
  return std::isfinite(v) && v == std::floor(v);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  std::vector<std::string> bad;
  Reader r(bad);
  ExperimentConfig c;
  r.object(j, "",
           {"name", "world", "attack", "detection", "evaluation", "sweep", "trials", "seed", "output_dir", "jobs"});
  r.get(j, "name", "", c.name);
  r.get(j, "trials", "", c.trials);
  r.get(j, "seed", "", c.seed);
  r.get(j, "output_dir", "", c.output_dir);
  r.get(j, "jobs", "", c.jobs);

  if (j.is_object() && j.contains("world")) {
    const auto& w = j["world"];
    r.object(w, "world", {"preset", "clusters", "dims", "specs"});
    r.with(w, "preset", "world", [&](const nlohmann::json& v) { c.world.preset = parse_preset(v.get<std::string>()); });
    r.get(w, "clusters", "world", c.world.clusters);
    if (w.is_object() && w.contains("dims")) {
      r.object(w["dims"], "world.dims", {"input_dim", "hidden_dim", "embed_dim"});
      r.get(w["dims"], "input_dim", "world.dims", c.world.dims.input_dim);
      r.get(w["dims"], "hidden_dim", "world.dims", c.world.dims.hidden_dim);
      r.get(w["dims"], "embed_dim", "world.dims", c.world.dims.embed_dim);
    }
    r.with(w, "specs", "world", [&](const nlohmann::json& v) {
      if (v.is_null()) return;
      for (const auto& s : v) c.world.specs.push_back(spec_from_json(s));
    });
  }

  bool epsilon_given = false;
  if (j.is_object() && j.contains("attack")) {
    const auto& a = j["attack"];
    r.object(a, "attack",
             {"methods", "optimizer", "epsilon", "iterations", "step_size", "alpha", "query_budget", "p_init", "n_c",
              "n_s"});
    r.with(a, "methods", "attack", [&](const nlohmann::json& v) {
      c.methods.clear();
      if (v.is_string()) {
        c.methods.push_back(parse_objective(v.get<std::string>()));
      } else {
        for (const auto& m : v) c.methods.push_back(parse_objective(m.get<std::string>()));
      }
    });
    r.with(a, "optimizer", "attack",
           [&](const nlohmann::json& v) { c.attack.optimizer = parse_optimizer(v.get<std::string>()); });
    r.with(a, "epsilon", "attack", [&](const nlohmann::json& v) {
      c.attack.epsilon = parse_fraction(v);
      epsilon_given = true;
    });
    r.get(a, "iterations", "attack", c.attack.iterations);
    r.with(a, "step_size", "attack", [&](const nlohmann::json& v) {
      if (v.is_null()) return;
      c.attack.step_size = parse_fraction(v);
      c.step_from_epsilon = false;
    });
    r.get(a, "alpha", "attack", c.attack.alpha);
    r.get(a, "query_budget", "attack", c.attack.query_budget);
    r.get(a, "p_init", "attack", c.attack.p_init);
    r.get(a, "n_c", "attack", c.n_c);
    r.get(a, "n_s", "attack", c.n_s);
  }
  if (!epsilon_given && c.attack.optimizer == Optimizer::square) c.attack.epsilon = kSquareEpsilon;
  if (c.step_from_epsilon) c.attack.step_size = c.attack.epsilon / 10.0;

  if (j.is_object() && j.contains("detection")) {
    const auto& d = j["detection"];
    r.object(d, "detection",
             {"method", "anomaly_ratio", "neighbors_k", "n_trees", "subsample", "pca_variance_keep", "seed"});
    r.with(d, "method", "detection",
           [&](const nlohmann::json& v) { c.detection.method = parse_detector(v.get<std::string>()); });
    r.get(d, "anomaly_ratio", "detection", c.detection.anomaly_ratio);
    r.get(d, "neighbors_k", "detection", c.detection.neighbors_k);
    r.get(d, "n_trees", "detection", c.detection.n_trees);
    r.get(d, "subsample", "detection", c.detection.subsample);
    r.get(d, "pca_variance_keep", "detection", c.detection.pca_variance_keep);
    r.get(d, "seed", "detection", c.detection.seed);
  }

  if (j.is_object() && j.contains("evaluation")) {
    const auto& e = j["evaluation"];
    r.object(e, "evaluation",
             {"task", "K", "success_k", "injection_ratio", "references", "aes_per_class", "query_dispersion"});
    r.with(e, "task", "evaluation",
           [&](const nlohmann::json& v) { c.evaluation.task = parse_task(v.get<std::string>()); });
    r.get(e, "K", "evaluation", c.evaluation.K);
    r.get(e, "success_k", "evaluation", c.evaluation.success_k);
    r.with(e, "injection_ratio", "evaluation",
           [&](const nlohmann::json& v) { c.evaluation.injection_ratio = parse_fraction(v); });
    r.get(e, "references", "evaluation", c.evaluation.references);
    r.get(e, "aes_per_class", "evaluation", c.evaluation.aes_per_class);
    r.get(e, "query_dispersion", "evaluation", c.evaluation.query_dispersion);
  }

  if (j.is_object() && j.contains("sweep") && !j["sweep"].is_null()) {
    const auto& s = j["sweep"];
    r.object(s, "sweep", {"parameter", "values"});
    SweepConfig sw;
    r.get(s, "parameter", "sweep", sw.parameter);
    r.with(s, "values", "sweep", [&](const nlohmann::json& v) {
      for (const auto& x : v) sw.values.push_back(parse_fraction(x));
    });
    c.sweep = std::move(sw);
  }

  const bool preset_given =
      j.is_object() && j.contains("world") && j["world"].is_object() && j["world"].contains("preset");
  if (!preset_given && c.evaluation.task == Task::classification) c.world.preset = Preset::classification;

  // Semantic checks, all collected.
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) bad.push_back(msg);
  };
  check(c.trials >= 1, "trials: must be >= 1");
  check(c.jobs >= 1, "jobs: must be >= 1");
  check(!c.name.empty() && c.name.find(',') == std::string::npos, "name: must be non-empty and contain no comma");
  check(c.world.dims.input_dim >= 2 && c.world.dims.hidden_dim >= 2 && c.world.dims.embed_dim >= 2,
        "world.dims: every dimension must be >= 2");
  const int clusters = c.world.specs.empty() ? c.world.clusters : static_cast<int>(c.world.specs.size());
  check(clusters >= 2, "world.clusters: at least 2 clusters are required (attacks start from another cluster)");
  int target_count = 100, source_count = 200;
  for (std::size_t i = 0; i < c.world.specs.size(); ++i) {
    const auto& s = c.world.specs[i];
    try {
      s.validate(c.world.dims.embed_dim);
    } catch (const std::exception& e) {
      bad.push_back("world.specs[" + std::to_string(i) + "]: " + e.what());
    }
    target_count = i == 0 ? s.count : std::min(target_count, s.count);
    source_count = i == 0 ? s.effective_source_count() : std::min(source_count, s.effective_source_count());
  }
  const int proxy_half = (target_count + 1) / 2;
  const int attacker_half = (source_count + 1) / 2;
  const int defender_half = source_count / 2;

  check(!c.methods.empty(), "attack.methods: at least one attack is required");
  try {
    c.attack.validate();
  } catch (const std::exception& e) {
    bad.push_back(e.what());
  }
  check(c.n_c >= 1 && c.n_c <= proxy_half, "attack.n_c: must lie in [1, " + std::to_string(proxy_half) + "]");
  check(c.n_s >= 0 && c.n_s <= attacker_half, "attack.n_s: must lie in [0, " + std::to_string(attacker_half) + "]");
  check(!(c.attack.alpha > 0.0 && c.n_s == 0), "attack.alpha: alpha > 0 requires attack.n_s >= 1");
  try {
    c.detection.validate();
  } catch (const std::exception& e) {
    bad.push_back(e.what());
  }
  const auto& ev = c.evaluation;
  check(ev.K >= 1, "evaluation.K: must be >= 1");
  check(ev.success_k >= 1, "evaluation.success_k: must be >= 1");
  check(ev.injection_ratio >= 0.0 && ev.injection_ratio <= 1.0, "evaluation.injection_ratio: must lie in [0, 1]");
  check(ev.references >= 1 && static_cast<int>(ev.references) <= defender_half,
        "evaluation.references: must lie in [1, " + std::to_string(defender_half) + "]");
  check(static_cast<int>(ev.references) + 1 > c.detection.neighbors_k,
        "evaluation.references: the detection pool must hold more than detection.neighbors_k points");
  check(ev.aes_per_class >= 1 && ev.aes_per_class < clusters && ev.aes_per_class <= attacker_half,
        "evaluation.aes_per_class: must lie in [1, clusters - 1]");
  check(ev.query_dispersion >= 0.0 && std::isfinite(ev.query_dispersion), "evaluation.query_dispersion: must be >= 0");

  if (c.sweep) {
    const auto& sw = *c.sweep;
    check(sweep_parameters().count(sw.parameter) == 1,
          "sweep.parameter: must be one of alpha, N_c, N_s, epsilon, query_budget, injection_ratio");
    check(!sw.values.empty(), "sweep.values: must be non-empty");
    for (double v : sw.values) {
      const std::string at = "sweep.values: " + format_double(v) + " ";
      if (sw.parameter == "alpha")
        check(v >= 0.0 && std::isfinite(v) && (v == 0.0 || c.n_s >= 1), at + "is not a valid alpha");
      if (sw.parameter == "N_c") check(is_integer(v) && v >= 1 && v <= proxy_half, at + "is not a valid N_c");
      if (sw.parameter == "N_s")
        check(is_integer(v) && v >= 0 && v <= attacker_half && !(v == 0 && c.attack.alpha > 0),
              at + "is not a valid N_s");
      if (sw.parameter == "epsilon")
        check(v > 0.0 && std::isfinite(v) && (c.step_from_epsilon || c.attack.step_size <= v),
              at + "is not a valid epsilon");
      if (sw.parameter == "query_budget") check(is_integer(v) && v >= 1, at + "is not a valid query_budget");
      if (sw.parameter == "injection_ratio") check(v >= 0.0 && v <= 1.0, at + "is not a valid injection_ratio");
    }
  }

  if (c.evaluation.task == Task::poisoning) {
    std::vector<double> ratios{ev.injection_ratio};
    if (c.sweep && c.sweep->parameter == "injection_ratio") ratios = c.sweep->values;
    const auto items = static_cast<std::size_t>(clusters) * static_cast<std::size_t>(defender_half);
    const auto available =
        static_cast<std::size_t>(clusters) * static_cast<std::size_t>(std::max(attacker_half - 1, 0));
    for (double ratio : ratios) {
      if (!(ratio >= 0.0 && ratio <= 1.0)) continue;
      check(injection_count(ratio, items) <= available, "evaluation.injection_ratio: " + format_double(ratio) +
                                                            " needs more AEs than the world provides (" +
                                                            std::to_string(available) + ")");
    }
  }

  if (!bad.empty()) throw ValidationError(std::move(bad));
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json methods_json = nlohmann::json::array();
  for (auto m : methods) methods_json.push_back(std::string(to_string(m)));
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& s : world.specs) {
    specs.push_back({{"concept_direction", vec(s.concept_direction)},
                     {"modality_offset", vec(s.modality_offset)},
                     {"source_dispersion", s.source_dispersion},
                     {"target_dispersion", s.target_dispersion},
                     {"count", s.count},
                     {"source_count", s.effective_source_count()}});
  }
  nlohmann::json j{
      {"name", name},
      {"world",
       {{"preset", std::string(to_string(world.preset))},
        {"clusters", world.clusters},
        {"dims",
         {{"input_dim", world.dims.input_dim},
          {"hidden_dim", world.dims.hidden_dim},
          {"embed_dim", world.dims.embed_dim}}},
        {"specs", specs.empty() ? nlohmann::json() : specs}}},
      {"attack",
       {{"methods", methods_json},
        {"optimizer", std::string(to_string(attack.optimizer))},
        {"epsilon", attack.epsilon},
        {"iterations", attack.iterations},
        {"step_size", step_from_epsilon ? nlohmann::json() : nlohmann::json(attack.step_size)},
        {"alpha", attack.alpha},
        {"query_budget", attack.query_budget},
        {"p_init", attack.p_init},
        {"n_c", n_c},
        {"n_s", n_s}}},
      {"detection", detection.to_json()},
      {"evaluation",
       {{"task", std::string(to_string(evaluation.task))},
        {"K", evaluation.K},
        {"success_k", evaluation.success_k},
        {"injection_ratio", evaluation.injection_ratio},
        {"references", evaluation.references},
        {"aes_per_class", evaluation.aes_per_class},
        {"query_dispersion", evaluation.query_dispersion}}},
      {"sweep", sweep ? nlohmann::json{{"parameter", sweep->parameter}, {"values", sweep->values}} : nlohmann::json()},
      {"trials", trials},
      {"seed", seed},
      {"output_dir", output_dir},
      {"jobs", jobs}};
  return j;
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output_dir");
  j.erase("jobs");
  const auto h = stream_id(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

AttackPlan ExperimentConfig::plan(Objective method, std::optional<double> sweep_value) const {
  AttackPlan p{method, attack, n_c, n_s};
  if (sweep && sweep_value) {
    const double v = *sweep_value;
    const auto& param = sweep->parameter;
    if (param == "alpha") p.attack.alpha = v;
    if (param == "N_c") p.n_c = static_cast<int>(v);
    if (param == "N_s") p.n_s = static_cast<int>(v);
    if (param == "epsilon") {
      p.attack.epsilon = v;
      if (step_from_epsilon) p.attack.step_size = v / 10.0;
    }
    if (param == "query_budget") p.attack.query_budget = static_cast<int>(v);
  }
  return p;
}

EvaluationConfig ExperimentConfig::evaluation_at(std::optional<double> sweep_value) const {
  EvaluationConfig e = evaluation;
  if (sweep && sweep_value && sweep->parameter == "injection_ratio") e.injection_ratio = *sweep_value;
  return e;
}

TrialWorld build_trial_world(const WorldConfig& cfg, std::uint64_t seed) {
  auto specs = cfg.specs.empty() ? preset_specs(cfg.preset, cfg.dims, seed, cfg.clusters) : cfg.specs;
  TrialWorld tw{sample_world(std::move(specs), cfg.dims, seed), {}};
  tw.source = source_embeddings(tw.world);
  return tw;
}

Goal make_goal(const TrialWorld& tw, std::size_t t, const AttackPlan& plan) {
  tw.world.require_cluster(t);
  const auto proxies = proxy_half(tw.world.target_embeddings[t]);
  switch (plan.method) {
    case Objective::illusion:
      return Goal::illusion(proxies[0]);
    case Objective::samemodal: {
      std::vector<EmbeddingSet> attacker;
      for (const auto& s : tw.source) attacker.emplace_back(even_half(s.members));
      return Goal::samemodal(select_surrogate(attacker, mean_embedding(proxies)).embedding);
    }
    case Objective::pta: {
      if (plan.n_c < 1 || static_cast<std::size_t>(plan.n_c) > proxies.size())
        throw ConfigError("N_c = " + std::to_string(plan.n_c) + " exceeds the " + std::to_string(proxies.size()) +
                          " available target proxies");
      const auto src = even_half(tw.source[t].members);
      if (plan.n_s < 0 || static_cast<std::size_t>(plan.n_s) > src.size())
        throw ConfigError("N_s = " + std::to_string(plan.n_s) + " exceeds the " + std::to_string(src.size()) +
                          " available source proxies");
      ProxySet p;
      p.target_proxies = EmbeddingSet({proxies.members.begin(), proxies.members.begin() + plan.n_c}, "target-proxies");
      p.source_proxies = EmbeddingSet({src.begin(), src.begin() + plan.n_s}, "source-proxies");
      return Goal::pta(std::move(p));
    }
  }
  throw ConfigError("unknown attack");
}

namespace {

AttackResult attack_one(const TrialWorld& tw, const Vector& x0, std::size_t target, const AttackPlan& plan,
                        std::uint64_t seed, std::uint64_t ae_index) {
  AttackConfig cfg = plan.attack;
  cfg.seed = derive_seed(seed, stream_id("ae", ae_index));
  return run_attack(tw.world.encoder, x0, make_goal(tw, target, plan), cfg);
}

std::vector<Embedding> references_of(const TrialWorld& tw, std::size_t t, std::size_t count) {
  auto refs = odd_half(tw.source[t].members);
  if (refs.size() < count)
    throw ConfigError("cluster " + std::to_string(t) + " has only " + std::to_string(refs.size()) +
                      " reference points");
  refs.resize(count);
  return refs;
}

std::size_t rank_in_pool(const Embedding& ae, std::vector<Embedding> pool, const DetectionConfig& det) {
  pool.push_back(ae);
  const auto s = score_points(pool, det);
  return score_rank(s, pool.size() - 1);
}

}  // namespace

MetricReport run_classification_trial(const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                                      const EvaluationConfig& ev, std::uint64_t seed) {
  const std::size_t C = tw.world.cluster_count();
  std::vector<EmbeddingSet> prompts;
  for (const auto& t : tw.world.target_embeddings) prompts.push_back(true_target_half(t));

  std::vector<ClassificationOutcome> outcomes;
  double rank_sum = 0.0;
  for (std::size_t t = 0; t < C; ++t) {
    const auto refs = references_of(tw, t, ev.references);
    for (int j = 0; j < ev.aes_per_class; ++j) {
      const std::size_t b = (t + 1 + static_cast<std::size_t>(j)) % C;
      if (b == t) continue;
      const Vector& x0 = tw.world.source_inputs[b].at(2 * static_cast<std::size_t>(j));
      const auto res = attack_one(tw, x0, t, plan, seed, outcomes.size());
      ClassificationOutcome o;
      o.target_class = t;
      o.pre_class = classify(tw.world.encoder.encode(x0), prompts);
      o.post_class = classify(res.adversarial_embedding, prompts);
      o.detected = detect_in_pool(res.adversarial_embedding, refs, det);
      rank_sum += static_cast<double>(rank_in_pool(res.adversarial_embedding, refs, det));
      outcomes.push_back(o);
    }
  }
  auto rep = classification_report(outcomes);
  rep.mean_rank = rank_sum / static_cast<double>(outcomes.size());
  return rep;
}

MetricReport run_retrieval_trial(const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                                 const EvaluationConfig& ev, std::uint64_t seed) {
  const std::size_t C = tw.world.cluster_count();
  Gallery base;
  for (std::size_t c = 0; c < C; ++c) {
    for (const auto& e : odd_half(tw.source[c].members)) {
      base.items.push_back(e);
      base.item_clusters.push_back(c);
    }
  }
  SuccessFlags all;
  double rank_sum = 0.0;
  for (std::size_t t = 0; t < C; ++t) {
    const std::size_t b = (t + 1) % C;
    const Vector& x0 = tw.world.source_inputs[b].front();
    const auto res = attack_one(tw, x0, t, plan, seed, t);
    Gallery g = base;
    g.injected = {res.adversarial_embedding};
    g.injected_originals = {tw.world.encoder.encode(x0)};
    const auto queries = true_target_half(tw.world.target_embeddings[t]);
    const auto flagged = detect_in_window(queries.members, g, ev.K, det);
    all.append(retrieval_flags(queries.members, g, ev.success_k, flagged));
    rank_sum += static_cast<double>(rank_in_pool(res.adversarial_embedding, references_of(tw, t, ev.references), det));
  }
  auto rep = success_report(all);
  rep.mean_rank = rank_sum / static_cast<double>(C);
  return rep;
}

MetricReport run_poisoning_trial(const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                                 const EvaluationConfig& ev, std::uint64_t seed) {
  const std::size_t C = tw.world.cluster_count();
  std::vector<Embedding> items;
  std::vector<std::size_t> clusters;
  for (std::size_t c = 0; c < C; ++c) {
    for (const auto& e : odd_half(tw.source[c].members)) {
      items.push_back(e);
      clusters.push_back(c);
    }
  }
  const auto queries = paired_queries(tw.world, items, clusters, ev.query_dispersion, seed);
  std::vector<std::size_t> truth(items.size());
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = i;

  const std::size_t m = injection_count(ev.injection_ratio, items.size());
  std::vector<Embedding> aes, originals;
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t t = j % C;
    const std::size_t b = (t + 1) % C;
    const std::size_t idx = 2 * (j / C) + 2;
    if (idx >= tw.world.source_inputs[b].size())
      throw ConfigError("poisoning: injection ratio needs more base inputs than cluster " + std::to_string(b) +
                        " holds");
    const Vector& x0 = tw.world.source_inputs[b][idx];
    aes.push_back(attack_one(tw, x0, t, plan, seed, j).adversarial_embedding);
    originals.push_back(tw.world.encoder.encode(x0));
  }
  const auto p = poisoning_degradation(queries.members, truth, items, aes, ev.injection_ratio);

  MetricReport rep;
  if (m > 0) {
    Gallery g;
    g.items = items;
    g.item_clusters = clusters;
    g.injected = aes;
    g.injected_originals = originals;
    const auto flagged = detect_in_window(queries.members, g, ev.K, det);
    rep = retrieval_report(queries.members, g, ev.success_k, flagged);
  } else {
    rep.n_total = queries.size();
  }
  rep.recall_before = p.recall_before;
  rep.recall_at_1 = p.recall_after;
  rep.recall_drop = p.drop;
  return rep;
}

MetricReport run_trial(Task task, const TrialWorld& tw, const AttackPlan& plan, const DetectionConfig& det,
                       const EvaluationConfig& ev, std::uint64_t seed) {
  switch (task) {
    case Task::classification:
      return run_classification_trial(tw, plan, det, ev, seed);
    case Task::retrieval:
      return run_retrieval_trial(tw, plan, det, ev, seed);
    case Task::poisoning:
      return run_poisoning_trial(tw, plan, det, ev, seed);
  }
  throw ConfigError("unknown task");
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

nlohmann::json ResultRow::to_json() const {
  return {{"experiment_id", experiment_id},
          {"config_hash", config_hash},
          {"trial", trial},
          {"seed", seed},
          {"sweep_parameter", sweep_parameter.empty() ? nlohmann::json() : nlohmann::json(sweep_parameter)},
          {"sweep_value", sweep_value ? nlohmann::json(*sweep_value) : nlohmann::json()},
          {"attack", std::string(to_string(plan.method))},
          {"optimizer", std::string(to_string(plan.attack.optimizer))},
          {"alpha", plan.method == Objective::pta ? plan.attack.alpha : 0.0},
          {"n_c", plan.method == Objective::pta ? plan.n_c : (plan.method == Objective::illusion ? 1 : 0)},
          {"n_s", plan.method == Objective::pta ? plan.n_s : 0},
          {"epsilon", plan.attack.epsilon},
          {"detector", std::string(to_string(detector))},
          {"task", std::string(to_string(task))},
          {"metrics", report.to_json()}};
}

void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  os << "schema_version,config_hash,experiment_id,trial,seed,sweep_parameter,sweep_value,attack,optimizer,alpha,"
        "n_c,n_s,epsilon,detector,task,asr,asrd,mean_rank,recall_before,recall_at_1,recall_drop,n_total,"
        "n_success,n_pre_success,n_detected\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : rows) {
    const auto j = r.to_json();
    os << kResultsSchemaVersion << ',' << r.config_hash << ',' << r.experiment_id << ',' << r.trial << ',' << r.seed
       << ',' << r.sweep_parameter << ',' << opt(r.sweep_value) << ',' << to_string(r.plan.method) << ','
       << to_string(r.plan.attack.optimizer) << ',' << format_double(j["alpha"].get<double>()) << ','
       << j["n_c"].get<int>() << ',' << j["n_s"].get<int>() << ',' << format_double(r.plan.attack.epsilon) << ','
       << to_string(r.detector) << ',' << to_string(r.task) << ',';
    os << format_double(r.report.asr) << ',' << format_double(r.report.asrd) << ',';
    os << opt(r.report.mean_rank) << ',' << opt(r.report.recall_before) << ',' << opt(r.report.recall_at_1) << ','
       << opt(r.report.recall_drop) << ',' << r.report.n_total << ',' << r.report.n_success << ','
       << r.report.n_pre_success << ',' << r.report.n_detected << '\n';
  }
}

nlohmann::json RunManifest::to_json() const {
  return {{"config_hash", config_hash},     {"tool_version", tool_version}, {"trial_seeds", trial_seeds},
          {"emitted_files", emitted_files}, {"created_at", created_at},     {"failed_trials", failed_trials}};
}

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Runs f(i) for i in [0, n) on up to `jobs` threads.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(jobs, static_cast<int>(n))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) f(i);
    });
  }
  for (auto& t : pool) t.join();
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot open " + p.string() + " for writing");
  os << content;
  if (!os) throw Error("failed writing " + p.string());
}

}  // namespace

ExperimentOutput compute_experiment(const ExperimentConfig& cfg) {
  ExperimentOutput out;
  out.manifest.config_hash = cfg.hash();
  std::vector<std::optional<double>> points;
  if (cfg.sweep) {
    for (double v : cfg.sweep->values) points.emplace_back(v);
  } else {
    points.emplace_back(std::nullopt);
  }

  const auto trials = static_cast<std::size_t>(cfg.trials);
  std::vector<std::vector<ResultRow>> buffers(trials);
  std::vector<std::string> errors(trials);
  for (std::size_t t = 0; t < trials; ++t) out.manifest.trial_seeds.push_back(derive_seed(cfg.seed, t));

  parallel_for(trials, cfg.jobs, [&](std::size_t t) {
    const std::uint64_t seed = out.manifest.trial_seeds[t];
    try {
      const auto tw = build_trial_world(cfg.world, seed);
      for (const auto& point : points) {
        const auto ev = cfg.evaluation_at(point);
        for (auto method : cfg.methods) {
          ResultRow row;
          row.experiment_id = cfg.name;
          row.config_hash = out.manifest.config_hash;
          row.trial = static_cast<int>(t);
          row.seed = seed;
          row.sweep_parameter = cfg.sweep ? cfg.sweep->parameter : "";
          row.sweep_value = point;
          row.plan = cfg.plan(method, point);
          row.detector = cfg.detection.method;
          row.task = ev.task;
          row.report = run_trial(ev.task, tw, row.plan, cfg.detection, ev, seed);
          buffers[t].push_back(std::move(row));
        }
      }
    } catch (const std::exception& e) {
      buffers[t].clear();
      errors[t] = "trial " + std::to_string(t) + ": " + e.what();
    }
  });

  for (std::size_t t = 0; t < trials; ++t) {
    for (auto& r : buffers[t]) out.rows.push_back(std::move(r));
    if (!errors[t].empty()) {
      out.errors.push_back(errors[t]);
      ++out.manifest.failed_trials;
    }
  }
  return out;
}

ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
  auto out = compute_experiment(cfg);
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);

  std::ostringstream csv;
  write_results_csv(csv, out.rows);
  write_file(dir / "results.csv", csv.str());

  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : out.rows) rows.push_back(r.to_json());
  const nlohmann::json results{{"schema_version", kResultsSchemaVersion},
                               {"config_hash", out.manifest.config_hash},
                               {"rank_convention", "raw rank among N_ref + 1 pooled points"},
                               {"config", cfg.to_json()},
                               {"rows", rows},
                               {"errors", out.errors}};
  write_file(dir / "results.json", results.dump(2) + "\n");

  out.manifest.created_at = utc_now();
  out.manifest.emitted_files = {(dir / "results.csv").string(), (dir / "results.json").string(),
                                (dir / "manifest.json").string()};
  auto m = out.manifest.to_json();
  m["config"] = cfg.to_json();
  m["errors"] = out.errors;
  write_file(dir / "manifest.json", m.dump(2) + "\n");
  return out;
}

nlohmann::json TheorySummary::to_json() const {
  return {{"instances", instances},
          {"max_gap", max_gap},
          {"gap_failures", gap_failures},
          {"monotonicity_violations", monotonicity_violations},
          {"bound_violations", bound_violations}};
}

nlohmann::json theory_replay_document(const std::vector<Theorem1Row>& t1, const std::vector<BoundRow>& bounds) {
  nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array();
  for (const auto& r : t1) a.push_back(r.inst.to_json());
  for (const auto& r : bounds) b.push_back(r.inst.to_json());
  return {{"theorem1", a}, {"bounds", b}};
}

namespace {

void summarize(TheorySuiteOutput& out, double gap_tol) {
  for (const auto& r : out.theorem1) {
    out.summary.max_gap = std::max(out.summary.max_gap, r.gap);
    out.summary.gap_failures += !(r.gap < gap_tol);
  }
  for (const auto& r : out.bounds) out.summary.bound_violations += !r.check.satisfied;
  out.summary.instances = out.theorem1.size() + out.bounds.size();
}

void write_theory_csv(std::ostream& os, const TheorySuiteOutput& out) {
  os << "kind,index,dim,delta_norm,beta,sigma_S,sigma_T,closed_form,oracle,gap,bound,value,satisfied\n";
  for (std::size_t i = 0; i < out.theorem1.size(); ++i) {
    const auto& r = out.theorem1[i];
    os << "theorem1," << i << ',' << r.dim << ',' << format_double(r.inst.delta_norm) << ','
       << format_double(r.inst.beta) << ',' << format_double(r.inst.sigma_S) << ',' << format_double(r.inst.sigma_T)
       << ',' << format_double(r.closed_form) << ',' << format_double(r.oracle) << ',' << format_double(r.gap)
       << ",,,\n";
  }
  for (std::size_t i = 0; i < out.bounds.size(); ++i) {
    const auto& r = out.bounds[i];
    os << "theorem" << r.inst.theorem << ',' << i << ',' << r.inst.ae.size() << ",,,,,,,,"
       << format_double(r.check.bound) << ',' << format_double(r.check.value) << ',' << (r.check.satisfied ? 1 : 0)
       << '\n';
  }
}

}  // namespace

TheorySuiteOutput replay_theory(const nlohmann::json& replay, double gap_tol) {
  TheorySuiteOutput out;
  for (const auto& j : replay.value("theorem1", nlohmann::json::array())) {
    Theorem1Row r;
    r.inst = TheoryInstance::from_json(j);
    r.dim = static_cast<int>(r.inst.mu_S.size());
    r.closed_form = theorem1_closed_form(r.inst);
    const auto o = theorem1_numeric_oracle(r.inst);
    r.oracle = o.value;
    r.iterations = o.iterations;
    r.gap = std::abs(r.closed_form - r.oracle);
    out.theorem1.push_back(std::move(r));
  }
  for (const auto& j : replay.value("bounds", nlohmann::json::array())) {
    BoundRow r{BoundInstance::from_json(j), {}};
    r.check = check_bound_instance(r.inst);
    out.bounds.push_back(std::move(r));
  }
  summarize(out, gap_tol);
  return out;
}

TheorySuiteOutput run_theory_suite(const TheorySuiteConfig& cfg) {
  if (cfg.count < 1 || cfg.bound_count < 1) throw ConfigError("theory suite: counts must be >= 1");
  TheorySuiteOutput out;
  out.theorem1 = theorem1_sweep(cfg.count, cfg.dim_lo, cfg.dim_hi, derive_seed(cfg.seed, stream_id("theorem1-sweep")));
  out.bounds = theorem2_sweep(cfg.bound_count, derive_seed(cfg.seed, stream_id("theorem2-sweep")));
  auto t3 = theorem3_sweep(cfg.bound_count, derive_seed(cfg.seed, stream_id("theorem3-sweep")));
  out.bounds.insert(out.bounds.end(), std::make_move_iterator(t3.begin()), std::make_move_iterator(t3.end()));
  out.summary.monotonicity_violations = theorem1_monotonicity_violations();
  summarize(out, cfg.gap_tol);

  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  write_theory_csv(csv, out);
  write_file(dir / "theory.csv", csv.str());
  write_file(dir / "summary.json", out.summary.to_json().dump(2) + "\n");
  out.manifest.emitted_files = {(dir / "theory.csv").string(), (dir / "summary.json").string()};

  if (!out.summary.ok()) {
    std::vector<Theorem1Row> bad1;
    std::vector<BoundRow> bad2;
    for (const auto& r : out.theorem1)
      if (!(r.gap < cfg.gap_tol)) bad1.push_back(r);
    for (const auto& r : out.bounds)
      if (!r.check.satisfied) bad2.push_back(r);
    write_file(dir / "replay.json", theory_replay_document(bad1, bad2).dump(2) + "\n");
    out.manifest.emitted_files.push_back((dir / "replay.json").string());
  }

  const nlohmann::json cfg_json{{"count", cfg.count},   {"dim_lo", cfg.dim_lo},
                                {"dim_hi", cfg.dim_hi}, {"bound_count", cfg.bound_count},
                                {"seed", cfg.seed},     {"gap_tol", cfg.gap_tol}};
  const auto h = stream_id(cfg_json.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  out.manifest.config_hash = buf;
  out.manifest.trial_seeds = {cfg.seed};
  out.manifest.created_at = utc_now();
  out.manifest.emitted_files.push_back((dir / "manifest.json").string());
  auto m = out.manifest.to_json();
  m["config"] = cfg_json;
  m["summary"] = out.summary.to_json();
  write_file(dir / "manifest.json", m.dump(2) + "\n");
  return out;
}

EmbeddingRole parse_role(std::string_view s) {
  if (s == "source") return EmbeddingRole::source;
  if (s == "target") return EmbeddingRole::target;
  if (s == "reference") return EmbeddingRole::reference;
  throw ConfigError("unknown embedding role '" + std::string(s) + "' (expected source|target|reference)");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

EmbeddingSet parse_embeddings_csv(std::istream& is, std::string label, bool normalize) {
  EmbeddingSet out;
  out.label = std::move(label);
  std::string line;
  std::size_t row = 0;
  Eigen::Index width = -1;
  while (std::getline(is, line)) {
    ++row;
    if (trim(line).empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      cells.push_back(trim(rest.substr(0, comma)));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() < 3) throw ParseError(row, "expected a tag and at least 2 coordinates");
    const auto d = static_cast<Eigen::Index>(cells.size() - 1);
    if (width >= 0 && d != width)
      throw ParseError(row, "ragged row: " + std::to_string(d) + " coordinates, expected " + std::to_string(width));
    width = d;
    Vector v(d);
    for (Eigen::Index k = 0; k < d; ++k) {
      const auto cell = cells[static_cast<std::size_t>(k + 1)];
      double x = 0.0;
      const auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), x);
      if (ec != std::errc() || p != cell.data() + cell.size() || cell.empty())
        throw ParseError(row, "column " + std::to_string(k + 2) + ": '" + std::string(cell) + "' is not a number");
      if (!std::isfinite(x)) throw ParseError(row, "column " + std::to_string(k + 2) + ": non-finite value");
      v(k) = x;
    }
    if (normalize) {
      if (v.norm() == 0.0) throw ParseError(row, "cannot normalize the zero vector");
      v.normalize();
    }
    out.tags.emplace_back(cells.front());
    out.members.push_back(std::move(v));
  }
  if (out.members.empty()) throw ParseError(0, "no embeddings found");
  return out;
}

EmbeddingSet import_embeddings(const std::filesystem::path& path, EmbeddingRole role, bool normalize) {
  std::ifstream is(path);
  if (!is) throw ParseError(0, "cannot open " + path.string());
  const char* label = role == EmbeddingRole::source ? "source" : role == EmbeddingRole::target ? "target" : "reference";
  return parse_embeddings_csv(is, label, normalize);
}

void export_embeddings(std::ostream& os, const EmbeddingSet& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << (s.tags.empty() ? s.label + std::to_string(i) : s.tags[i]);
    for (Eigen::Index k = 0; k < s[i].size(); ++k) os << ',' << format_double(s[i](k));
    os << '\n';
  }
}

std::vector<EmbeddingSet> group_by_tag(const EmbeddingSet& s) {
  std::vector<EmbeddingSet> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::string tag = s.tags.empty() ? s.label : s.tags[i];
    auto [it, fresh] = index.try_emplace(tag, groups.size());
    if (fresh) groups.emplace_back(std::vector<Embedding>{}, tag);
    groups[it->second].members.push_back(s[i]);
  }
  return groups;
}

}  // namespace pta
