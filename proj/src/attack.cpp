#include "pta/attack.hpp"

#include "pta/errors.hpp"
#include "pta/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace pta {

namespace {

void require_unit_members(const EmbeddingSet& s, const char* what) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!is_unit(s[i], 1e-9))
      throw DomainError(std::string(what) + " member " + std::to_string(i) + " is not unit-norm");
  }
}

// d cos(v, y) / dv.
Embedding cosine_gradient(const Embedding& v, const Embedding& y) {
  const double nv = v.norm();
  const double ny = y.norm();
  if (nv == 0.0 || ny == 0.0) throw DomainError("cosine gradient: zero vector");
  const double c = v.dot(y) / (nv * ny);
  return (y / ny - c * v / nv) / nv;
}

Embedding l2_gradient(const Embedding& v, const Embedding& p) {
  const Embedding diff = v - p;
  const double n = diff.norm();
  if (n == 0.0) return Embedding::Zero(v.size());
  return diff / n;
}

double sign(double g) {
  return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
}

nlohmann::json to_json_vec(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

void ProxySet::validate() const {
  if (target_proxies.empty()) throw DomainError("proxy set: at least one target proxy is required");
  target_proxies.validate();
  require_unit_members(target_proxies, "target proxy");
  if (!source_proxies.empty()) {
    source_proxies.validate();
    require_unit_members(source_proxies, "source proxy");
    if (source_proxies.dim() != target_proxies.dim())
      throw DomainError("proxy set: source and target proxies differ in dimension");
  }
}

Optimizer parse_optimizer(std::string_view s) {
  if (s == "pgd") return Optimizer::pgd;
  if (s == "square") return Optimizer::square;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected pgd|square)");
}

Objective parse_objective(std::string_view s) {
  if (s == "pta") return Objective::pta;
  if (s == "illusion") return Objective::illusion;
  if (s == "samemodal") return Objective::samemodal;
  throw ConfigError("unknown attack '" + std::string(s) + "' (expected pta|illusion|samemodal)");
}

std::string_view to_string(Optimizer o) {
  return o == Optimizer::pgd ? "pgd" : "square";
}

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::pta:
      return "pta";
    case Objective::illusion:
      return "illusion";
    case Objective::samemodal:
      return "samemodal";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack.epsilon must be a finite value > 0");
  if (iterations < 0) throw ConfigError("attack.iterations must be >= 0");
  if (!(step_size > 0.0) || step_size > epsilon * (1.0 + 1e-12))
    throw ConfigError("attack.step_size must satisfy 0 < step_size <= epsilon");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("attack.alpha must be finite and >= 0");
  if (query_budget < 1) throw ConfigError("attack.query_budget must be >= 1");
  if (!(p_init > 0.0 && p_init <= 1.0)) throw ConfigError("attack.p_init must lie in (0, 1]");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"epsilon", epsilon},
          {"iterations", iterations},
          {"step_size", step_size},
          {"alpha", alpha},
          {"optimizer", std::string(to_string(optimizer))},
          {"query_budget", query_budget},
          {"p_init", p_init},
          {"seed", seed}};
}

AttackConfig square_defaults() {
  AttackConfig c;
  c.optimizer = Optimizer::square;
  c.epsilon = kSquareEpsilon;
  c.step_size = kSquareEpsilon / 10.0;
  return c;
}

Goal Goal::pta(ProxySet p) {
  Goal g;
  g.kind = Objective::pta;
  g.proxies = std::move(p);
  return g;
}

Goal Goal::illusion(Embedding target) {
  Goal g;
  g.kind = Objective::illusion;
  g.target = std::move(target);
  return g;
}

Goal Goal::samemodal(Embedding surrogate) {
  Goal g;
  g.kind = Objective::samemodal;
  g.surrogate = std::move(surrogate);
  return g;
}

double AttackResult::best_loss() const {
  if (loss_trace.empty()) throw DomainError("attack result has an empty loss trace");
  return *std::min_element(loss_trace.begin(), loss_trace.end());
}

nlohmann::json AttackResult::to_json() const {
  nlohmann::json echo = config.to_json();
  echo["objective"] = std::string(to_string(objective));
  return {{"original", to_json_vec(original)},
          {"adversarial_input", to_json_vec(adversarial_input)},
          {"adversarial_embedding", to_json_vec(adversarial_embedding)},
          {"objective_trace", loss_trace},
          {"queries_used", queries_used},
          {"config_echo", std::move(echo)},
          {"seed", config.seed}};
}

double loss_G(const Embedding& v, const ProxySet& p) {
  if (p.target_proxies.empty()) throw DomainError("loss_G: no target proxies");
  double sum = 0.0;
  for (const auto& y : p.target_proxies.members) sum += cosine(v, y);
  return 1.0 - sum / static_cast<double>(p.target_proxies.size());
}

double loss_D(const Embedding& v, const ProxySet& p) {
  if (p.source_proxies.empty()) throw DomainError("loss_D: no source proxies");
  double sum = 0.0;
  for (const auto& s : p.source_proxies.members) sum += l2_dist(v, s);
  return sum / static_cast<double>(p.source_proxies.size());
}

double pta_objective(const Embedding& v, const ProxySet& p, double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("pta_objective: alpha must be finite and >= 0");
  if (alpha > 0.0 && p.source_proxies.empty())
    throw ConfigError("pta_objective: alpha > 0 requires at least one source proxy");
  const double g = loss_G(v, p);
  return alpha > 0.0 ? g + alpha * loss_D(v, p) : g;
}

double illusion_objective(const Embedding& v, const Embedding& target) {
  return 1.0 - cosine(v, target);
}

double samemodal_objective(const Embedding& v, const Embedding& surrogate) {
  return l2_dist(v, surrogate);
}

double objective_value(const Goal& goal, const Embedding& v, double alpha) {
  switch (goal.kind) {
    case Objective::pta:
      return pta_objective(v, goal.proxies, alpha);
    case Objective::illusion:
      return illusion_objective(v, goal.target);
    case Objective::samemodal:
      return samemodal_objective(v, goal.surrogate);
  }
  throw DomainError("unknown objective");
}

Embedding objective_gradient(const Goal& goal, const Embedding& v, double alpha) {
  switch (goal.kind) {
    case Objective::pta: {
      const auto& p = goal.proxies;
      if (p.target_proxies.empty()) throw DomainError("objective_gradient: no target proxies");
      if (alpha > 0.0 && p.source_proxies.empty())
        throw ConfigError("objective_gradient: alpha > 0 requires at least one source proxy");
      Embedding g = Embedding::Zero(v.size());
      for (const auto& y : p.target_proxies.members) g -= cosine_gradient(v, y);
      g /= static_cast<double>(p.target_proxies.size());
      if (alpha > 0.0) {
        Embedding d = Embedding::Zero(v.size());
        for (const auto& s : p.source_proxies.members) d += l2_gradient(v, s);
        g += alpha * d / static_cast<double>(p.source_proxies.size());
      }
      return g;
    }
    case Objective::illusion:
      return -cosine_gradient(v, goal.target);
    case Objective::samemodal:
      return l2_gradient(v, goal.surrogate);
  }
  throw DomainError("unknown objective");
}

double input_objective(const SourceEncoder& enc, const Vector& x, const Goal& goal, double alpha) {
  return objective_value(goal, enc.encode(x), alpha);
}

Vector input_gradient(const SourceEncoder& enc, const Vector& x, const Goal& goal, double alpha) {
  // Every term depends on x only through v = encode(x), so the per-proxy
  // upstream gradients are summed before one backward pass.
  return enc.encode_gradient(x, objective_gradient(goal, enc.encode(x), alpha));
}

Vector project_box_ball(const Vector& x, const Vector& x0, double eps) {
  return x.array().max(x0.array() - eps).min(x0.array() + eps).max(0.0).min(1.0).matrix();
}

namespace {

void check_start(const Vector& x0) {
  if (x0.size() == 0) throw DomainError("attack: empty input");
  if (!x0.allFinite() || (x0.array() < 0.0).any() || (x0.array() > 1.0).any())
    throw DomainError("attack: x0 must be finite and lie in [0,1]^n");
}

}  // namespace

PgdOutcome pgd_minimize(const Vector& x0, const InputFn& f, const InputGradFn& grad, const AttackConfig& cfg) {
  cfg.validate();
  check_start(x0);
  PgdOutcome out;
  out.best = x0;
  double best = f(x0);
  out.evaluations = 1;
  out.trace.push_back(best);
  Vector x = x0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const Vector g = grad(x);
    if (!g.allFinite()) throw NumericError("pgd: non-finite gradient at iteration " + std::to_string(it));
    x = project_box_ball(x - cfg.step_size * g.unaryExpr(&sign), x0, cfg.epsilon);
    const double val = f(x);
    ++out.evaluations;
    if (!std::isfinite(val)) throw NumericError("pgd: non-finite objective at iteration " + std::to_string(it));
    out.trace.push_back(val);
    if (val < best) {
      best = val;
      out.best = x;
    }
  }
  return out;
}

namespace {

AttackResult finish(const SourceEncoder& enc, const Vector& x0, PgdOutcome o, const Goal& goal,
                    const AttackConfig& cfg) {
  AttackResult r;
  r.original = x0;
  r.adversarial_embedding = enc.encode(o.best);
  r.adversarial_input = std::move(o.best);
  r.loss_trace = std::move(o.trace);
  r.queries_used = o.evaluations;
  r.config = cfg;
  r.objective = goal.kind;
  return r;
}

void check_goal(const Goal& goal, double alpha, int embed_dim) {
  switch (goal.kind) {
    case Objective::pta:
      goal.proxies.validate();
      if (goal.proxies.target_proxies.dim() != embed_dim) throw DomainError("attack: proxy dimension mismatch");
      if (alpha > 0.0 && goal.proxies.source_proxies.empty())
        throw ConfigError("attack: alpha > 0 requires at least one source proxy");
      break;
    case Objective::illusion:
      if (goal.target.size() != embed_dim) throw DomainError("attack: target dimension mismatch");
      break;
    case Objective::samemodal:
      if (goal.surrogate.size() != embed_dim) throw DomainError("attack: surrogate dimension mismatch");
      break;
  }
}

}  // namespace

AttackResult run_pgd(const SourceEncoder& enc, const Vector& x0, const Goal& goal, const AttackConfig& cfg) {
  if (cfg.optimizer != Optimizer::pgd) throw ConfigError("run_pgd: optimizer must be pgd");
  check_goal(goal, cfg.alpha, enc.embed_dim());
  auto o = pgd_minimize(
      x0, [&](const Vector& x) { return input_objective(enc, x, goal, cfg.alpha); },
      [&](const Vector& x) { return input_gradient(enc, x, goal, cfg.alpha); }, cfg);
  return finish(enc, x0, std::move(o), goal, cfg);
}

double square_p_schedule(double p_init, int i, int budget) {
  static constexpr std::array<double, 6> kFractions{0.001, 0.005, 0.02, 0.1, 0.2, 0.5};
  const double t = static_cast<double>(i) / static_cast<double>(std::max(budget, 1));
  double p = p_init;
  for (double f : kFractions)
    if (t > f) p /= 2.0;
  return p;
}

PgdOutcome square_minimize(const Vector& x0, const InputFn& f, const AttackConfig& cfg) {
  cfg.validate();
  check_start(x0);
  const auto n = static_cast<int>(x0.size());
  int height = 1;
  for (int h = 1; h * h <= n; ++h)
    if (n % h == 0) height = h;
  const int width = n / height;

  Rng rng(derive_seed(cfg.seed, stream_id("square")));
  PgdOutcome out;
  out.best = x0;
  double best = f(x0);
  out.evaluations = 1;
  out.trace.push_back(best);
  if (cfg.query_budget >= 2) {
    Vector init(n);
    for (int c = 0; c < width; ++c) {
      const double s = rng.coin() ? cfg.epsilon : -cfg.epsilon;
      for (int r = 0; r < height; ++r) init(r * width + c) = x0(r * width + c) + s;
    }
    init = project_box_ball(init, x0, cfg.epsilon);
    const double v = f(init);
    ++out.evaluations;
    if (v < best) {
      best = v;
      out.best = std::move(init);
    }
    out.trace.push_back(best);
  }

  Vector cand;
  while (out.evaluations < cfg.query_budget) {
    const double p = square_p_schedule(cfg.p_init, out.evaluations, cfg.query_budget);
    const int side = std::clamp(static_cast<int>(std::lround(std::sqrt(p * n))), 1, std::min(height, width));
    const auto r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - side + 1)));
    const auto c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - side + 1)));
    double s = rng.coin() ? cfg.epsilon : -cfg.epsilon;

    auto fill = [&](double sgn) {
      bool changed = false;
      cand = out.best;
      for (int r = r0; r < r0 + side; ++r) {
        for (int c = c0; c < c0 + side; ++c) {
          const int k = r * width + c;
          const double val = std::clamp(x0(k) + sgn, 0.0, 1.0);
          changed = changed || val != out.best(k);
          cand(k) = val;
        }
      }
      return changed;
    };
    // A proposal equal to the current window would waste a query; its sign flip never is.
    if (!fill(s)) fill(-s);

    const double v = f(cand);
    ++out.evaluations;
    if (v < best) {
      best = v;
      out.best = cand;
    }
    out.trace.push_back(best);
  }
  return out;
}

AttackResult run_square(const SourceEncoder& enc, const Vector& x0, const Goal& goal, const AttackConfig& cfg) {
  if (cfg.optimizer != Optimizer::square) throw ConfigError("run_square: optimizer must be square");
  check_goal(goal, cfg.alpha, enc.embed_dim());
  auto o = square_minimize(x0, [&](const Vector& x) { return input_objective(enc, x, goal, cfg.alpha); }, cfg);
  return finish(enc, x0, std::move(o), goal, cfg);
}

AttackResult run_attack(const SourceEncoder& enc, const Vector& x0, const Goal& goal, const AttackConfig& cfg) {
  return cfg.optimizer == Optimizer::pgd ? run_pgd(enc, x0, goal, cfg) : run_square(enc, x0, goal, cfg);
}

SurrogateChoice select_surrogate(std::span<const EmbeddingSet> source_clusters, const Embedding& target_mean) {
  if (source_clusters.empty()) throw DomainError("select_surrogate: no source clusters");
  SurrogateChoice best;
  double best_cos = -2.0;
  for (std::size_t c = 0; c < source_clusters.size(); ++c) {
    const double cs = cosine(mean_embedding(source_clusters[c]), target_mean);
    if (cs > best_cos) {
      best_cos = cs;
      best.cluster = c;
    }
  }
  const auto& members = source_clusters[best.cluster].members;
  best_cos = -2.0;
  for (std::size_t i = 0; i < members.size(); ++i) {
    const double cs = cosine(members[i], target_mean);
    if (cs > best_cos) {
      best_cos = cs;
      best.member = i;
    }
  }
  best.embedding = members[best.member];
  return best;
}

}  // namespace pta
