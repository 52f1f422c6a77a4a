#pragma once

#include "pta/numerics.hpp"
#include "pta/synthworld.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

namespace pta {

/// The adversary's knowledge: N_s source-modal and N_c target-modal proxy embeddings.
struct ProxySet {
  EmbeddingSet source_proxies;
  EmbeddingSet target_proxies;

  /// N_c >= 1, all members unit-norm, consistent dimensions.
  void validate() const;
};

enum class Optimizer { pgd, square };
enum class Objective { pta, illusion, samemodal };

Optimizer parse_optimizer(std::string_view s);
Objective parse_objective(std::string_view s);
std::string_view to_string(Optimizer o);
std::string_view to_string(Objective o);

inline constexpr double kDefaultEpsilon = 8.0 / 255.0;
inline constexpr double kSquareEpsilon = 16.0 / 255.0;

struct AttackConfig {
  double epsilon = kDefaultEpsilon;
  int iterations = 100;
  double step_size = kDefaultEpsilon / 10.0;
  double alpha = 0.0;
  Optimizer optimizer = Optimizer::pgd;
  int query_budget = 10000;
  double p_init = 0.8;  // square only: initial window area fraction
  std::uint64_t seed = 0;

  /// Throws ConfigError listing the first violated field.
  void validate() const;
  nlohmann::json to_json() const;
};

AttackConfig square_defaults();

/// What the attack minimizes, with the data each objective needs.
struct Goal {
  Objective kind = Objective::pta;
  ProxySet proxies;     // pta
  Embedding target;     // illusion
  Embedding surrogate;  // samemodal

  static Goal pta(ProxySet p);
  static Goal illusion(Embedding target);
  static Goal samemodal(Embedding surrogate);
};

struct AttackResult {
  Vector original;
  Vector adversarial_input;
  Embedding adversarial_embedding;
  std::vector<double> loss_trace;
  int queries_used = 0;
  AttackConfig config;
  Objective objective = Objective::pta;

  double best_loss() const;
  nlohmann::json to_json() const;
};

double loss_G(const Embedding& v, const ProxySet& p);
double loss_D(const Embedding& v, const ProxySet& p);
double pta_objective(const Embedding& v, const ProxySet& p, double alpha);
double illusion_objective(const Embedding& v, const Embedding& target);
double samemodal_objective(const Embedding& v, const Embedding& surrogate);

/// Value of `goal` at embedding v; alpha is only read by the pta objective.
double objective_value(const Goal& goal, const Embedding& v, double alpha);

/// d objective / d v for an arbitrary (not necessarily unit) v. The L2 terms
/// use the zero subgradient where v coincides with a proxy.
Embedding objective_gradient(const Goal& goal, const Embedding& v, double alpha);

/// Objective as a function of the raw input, through the encoder.
double input_objective(const SourceEncoder& enc, const Vector& x, const Goal& goal, double alpha);
Vector input_gradient(const SourceEncoder& enc, const Vector& x, const Goal& goal, double alpha);

/// Signed-gradient PGD in the L-inf ball around x0 intersected with [0,1]^n.
///
/// `loss_trace` holds the objective at x0 followed by the objective after each
/// step; the returned input is the best iterate seen, x0 included.
struct PgdOutcome {
  Vector best;
  std::vector<double> trace;
  int evaluations = 0;
};
using InputFn = std::function<double(const Vector&)>;
using InputGradFn = std::function<Vector(const Vector&)>;
PgdOutcome pgd_minimize(const Vector& x0, const InputFn& f, const InputGradFn& grad, const AttackConfig& cfg);

/// Projection of x onto {y : |y - x0|_inf <= eps} ∩ [0,1]^n.
Vector project_box_ball(const Vector& x, const Vector& x0, double eps);

AttackResult run_pgd(const SourceEncoder& enc, const Vector& x0, const Goal& goal, const AttackConfig& cfg);

/// Square Attack (L-inf random search over square windows).
///
/// The input is viewed as a height x width image, height being the largest
/// divisor of n not above sqrt(n). Query 1 evaluates x0; query 2 evaluates the
/// vertical-stripe initialization. Window area starts at p_init * n and halves
/// at 0.1%, 0.5%, 2%, 10%, 20% and 50% of the budget. `loss_trace` is the
/// best-so-far objective after every query.
AttackResult run_square(const SourceEncoder& enc, const Vector& x0, const Goal& goal, const AttackConfig& cfg);

/// Square Attack on an arbitrary black-box function (used by run_square and tests).
PgdOutcome square_minimize(const Vector& x0, const InputFn& f, const AttackConfig& cfg);

/// Window area fraction in effect at query `i` of `budget`.
double square_p_schedule(double p_init, int i, int budget);

/// Dispatches on cfg.optimizer.
AttackResult run_attack(const SourceEncoder& enc, const Vector& x0, const Goal& goal, const AttackConfig& cfg);

struct SurrogateChoice {
  std::size_t cluster = 0;
  std::size_t member = 0;
  Embedding embedding;
};

/// Same-modal surrogate: the cluster whose mean has maximal cosine to
/// `target_mean`, then that cluster's member with maximal cosine to it.
SurrogateChoice select_surrogate(std::span<const EmbeddingSet> source_clusters, const Embedding& target_mean);

}  // namespace pta
