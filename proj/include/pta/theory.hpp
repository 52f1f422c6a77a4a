#pragma once

#include "pta/numerics.hpp"
#include "pta/rng.hpp"

#include "json.hpp"

#include <cstdint>
#include <vector>

namespace pta {

/// (‖Δ‖, β, σ_S, σ_T) with optional mean vectors μ_S, μ_T.
struct TheoryInstance {
  double delta_norm = 0.0;
  double beta = 0.0;
  double sigma_S = 0.0;
  double sigma_T = 0.0;
  Embedding mu_S;
  Embedding mu_T;

  bool has_means() const noexcept { return mu_S.size() > 0 && mu_T.size() > 0; }
  /// Non-negativity, finiteness, and ‖μ_T − μ_S‖ = delta_norm within 1e-9 when means are present.
  void validate() const;

  nlohmann::json to_json() const;
  static TheoryInstance from_json(const nlohmann::json& j);
};

/// Instance with means in R^dim: μ_S ~ N(0, I), μ_T = μ_S + delta_norm * u for a random unit u.
TheoryInstance make_theory_instance(double delta_norm, double beta, double sigma_S, double sigma_T, int dim, Rng& rng);

/// min_v ‖v − μ_T‖² + σ_T  s.t.  ‖v − μ_S‖² + σ_S ≤ β, in closed form:
/// (max{‖Δ‖ − sqrt(β − σ_S), 0})² + σ_T.
/// Throws InfeasibleError when β < σ_S. For β = σ_S and Δ = 0 this gives σ_T.
double theorem1_closed_form(const TheoryInstance& inst);

/// The minimizer: μ_S + min(‖Δ‖, sqrt(β − σ_S)) Δ/‖Δ‖ (μ_T when Δ = 0).
Embedding theorem1_optimal_embedding(const TheoryInstance& inst);

struct OracleResult {
  double value = 0.0;
  Embedding v;
  int iterations = 0;
};

/// Projected gradient descent on v from μ_S: step 0.1, at most `max_iterations`
/// steps, stopping once the projected-gradient norm drops below `pg_tol`.
/// Throws NumericError if the cap is hit first.
OracleResult theorem1_numeric_oracle(const TheoryInstance& inst, int max_iterations = 10000, double pg_tol = 1e-10);

struct Membership {
  bool inside = false;
  std::vector<double> weights;  // empty unless inside
  double residual = 0.0;        // ‖Σ w_i v_i − point‖ of the normalized NNLS weights
};

/// Nonnegative least squares (Lawson-Hanson): argmin_{x >= 0} ‖A x − b‖.
Vector nnls(const Matrix& A, const Vector& b, int max_iterations = 0);

/// Decides whether point = Σ w_i v_i with w >= 0, Σ w = 1. Solved as NNLS on
/// the vertex matrix augmented by a row of ones (target 1).
Membership convex_membership(const Embedding& point, std::span<const Embedding> vertices, double tol = 1e-7);

struct BoundCheck {
  double bound = 0.0;  // the minimum cosine
  double value = 0.0;  // cosine(ae, true_target)
  bool satisfied = false;
};

/// ae inside the hull of the source proxies:
/// cosine(ae, t) >= min_i cosine(x_i, t) − 1e-9. The inequality is guaranteed
/// when that minimum is >= 0; below zero it can fail (see the unit tests).
/// Throws PreconditionError when ae is not in the hull.
BoundCheck theorem2_bound_check(const Embedding& ae, std::span<const Embedding> source_proxies,
                                const Embedding& true_target, double tol = 1e-7);

/// true_target inside the hull of the target proxies:
/// cosine(ae, t) >= min_j cosine(ae, y_j) − 1e-9 (same sign caveat).
BoundCheck theorem3_bound_check(const Embedding& ae, std::span<const Embedding> target_proxies,
                                const Embedding& true_target, double tol = 1e-7);

struct Theorem1Row {
  TheoryInstance inst;
  int dim = 0;
  double closed_form = 0.0;
  double oracle = 0.0;
  double gap = 0.0;
  int iterations = 0;
};

/// `count` random feasible instances: dim uniform in [dim_lo, dim_hi],
/// β − σ_S in (0, 4], ‖Δ‖ in [0, 3], σ's in [0, 1].
std::vector<Theorem1Row> theorem1_sweep(int count, int dim_lo, int dim_hi, std::uint64_t seed);

/// Violations of "L non-increasing in β" and "L non-decreasing in ‖Δ‖" over fixed grids.
std::size_t theorem1_monotonicity_violations();

struct BoundInstance {
  int theorem = 2;
  Embedding ae;
  std::vector<Embedding> vertices;
  Embedding true_target;

  nlohmann::json to_json() const;
  static BoundInstance from_json(const nlohmann::json& j);
};

struct BoundRow {
  BoundInstance inst;
  BoundCheck check;
};

/// Random hull-constrained triples whose bound is nonnegative.
std::vector<BoundRow> theorem2_sweep(int count, std::uint64_t seed);
std::vector<BoundRow> theorem3_sweep(int count, std::uint64_t seed);

BoundCheck check_bound_instance(const BoundInstance& b);

}  // namespace pta
