#include "pta/theory.hpp"

#include "pta/errors.hpp"

#include <algorithm>
#include <cmath>

namespace pta {

namespace {

std::vector<double> to_std(const Vector& v) {
  return {v.data(), v.data() + v.size()};
}

Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Vector random_unit(int dim, Rng& rng) {
  Vector u(dim);
  for (;;) {
    for (int i = 0; i < dim; ++i) u(i) = rng.normal();
    if (u.norm() > 1e-12) return u / u.norm();
  }
}

}  // namespace

void TheoryInstance::validate() const {
  for (double v : {delta_norm, beta, sigma_S, sigma_T})
    if (!std::isfinite(v)) throw DomainError("theory instance: non-finite parameter");
  if (delta_norm < 0.0) throw DomainError("theory instance: delta_norm must be >= 0");
  if (sigma_S < 0.0 || sigma_T < 0.0) throw DomainError("theory instance: sigma_S and sigma_T must be >= 0");
  if (mu_S.size() != mu_T.size()) throw DomainError("theory instance: mu_S and mu_T differ in dimension");
  if (has_means() && std::abs((mu_T - mu_S).norm() - delta_norm) > 1e-9)
    throw DomainError("theory instance: |mu_T - mu_S| does not match delta_norm");
}

nlohmann::json TheoryInstance::to_json() const {
  return {{"delta_norm", delta_norm}, {"beta", beta},         {"sigma_S", sigma_S},
          {"sigma_T", sigma_T},       {"mu_S", to_std(mu_S)}, {"mu_T", to_std(mu_T)}};
}

TheoryInstance TheoryInstance::from_json(const nlohmann::json& j) {
  TheoryInstance t;
  t.delta_norm = j.at("delta_norm").get<double>();
  t.beta = j.at("beta").get<double>();
  t.sigma_S = j.at("sigma_S").get<double>();
  t.sigma_T = j.at("sigma_T").get<double>();
  t.mu_S = from_std(j.value("mu_S", std::vector<double>{}));
  t.mu_T = from_std(j.value("mu_T", std::vector<double>{}));
  t.validate();
  return t;
}

TheoryInstance make_theory_instance(double delta_norm, double beta, double sigma_S, double sigma_T, int dim, Rng& rng) {
  if (dim < 1) throw DomainError("make_theory_instance: dim must be >= 1");
  TheoryInstance t{delta_norm, beta, sigma_S, sigma_T, Vector(dim), Vector()};
  for (int i = 0; i < dim; ++i) t.mu_S(i) = rng.normal();
  const Vector u = random_unit(dim, rng);
  t.mu_T = t.mu_S + delta_norm * u;
  // Re-derive the norm so the instance is self-consistent to the last bit.
  t.delta_norm = (t.mu_T - t.mu_S).norm();
  t.validate();
  return t;
}

double theorem1_closed_form(const TheoryInstance& inst) {
  inst.validate();
  if (inst.beta < inst.sigma_S) {
    throw InfeasibleError("theorem 1: beta = " + std::to_string(inst.beta) + " < sigma_S = " +
                          std::to_string(inst.sigma_S) + ", no v satisfies |v - mu_S|^2 + sigma_S <= beta");
  }
  const double gap = std::max(inst.delta_norm - std::sqrt(inst.beta - inst.sigma_S), 0.0);
  return gap * gap + inst.sigma_T;
}

Embedding theorem1_optimal_embedding(const TheoryInstance& inst) {
  theorem1_closed_form(inst);
  if (!inst.has_means()) throw PreconditionError("theorem1_optimal_embedding: mean vectors are required");
  if (inst.delta_norm == 0.0) return inst.mu_T;
  const Vector dir = (inst.mu_T - inst.mu_S) / inst.delta_norm;
  return inst.mu_S + std::min(inst.delta_norm, std::sqrt(inst.beta - inst.sigma_S)) * dir;
}

OracleResult theorem1_numeric_oracle(const TheoryInstance& inst, int max_iterations, double pg_tol) {
  theorem1_closed_form(inst);
  if (!inst.has_means()) throw PreconditionError("theorem1_numeric_oracle: mean vectors are required");
  constexpr double kStep = 0.1;
  const double radius = std::sqrt(inst.beta - inst.sigma_S);
  auto project = [&](const Vector& v) -> Vector {
    const Vector d = v - inst.mu_S;
    const double n = d.norm();
    return n <= radius ? v : Vector(inst.mu_S + d * (radius / n));
  };

  OracleResult r;
  r.v = inst.mu_S;
  double pg = 0.0;
  for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
    const Vector grad = 2.0 * (r.v - inst.mu_T);
    const Vector next = project(r.v - kStep * grad);
    pg = (r.v - next).norm() / kStep;
    r.v = next;
    if (pg < pg_tol) break;
  }
  if (!(pg < pg_tol)) {
    throw NumericError("theorem 1 oracle: no convergence after " + std::to_string(max_iterations) +
                       " iterations (projected-gradient norm " + std::to_string(pg) + ")");
  }
  r.value = (r.v - inst.mu_T).squaredNorm() + inst.sigma_T;
  return r;
}

Vector nnls(const Matrix& A, const Vector& b, int max_iterations) {
  if (A.rows() != b.size()) throw DomainError("nnls: dimension mismatch");
  const auto n = A.cols();
  if (max_iterations <= 0) max_iterations = static_cast<int>(3 * n + 10);
  Vector x = Vector::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double tol = 1e-12 * std::max(1.0, A.cwiseAbs().maxCoeff() * std::max(1.0, b.cwiseAbs().maxCoeff()));

  auto solve_passive = [&]() {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    Matrix Ap(A.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) Ap.col(static_cast<Eigen::Index>(k)) = A.col(idx[k]);
    const Vector zp = Ap.colPivHouseholderQr().solve(b);
    Vector z = Vector::Zero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) z(idx[k]) = zp(static_cast<Eigen::Index>(k));
    return z;
  };

  for (int outer = 0; outer < max_iterations; ++outer) {
    const Vector w = A.transpose() * (b - A * x);
    Eigen::Index j_max = -1;
    double w_max = tol;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) > w_max) {
        w_max = w(j);
        j_max = j;
      }
    }
    if (j_max < 0) break;
    passive[static_cast<std::size_t>(j_max)] = true;

    for (int inner = 0; inner < max_iterations; ++inner) {
      const Vector z = solve_passive();
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0.0) feasible = false;
      if (feasible) {
        x = z;
        break;
      }
      double step = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0.0) step = std::min(step, x(j) / (x(j) - z(j)));
      }
      x += step * (z - x);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= tol) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0.0;
        }
      }
    }
  }
  return x;
}

Membership convex_membership(const Embedding& point, std::span<const Embedding> vertices, double tol) {
  if (vertices.empty()) throw DomainError("convex_membership: no vertices");
  const auto d = point.size();
  const auto m = static_cast<Eigen::Index>(vertices.size());
  Matrix A(d + 1, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    if (vertices[static_cast<std::size_t>(j)].size() != d) throw DomainError("convex_membership: dimension mismatch");
    A.col(j).head(d) = vertices[static_cast<std::size_t>(j)];
    A(d, j) = 1.0;
  }
  Vector b(d + 1);
  b.head(d) = point;
  b(d) = 1.0;

  Membership out;
  Vector w = nnls(A, b);
  const double s = w.sum();
  if (!(s > 0.0)) {
    out.residual = point.norm();
    return out;
  }
  w /= s;
  out.residual = (A.topRows(d) * w - point).norm();
  out.inside = out.residual < tol;
  if (out.inside) out.weights = to_std(w);
  return out;
}

namespace {

double min_cosine(std::span<const Embedding> set, const Embedding& other) {
  double b = 2.0;
  for (const auto& x : set) b = std::min(b, cosine(x, other));
  return b;
}

}  // namespace

BoundCheck theorem2_bound_check(const Embedding& ae, std::span<const Embedding> source_proxies,
                                const Embedding& true_target, double tol) {
  const auto m = convex_membership(ae, source_proxies, tol);
  if (!m.inside) {
    throw PreconditionError("theorem 2: ae is not a convex combination of the source proxies (residual " +
                            std::to_string(m.residual) + "); check with convex_membership first");
  }
  BoundCheck c;
  c.bound = min_cosine(source_proxies, true_target);
  c.value = cosine(ae, true_target);
  c.satisfied = c.value >= c.bound - 1e-9;
  return c;
}

BoundCheck theorem3_bound_check(const Embedding& ae, std::span<const Embedding> target_proxies,
                                const Embedding& true_target, double tol) {
  const auto m = convex_membership(true_target, target_proxies, tol);
  if (!m.inside) {
    throw PreconditionError("theorem 3: true target is not a convex combination of the target proxies (residual " +
                            std::to_string(m.residual) + "); check with convex_membership first");
  }
  BoundCheck c;
  c.bound = min_cosine(target_proxies, ae);
  c.value = cosine(ae, true_target);
  c.satisfied = c.value >= c.bound - 1e-9;
  return c;
}

std::vector<Theorem1Row> theorem1_sweep(int count, int dim_lo, int dim_hi, std::uint64_t seed) {
  if (count < 1) throw ConfigError("theorem1_sweep: count must be >= 1");
  if (dim_lo < 1 || dim_hi < dim_lo) throw ConfigError("theorem1_sweep: need 1 <= dim_lo <= dim_hi");
  std::vector<Theorem1Row> rows;
  rows.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream_id("theorem1", static_cast<std::uint64_t>(i))));
    const int dim = dim_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(dim_hi - dim_lo + 1)));
    const double sigma_S = rng.uniform();
    const double sigma_T = rng.uniform();
    const double beta = sigma_S + 4.0 * (1.0 - rng.uniform());  // (σ_S, σ_S + 4]
    const double delta = rng.uniform(0.0, 3.0);
    Theorem1Row r;
    r.inst = make_theory_instance(delta, beta, sigma_S, sigma_T, dim, rng);
    r.dim = dim;
    r.closed_form = theorem1_closed_form(r.inst);
    const auto o = theorem1_numeric_oracle(r.inst);
    r.oracle = o.value;
    r.iterations = o.iterations;
    r.gap = std::abs(r.closed_form - r.oracle);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::size_t theorem1_monotonicity_violations() {
  std::size_t violations = 0;
  for (double sigma_S : {0.0, 0.1107, 0.2753, 0.5706, 1.0}) {
    for (double sigma_T : {0.0, 0.1107, 0.5868}) {
      for (int di = 0; di <= 60; ++di) {
        const double delta = 0.05 * di;
        double prev = std::numeric_limits<double>::infinity();
        for (int bi = 0; bi <= 80; ++bi) {
          const double L = theorem1_closed_form({delta, sigma_S + 0.05 * bi, sigma_S, sigma_T, {}, {}});
          violations += L > prev;
          prev = L;
        }
      }
      for (int bi = 0; bi <= 80; ++bi) {
        const double beta = sigma_S + 0.05 * bi;
        double prev = -std::numeric_limits<double>::infinity();
        for (int di = 0; di <= 60; ++di) {
          const double L = theorem1_closed_form({0.05 * di, beta, sigma_S, sigma_T, {}, {}});
          violations += L < prev;
          prev = L;
        }
      }
    }
  }
  return violations;
}

nlohmann::json BoundInstance::to_json() const {
  nlohmann::json vs = nlohmann::json::array();
  for (const auto& v : vertices) vs.push_back(to_std(v));
  return {{"theorem", theorem}, {"ae", to_std(ae)}, {"vertices", std::move(vs)}, {"true_target", to_std(true_target)}};
}

BoundInstance BoundInstance::from_json(const nlohmann::json& j) {
  BoundInstance b;
  b.theorem = j.at("theorem").get<int>();
  if (b.theorem != 2 && b.theorem != 3) throw ConfigError("bound instance: theorem must be 2 or 3");
  b.ae = from_std(j.at("ae").get<std::vector<double>>());
  for (const auto& v : j.at("vertices")) b.vertices.push_back(from_std(v.get<std::vector<double>>()));
  b.true_target = from_std(j.at("true_target").get<std::vector<double>>());
  return b;
}

BoundCheck check_bound_instance(const BoundInstance& b) {
  return b.theorem == 2 ? theorem2_bound_check(b.ae, b.vertices, b.true_target)
                        : theorem3_bound_check(b.ae, b.vertices, b.true_target);
}

namespace {

std::vector<double> dirichlet_weights(std::size_t m, Rng& rng) {
  std::vector<double> w(m);
  double s = 0.0;
  for (auto& x : w) s += (x = -std::log(1.0 - rng.uniform()));
  for (auto& x : w) x /= s;
  return w;
}

// Unit vectors scattered around `centre` with nonnegative cosine to it.
std::vector<Embedding> spread_around(const Vector& centre, std::size_t m, Rng& rng) {
  const auto dim = static_cast<int>(centre.size());
  const double spread = rng.uniform(0.1, 1.5);
  std::vector<Embedding> out;
  while (out.size() < m) {
    Vector v = centre;
    for (int i = 0; i < dim; ++i) v(i) += spread * rng.normal() / std::sqrt(static_cast<double>(dim));
    if (v.norm() < 1e-12) continue;
    v.normalize();
    if (v.dot(centre) >= 0.0) out.push_back(std::move(v));
  }
  return out;
}

Vector combine(const std::vector<Embedding>& vs, const std::vector<double>& w) {
  Vector p = Vector::Zero(vs.front().size());
  for (std::size_t i = 0; i < vs.size(); ++i) p += w[i] * vs[i];
  return p;
}

std::vector<BoundRow> bound_sweep(int theorem, int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("bound sweep: count must be >= 1");
  std::vector<BoundRow> rows;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream_id(theorem == 2 ? "theorem2" : "theorem3", static_cast<std::uint64_t>(i))));
    const int dim = 2 + static_cast<int>(rng.below(31));
    const std::size_t m = 1 + rng.below(8);
    BoundInstance b;
    b.theorem = theorem;
    for (;;) {
      const Vector centre = random_unit(dim, rng);
      b.vertices = spread_around(centre, m, rng);
      const auto w = dirichlet_weights(m, rng);
      if (theorem == 2) {
        b.true_target = centre;
        b.ae = combine(b.vertices, w);
      } else {
        b.true_target = combine(b.vertices, w);
        b.ae = spread_around(centre, 1, rng).front();
      }
      if (b.ae.norm() < 1e-9 || b.true_target.norm() < 1e-9) continue;
      const auto& probe = theorem == 2 ? b.true_target : b.ae;
      if (min_cosine(b.vertices, probe) >= 0.0) break;
    }
    BoundRow r{std::move(b), {}};
    r.check = check_bound_instance(r.inst);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

std::vector<BoundRow> theorem2_sweep(int count, std::uint64_t seed) {
  return bound_sweep(2, count, seed);
}
std::vector<BoundRow> theorem3_sweep(int count, std::uint64_t seed) {
  return bound_sweep(3, count, seed);
}

}  // namespace pta
