#include "pta/numerics.hpp"

#include "pta/errors.hpp"
#include "pta/rng.hpp"

#include <algorithm>
#include <cmath>

namespace pta {

double Rng::normal() noexcept {
  // 1 - uniform() lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void EmbeddingSet::validate() const {
  if (members.empty()) throw DomainError("embedding set '" + label + "' is empty");
  const auto d = members.front().size();
  for (std::size_t i = 1; i < members.size(); ++i) {
    if (members[i].size() != d) {
      throw DomainError("embedding set '" + label + "': member " + std::to_string(i) + " has dimension " +
                        std::to_string(members[i].size()) + ", expected " + std::to_string(d));
    }
  }
  if (!tags.empty() && tags.size() != members.size()) {
    throw DomainError("embedding set '" + label + "': tag count does not match member count");
  }
}

namespace {

void require_same_dim(const Embedding& a, const Embedding& b, const char* op) {
  if (a.size() != b.size()) {
    throw DomainError(std::string(op) + ": dimension mismatch (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
}

}  // namespace

double cosine(const Embedding& a, const Embedding& b) {
  require_same_dim(a, b, "cosine");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0) throw DomainError("cosine: first argument is the zero vector");
  if (nb == 0.0) throw DomainError("cosine: second argument is the zero vector");
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

double l2_dist(const Embedding& a, const Embedding& b) {
  require_same_dim(a, b, "l2_dist");
  return (a - b).norm();
}

Embedding unit_normalize(const Embedding& a) {
  const double n = a.norm();
  if (n == 0.0 || !std::isfinite(n)) throw DomainError("unit_normalize: zero or non-finite vector");
  return a / n;
}

bool is_unit(const Embedding& a, double tol) {
  return std::abs(a.norm() - 1.0) <= tol;
}

Embedding mean_embedding(std::span<const Embedding> members) {
  if (members.empty()) throw DomainError("mean_embedding: empty set");
  Embedding sum = Embedding::Zero(members.front().size());
  for (const auto& m : members) {
    require_same_dim(sum, m, "mean_embedding");
    sum += m;
  }
  return sum / static_cast<double>(members.size());
}

double variance_trace(std::span<const Embedding> members) {
  if (members.empty()) throw DomainError("variance_trace: empty set");
  const Embedding mu = mean_embedding(members);
  double total = 0.0;
  for (const auto& m : members) total += (m - mu).squaredNorm();
  return total / static_cast<double>(members.size());
}

double quantile(std::span<const double> scores, double q) {
  if (scores.empty()) throw DomainError("quantile: empty score list");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile: q must lie in [0, 1]");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::stable_sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  // The 1e-9 guard absorbs rounding in q*N (e.g. 0.8 * 10).
  const double rank = std::ceil(q * n - 1e-9);
  const auto idx = rank <= 0.0 ? std::size_t{0} : static_cast<std::size_t>(rank) - 1;
  return sorted[std::min(idx, sorted.size() - 1)];
}

Matrix stack_rows(std::span<const Embedding> members) {
  if (members.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(members.size()), members.front().size());
  for (std::size_t i = 0; i < members.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = members[i];
  return m;
}

}  // namespace pta
