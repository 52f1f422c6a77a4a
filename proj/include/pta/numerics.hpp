#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace pta {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// A point in the shared latent space. Stored unnormalized; normalization is explicit.
using Embedding = Vector;

/// Ordered collection of same-dimension embeddings.
///
/// `tags` is either empty or holds one free-form tag per member (e.g. the
/// first column of an imported CSV file).
struct EmbeddingSet {
  std::vector<Embedding> members;
  std::string label;
  std::vector<std::string> tags;

  EmbeddingSet() = default;
  explicit EmbeddingSet(std::vector<Embedding> m, std::string l = {}) : members(std::move(m)), label(std::move(l)) {}

  std::size_t size() const noexcept { return members.size(); }
  bool empty() const noexcept { return members.empty(); }
  Eigen::Index dim() const noexcept { return members.empty() ? 0 : members.front().size(); }
  const Embedding& operator[](std::size_t i) const { return members[i]; }

  /// Throws DomainError when empty or ragged.
  void validate() const;
};

double cosine(const Embedding& a, const Embedding& b);
double l2_dist(const Embedding& a, const Embedding& b);
Embedding unit_normalize(const Embedding& a);
bool is_unit(const Embedding& a, double tol = 1e-9);

/// Coordinate-wise arithmetic mean, not re-normalized.
Embedding mean_embedding(std::span<const Embedding> members);
inline Embedding mean_embedding(const EmbeddingSet& s) {
  return mean_embedding(s.members);
}

/// Trace of the population (1/N) covariance.
double variance_trace(std::span<const Embedding> members);
inline double variance_trace(const EmbeddingSet& s) {
  return variance_trace(s.members);
}

/// Nearest-rank quantile: ascending sort, element at ceil(q*N) - 1 (index 0 for q = 0).
double quantile(std::span<const double> scores, double q);

/// Stacks members as rows of an N x d matrix.
Matrix stack_rows(std::span<const Embedding> members);

}  // namespace pta
