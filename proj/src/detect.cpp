#include "pta/detect.hpp"

#include "pta/errors.hpp"
#include "pta/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace pta {

Detector parse_detector(std::string_view s) {
  if (s == "knn") return Detector::knn;
  if (s == "lof") return Detector::lof;
  if (s == "iforest") return Detector::iforest;
  if (s == "pca") return Detector::pca;
  throw ConfigError("unknown detector '" + std::string(s) + "' (expected knn|lof|iforest|pca)");
}

std::string_view to_string(Detector d) {
  switch (d) {
    case Detector::knn:
      return "knn";
    case Detector::lof:
      return "lof";
    case Detector::iforest:
      return "iforest";
    case Detector::pca:
      return "pca";
  }
  return "?";
}

void DetectionConfig::validate() const {
  if (!(anomaly_ratio > 0.0 && anomaly_ratio <= 1.0)) throw ConfigError("detection.anomaly_ratio must lie in (0, 1]");
  if (neighbors_k < 1) throw ConfigError("detection.neighbors_k must be >= 1");
  if (method == Detector::lof && neighbors_k < 2) throw ConfigError("detection.neighbors_k must be >= 2 for lof");
  if (n_trees < 1) throw ConfigError("detection.n_trees must be >= 1");
  if (subsample < 2) throw ConfigError("detection.subsample must be >= 2");
  if (!(pca_variance_keep > 0.0 && pca_variance_keep <= 1.0))
    throw ConfigError("detection.pca_variance_keep must lie in (0, 1]");
}

nlohmann::json DetectionConfig::to_json() const {
  return {{"method", std::string(to_string(method))},
          {"anomaly_ratio", anomaly_ratio},
          {"neighbors_k", neighbors_k},
          {"n_trees", n_trees},
          {"subsample", subsample},
          {"pca_variance_keep", pca_variance_keep},
          {"seed", seed}};
}

bool DetectionResult::flagged(std::size_t i) const {
  return std::binary_search(outlier_indices.begin(), outlier_indices.end(), i);
}

nlohmann::json DetectionResult::to_json() const {
  return {{"scores", scores},
          {"threshold", threshold},
          {"outlier_indices", outlier_indices},
          {"flagged_count", flagged_count}};
}

void DetectionResult::write_csv(std::ostream& os) const {
  os << "index,score,flagged\n";
  char buf[64];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, scores[i]);
    os << i << ',' << std::string_view(buf, static_cast<std::size_t>(end - buf)) << ',' << (flagged(i) ? 1 : 0) << '\n';
  }
}

namespace {

void require_points(std::span<const Embedding> points, std::size_t min_count, const char* op) {
  if (points.size() < min_count) {
    throw ConfigError(std::string(op) + ": needs at least " + std::to_string(min_count) + " points, got " +
                      std::to_string(points.size()));
  }
  for (const auto& p : points) {
    if (p.size() != points.front().size()) throw DomainError(std::string(op) + ": ragged point set");
  }
}

Matrix pairwise_distances(std::span<const Embedding> points) {
  const auto n = static_cast<Eigen::Index>(points.size());
  Matrix d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (points[i] - points[j]).norm();
  }
  return d;
}

// Indices of the other points ordered by (distance, index).
std::vector<Eigen::Index> neighbour_order(const Matrix& d, Eigen::Index i) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(d.rows() - 1));
  for (Eigen::Index j = 0; j < d.rows(); ++j)
    if (j != i) idx.push_back(j);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return d(i, a) < d(i, b); });
  return idx;
}

}  // namespace

std::vector<double> score_knn(std::span<const Embedding> points, int k) {
  if (k < 1) throw ConfigError("score_knn: k must be >= 1");
  if (static_cast<std::size_t>(k) >= points.size())
    throw ConfigError("score_knn: k = " + std::to_string(k) + " must be below the point count " +
                      std::to_string(points.size()));
  require_points(points, 2, "score_knn");
  const Matrix d = pairwise_distances(points);
  std::vector<double> out(points.size());
  std::vector<double> row;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    row.clear();
    for (Eigen::Index j = 0; j < d.cols(); ++j)
      if (j != i) row.push_back(d(i, j));
    std::nth_element(row.begin(), row.begin() + (k - 1), row.end());
    out[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(k - 1)];
  }
  return out;
}

std::vector<double> score_lof(std::span<const Embedding> points, int k) {
  if (k < 2) throw ConfigError("score_lof: k must be >= 2");
  if (static_cast<std::size_t>(k) >= points.size())
    throw ConfigError("score_lof: k = " + std::to_string(k) + " must be below the point count " +
                      std::to_string(points.size()));
  require_points(points, 3, "score_lof");
  const Matrix d = pairwise_distances(points);
  const auto n = static_cast<std::size_t>(d.rows());
  const auto kk = static_cast<std::size_t>(k);

  std::vector<std::vector<Eigen::Index>> nbrs(n);
  std::vector<double> kdist(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto order = neighbour_order(d, static_cast<Eigen::Index>(i));
    order.resize(kk);
    kdist[i] = d(static_cast<Eigen::Index>(i), order.back());
    nbrs[i] = std::move(order);
  }
  std::vector<double> lrd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double reach = 0.0;
    for (auto o : nbrs[i]) reach += std::max(kdist[static_cast<std::size_t>(o)], d(static_cast<Eigen::Index>(i), o));
    lrd[i] = 1.0 / (reach / static_cast<double>(kk) + 1e-10);
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (auto o : nbrs[i]) s += lrd[static_cast<std::size_t>(o)];
    out[i] = s / static_cast<double>(kk) / lrd[i];
  }
  return out;
}

double iforest_c(double n) {
  if (n <= 1.0) return 0.0;
  if (n <= 2.0) return 1.0;
  constexpr double kEulerGamma = 0.5772156649015329;
  return 2.0 * (std::log(n - 1.0) + kEulerGamma) - 2.0 * (n - 1.0) / n;
}

namespace {

struct IsoNode {
  int feature = -1;  // -1 marks a leaf
  double split = 0.0;
  int left = -1;
  int right = -1;
  std::size_t size = 0;
};

class IsoTree {
 public:
  IsoTree(std::span<const Embedding> points, std::vector<std::size_t> sample, int height_limit, Rng& rng)
      : points_(points), limit_(height_limit) {
    build(sample, 0, rng);
  }

  double path_length(const Embedding& x) const {
    int node = 0;
    int depth = 0;
    while (nodes_[static_cast<std::size_t>(node)].feature >= 0) {
      const auto& nd = nodes_[static_cast<std::size_t>(node)];
      node = x(nd.feature) < nd.split ? nd.left : nd.right;
      ++depth;
    }
    return depth + iforest_c(static_cast<double>(nodes_[static_cast<std::size_t>(node)].size));
  }

 private:
  int build(std::vector<std::size_t>& idx, int depth, Rng& rng) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(IsoNode{});
    nodes_.back().size = idx.size();
    if (depth >= limit_ || idx.size() <= 1) return id;

    const auto dim = points_.front().size();
    std::vector<int> candidates;
    Vector lo = points_[idx.front()], hi = points_[idx.front()];
    for (auto i : idx) {
      lo = lo.cwiseMin(points_[i]);
      hi = hi.cwiseMax(points_[i]);
    }
    for (Eigen::Index f = 0; f < dim; ++f)
      if (hi(f) > lo(f)) candidates.push_back(static_cast<int>(f));
    if (candidates.empty()) return id;

    const int f = candidates[rng.below(candidates.size())];
    const double split = rng.uniform(lo(f), hi(f));
    std::vector<std::size_t> left, right;
    for (auto i : idx) (points_[i](f) < split ? left : right).push_back(i);

    const int l = build(left, depth + 1, rng);
    const int r = build(right, depth + 1, rng);
    auto& nd = nodes_[static_cast<std::size_t>(id)];
    nd.feature = f;
    nd.split = split;
    nd.left = l;
    nd.right = r;
    return id;
  }

  std::span<const Embedding> points_;
  int limit_;
  std::vector<IsoNode> nodes_;
};

}  // namespace

std::vector<double> score_iforest(std::span<const Embedding> points, int n_trees, int subsample, std::uint64_t seed) {
  require_points(points, 2, "score_iforest");
  if (n_trees < 1) throw ConfigError("score_iforest: n_trees must be >= 1");
  if (subsample < 2) throw ConfigError("score_iforest: subsample must be >= 2");
  const std::size_t psi = std::min<std::size_t>(static_cast<std::size_t>(subsample), points.size());
  const int limit = static_cast<int>(std::ceil(std::log2(static_cast<double>(psi))));

  std::vector<double> total(points.size(), 0.0);
  std::vector<std::size_t> all(points.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (int t = 0; t < n_trees; ++t) {
    Rng rng(derive_seed(seed, stream_id("iforest-tree", static_cast<std::uint64_t>(t))));
    // Partial Fisher-Yates: the first psi entries are a uniform sample without replacement.
    std::vector<std::size_t> perm = all;
    for (std::size_t i = 0; i < psi; ++i) std::swap(perm[i], perm[i + rng.below(perm.size() - i)]);
    perm.resize(psi);
    const IsoTree tree(points, std::move(perm), limit, rng);
    for (std::size_t i = 0; i < points.size(); ++i) total[i] += tree.path_length(points[i]);
  }
  const double c = iforest_c(static_cast<double>(psi));
  std::vector<double> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = std::exp2(-(total[i] / n_trees) / c);
  return out;
}

std::vector<double> score_pca(std::span<const Embedding> points, double variance_keep) {
  if (!(variance_keep > 0.0 && variance_keep <= 1.0)) throw ConfigError("score_pca: variance_keep must lie in (0, 1]");
  require_points(points, 2, "score_pca");
  Matrix x = stack_rows(points);
  x.rowwise() -= x.colwise().mean();
  const Matrix cov = (x.transpose() * x) / static_cast<double>(x.rows());
  const Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("score_pca: eigendecomposition failed");

  // Eigen sorts ascending; walk from the largest.
  const Vector ev = es.eigenvalues().cwiseMax(0.0);
  const double total = ev.sum();
  const auto d = ev.size();
  Eigen::Index keep = 0;
  if (total > 0.0) {
    double acc = 0.0;
    while (keep < d) {
      acc += ev(d - 1 - keep);
      ++keep;
      if (acc / total >= variance_keep - 1e-12) break;
    }
  }
  const Matrix basis = es.eigenvectors().rightCols(keep);
  const Matrix resid = x - (x * basis) * basis.transpose();
  std::vector<double> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = resid.row(static_cast<Eigen::Index>(i)).squaredNorm();
  return out;
}

std::vector<double> score_points(std::span<const Embedding> points, const DetectionConfig& cfg) {
  switch (cfg.method) {
    case Detector::knn:
      return score_knn(points, cfg.neighbors_k);
    case Detector::lof:
      return score_lof(points, cfg.neighbors_k);
    case Detector::iforest:
      return score_iforest(points, cfg.n_trees, cfg.subsample, cfg.seed);
    case Detector::pca:
      return score_pca(points, cfg.pca_variance_keep);
  }
  throw ConfigError("unknown detector");
}

DetectionResult filter_outliers(std::span<const double> scores, double r) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("filter_outliers: r must lie in (0, 1]");
  DetectionResult res;
  res.scores.assign(scores.begin(), scores.end());
  res.threshold = quantile(scores, 1.0 - r);
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > res.threshold) res.outlier_indices.push_back(i);
  res.flagged_count = res.outlier_indices.size();
  return res;
}

DetectionResult detect(std::span<const Embedding> points, const DetectionConfig& cfg) {
  cfg.validate();
  const auto s = score_points(points, cfg);
  return filter_outliers(s, cfg.anomaly_ratio);
}

DetectionResult detect_top(std::span<const Embedding> points, std::size_t budget, const DetectionConfig& cfg) {
  if (budget == 0 || budget > points.size())
    throw ConfigError("detect_top: budget must lie in [1, " + std::to_string(points.size()) + "]");
  const auto s = score_points(points, cfg);
  return filter_outliers(s, static_cast<double>(budget) / static_cast<double>(points.size()));
}

std::size_t score_rank(std::span<const double> scores, std::size_t i) {
  if (i >= scores.size()) throw LookupError("score_rank: index out of range");
  std::size_t higher = 0;
  for (double s : scores)
    if (s > scores[i]) ++higher;
  return 1 + higher;
}

double average_score_rank(std::span<const Embedding> aes, std::span<const Embedding> reference,
                          const DetectionConfig& cfg) {
  if (reference.empty()) throw DomainError("average_score_rank: empty reference set");
  if (aes.empty()) throw DomainError("average_score_rank: no adversarial embeddings");
  std::vector<Embedding> pool(reference.begin(), reference.end());
  pool.emplace_back();
  double sum = 0.0;
  for (const auto& ae : aes) {
    pool.back() = ae;
    const auto s = score_points(pool, cfg);
    sum += static_cast<double>(score_rank(s, pool.size() - 1));
  }
  return sum / static_cast<double>(aes.size());
}

}  // namespace pta
