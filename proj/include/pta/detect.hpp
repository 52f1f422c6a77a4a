#pragma once

#include "pta/numerics.hpp"

#include "json.hpp"

#include <cstdint>
#include <ostream>
#include <string_view>
#include <vector>

namespace pta {

enum class Detector { knn, lof, iforest, pca };

Detector parse_detector(std::string_view s);
std::string_view to_string(Detector d);

struct DetectionConfig {
  Detector method = Detector::knn;
  double anomaly_ratio = 0.1;
  int neighbors_k = 5;
  int n_trees = 100;
  int subsample = 256;
  double pca_variance_keep = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct DetectionResult {
  std::vector<double> scores;
  double threshold = 0.0;
  std::vector<std::size_t> outlier_indices;  // ascending
  std::size_t flagged_count = 0;

  bool flagged(std::size_t i) const;
  nlohmann::json to_json() const;
  /// index,score,flagged
  void write_csv(std::ostream& os) const;
};

/// Distance from each point to its k-th nearest other point.
std::vector<double> score_knn(std::span<const Embedding> points, int k);

/// Local Outlier Factor with exactly k neighbours per point (ties broken by
/// index). Local reachability density is 1 / (mean reach distance + 1e-10),
/// so a set of identical points scores 1 everywhere.
std::vector<double> score_lof(std::span<const Embedding> points, int k);

/// Isolation Forest: 2^(-E[h(x)] / c(psi)) with psi = min(subsample, N).
std::vector<double> score_iforest(std::span<const Embedding> points, int n_trees, int subsample, std::uint64_t seed);

/// Squared reconstruction error from the leading principal components that
/// explain at least `variance_keep` of the total variance.
std::vector<double> score_pca(std::span<const Embedding> points, double variance_keep);

/// Average path length of an unsuccessful BST search over n points.
double iforest_c(double n);

std::vector<double> score_points(std::span<const Embedding> points, const DetectionConfig& cfg);

/// threshold = quantile(scores, 1 - r); strict exceedances are outliers.
DetectionResult filter_outliers(std::span<const double> scores, double r);

/// Score then filter with cfg.anomaly_ratio.
DetectionResult detect(std::span<const Embedding> points, const DetectionConfig& cfg);

/// Flags exactly the `budget` highest-scoring points when scores are distinct,
/// via anomaly ratio budget / N.
DetectionResult detect_top(std::span<const Embedding> points, std::size_t budget, const DetectionConfig& cfg);

/// 1 + number of scores strictly greater than scores[i].
std::size_t score_rank(std::span<const double> scores, std::size_t i);

/// Mean over AEs of the AE's rank in the pooled set reference ∪ {AE}.
/// Ranks are raw ranks among N_ref + 1 points, not percentages.
double average_score_rank(std::span<const Embedding> aes, std::span<const Embedding> reference,
                          const DetectionConfig& cfg);

}  // namespace pta
