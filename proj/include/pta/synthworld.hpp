#pragma once

#include "pta/numerics.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace pta {

struct WorldDims {
  int input_dim = 2304;  // 48 x 48 "pixels" in [0, 1]
  int hidden_dim = 64;
  int embed_dim = 32;

  friend bool operator==(const WorldDims&, const WorldDims&) = default;
};

/// Two-layer tanh network followed by unit normalization: the source-modality encoder.
///
/// Weights come from `Rng` streams derived from `seed`, scaled by 1/sqrt(fan_in).
/// The first-layer bias also carries the term -W1 * (0.5, ..., 0.5), so the
/// centre of the input box maps to a near-zero pre-activation.
class SourceEncoder {
 public:
  SourceEncoder(int input_dim, int hidden_dim, int embed_dim, std::uint64_t seed);

  int input_dim() const noexcept { return static_cast<int>(layer1_.cols()); }
  int hidden_dim() const noexcept { return static_cast<int>(layer1_.rows()); }
  int embed_dim() const noexcept { return static_cast<int>(layer2_.rows()); }
  std::uint64_t seed() const noexcept { return seed_; }

  const Matrix& layer1_weights() const noexcept { return layer1_; }
  const Vector& layer1_bias() const noexcept { return bias1_; }
  const Matrix& layer2_weights() const noexcept { return layer2_; }

  /// unit_normalize(W2 * tanh(W1 x + b)).
  Embedding encode(const Vector& x) const;

  /// d(upstream . encode(x)) / dx by backpropagation through normalize, W2, tanh, W1.
  Vector encode_gradient(const Vector& x, const Embedding& upstream) const;

 private:
  void check_input(const Vector& x, const char* op) const;

  Matrix layer1_;  // hidden x input
  Vector bias1_;
  Matrix layer2_;  // embed x hidden
  std::uint64_t seed_;
};

/// Throws ConfigError when any dimension is below 2.
SourceEncoder build_encoder(int input_dim, int hidden_dim, int embed_dim, std::uint64_t seed);
inline SourceEncoder build_encoder(const WorldDims& d, std::uint64_t seed) {
  return build_encoder(d.input_dim, d.hidden_dim, d.embed_dim, seed);
}

/// Sampling distribution of one concept in both modalities.
struct ClusterSpec {
  Embedding concept_direction;     // unit norm
  double source_dispersion = 0.0;  // input-space noise scale
  double target_dispersion = 0.0;  // embedding-space noise scale
  Embedding modality_offset;       // shift realizing the modality gap
  int count = 100;                 // target-modal samples
  int source_count = 0;            // source-modal samples; 0 means `count`

  int effective_source_count() const noexcept { return source_count > 0 ? source_count : count; }
  void validate(int embed_dim) const;
};

/// Everything an experiment needs about the synthetic world. Immutable once built.
struct WorldSnapshot {
  WorldDims dims;
  std::uint64_t seed = 0;
  SourceEncoder encoder;
  std::vector<ClusterSpec> clusters;
  std::vector<std::vector<Vector>> source_inputs;  // per cluster, each in [0,1]^n
  std::vector<EmbeddingSet> target_embeddings;     // per cluster

  std::size_t cluster_count() const noexcept { return clusters.size(); }
  void require_cluster(std::size_t c) const;
};

/// Anchor input of cluster `c`: uniform in [0.25, 0.75]^n from its own stream.
Vector cluster_anchor(std::uint64_t seed, std::size_t cluster, int input_dim);

WorldSnapshot sample_world(std::vector<ClusterSpec> specs, const WorldDims& dims, std::uint64_t seed);

/// Target embeddings alternate roles by index parity: even indices are the
/// adversary's proxies, odd indices the held-out true targets. Source inputs
/// use the same parity rule: even indices belong to the adversary, odd ones to
/// the defender (gallery items and detection references).
std::vector<std::size_t> proxy_indices(std::size_t count);
std::vector<std::size_t> true_target_indices(std::size_t count);
EmbeddingSet proxy_half(const EmbeddingSet& s);
EmbeddingSet true_target_half(const EmbeddingSet& s);
template <class T>
std::vector<T> even_half(const std::vector<T>& v) {
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); i += 2) out.push_back(v[i]);
  return out;
}
template <class T>
std::vector<T> odd_half(const std::vector<T>& v) {
  std::vector<T> out;
  for (std::size_t i = 1; i < v.size(); i += 2) out.push_back(v[i]);
  return out;
}

/// Source embeddings of every cluster, in input order.
std::vector<EmbeddingSet> source_embeddings(const WorldSnapshot& w);

struct GapStats {
  double delta_norm = 0.0;
  double sigma_S = 0.0;
  double sigma_T = 0.0;
};

/// Modality gap and dispersion traces of one cluster. Throws LookupError for unknown ids.
GapStats empirical_gap_stats(const WorldSnapshot& w, std::size_t cluster);

enum class Preset { classification, retrieval };

Preset parse_preset(std::string_view name);
std::string_view to_string(Preset p);

/// Cluster specs of a preset, tied to the encoder and anchors of `seed`.
///
/// Concept directions are the encoder's output at each cluster anchor, and all
/// clusters share one modality offset. Dispersions are calibrated so the
/// empirical traces land near the reference magnitudes
/// (sigma_T, sigma_S) ~ (0.11, 0.28) for classification and (0.59, 0.57) for retrieval.
std::vector<ClusterSpec> preset_specs(Preset p, const WorldDims& dims, std::uint64_t seed, int clusters = 8);

inline WorldSnapshot make_preset_world(Preset p, std::uint64_t seed, const WorldDims& dims = {}, int clusters = 8) {
  return sample_world(preset_specs(p, dims, seed, clusters), dims, seed);
}

/// Text-side queries paired one-to-one with source embeddings:
/// unit_normalize(item + offset(tag) + N(0, dispersion^2 I / d)).
EmbeddingSet paired_queries(const WorldSnapshot& w, std::span<const Embedding> items,
                            std::span<const std::size_t> item_clusters, double dispersion, std::uint64_t seed);

/// Replaces the synthetic target sampler with externally supplied embeddings,
/// one group per cluster in cluster order.
void replace_target_embeddings(WorldSnapshot& w, std::vector<EmbeddingSet> groups);

nlohmann::json world_to_json(const WorldSnapshot& w);
WorldSnapshot world_from_json(const nlohmann::json& j);

}  // namespace pta
