#include "pta/synthworld.hpp"

#include "pta/errors.hpp"
#include "pta/rng.hpp"

#include <algorithm>
#include <cmath>

namespace pta {

namespace {

Vector json_to_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json vector_to_json(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

SourceEncoder::SourceEncoder(int input_dim, int hidden_dim, int embed_dim, std::uint64_t seed)
    : layer1_(hidden_dim, input_dim), bias1_(hidden_dim), layer2_(embed_dim, hidden_dim), seed_(seed) {
  Rng rng(derive_seed(seed, stream_id("encoder")));
  const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (int i = 0; i < hidden_dim; ++i)
    for (int j = 0; j < input_dim; ++j) layer1_(i, j) = s1 * rng.normal();
  for (int i = 0; i < hidden_dim; ++i) bias1_(i) = s1 * rng.normal();
  bias1_ -= 0.5 * layer1_.rowwise().sum();
  for (int i = 0; i < embed_dim; ++i)
    for (int j = 0; j < hidden_dim; ++j) layer2_(i, j) = s2 * rng.normal();
}

void SourceEncoder::check_input(const Vector& x, const char* op) const {
  if (x.size() != input_dim()) {
    throw DomainError(std::string(op) + ": input has dimension " + std::to_string(x.size()) + ", encoder expects " +
                      std::to_string(input_dim()));
  }
  if (!x.allFinite()) throw DomainError(std::string(op) + ": non-finite input");
}

Embedding SourceEncoder::encode(const Vector& x) const {
  check_input(x, "encode");
  const Vector z = layer2_ * (layer1_ * x + bias1_).array().tanh().matrix();
  const double n = z.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("encode: degenerate pre-normalization output");
  return z / n;
}

Vector SourceEncoder::encode_gradient(const Vector& x, const Embedding& upstream) const {
  check_input(x, "encode_gradient");
  if (upstream.size() != embed_dim()) {
    throw DomainError("encode_gradient: upstream has dimension " + std::to_string(upstream.size()) + ", expected " +
                      std::to_string(embed_dim()));
  }
  if (!upstream.allFinite()) throw DomainError("encode_gradient: non-finite upstream");

  const Vector t = (layer1_ * x + bias1_).array().tanh().matrix();
  const Vector z = layer2_ * t;
  const double n = z.norm();
  if (!(n > 0.0)) throw NumericError("encode_gradient: degenerate pre-normalization output");
  const Vector v = z / n;
  // Jacobian of z -> z/|z| is (I - v v^T) / |z|.
  const Vector gz = (upstream - v * v.dot(upstream)) / n;
  const Vector gt = layer2_.transpose() * gz;
  const Vector ga = (gt.array() * (1.0 - t.array().square())).matrix();
  return layer1_.transpose() * ga;
}

SourceEncoder build_encoder(int input_dim, int hidden_dim, int embed_dim, std::uint64_t seed) {
  if (input_dim < 2 || hidden_dim < 2 || embed_dim < 2) {
    throw ConfigError("build_encoder: all dimensions must be >= 2 (got " + std::to_string(input_dim) + ", " +
                      std::to_string(hidden_dim) + ", " + std::to_string(embed_dim) + ")");
  }
  return SourceEncoder(input_dim, hidden_dim, embed_dim, seed);
}

void ClusterSpec::validate(int embed_dim) const {
  if (concept_direction.size() != embed_dim) throw ConfigError("cluster spec: concept_direction has wrong dimension");
  if (!is_unit(concept_direction, 1e-9)) throw ConfigError("cluster spec: concept_direction must be unit norm");
  if (modality_offset.size() != embed_dim) throw ConfigError("cluster spec: modality_offset has wrong dimension");
  if (!modality_offset.allFinite()) throw ConfigError("cluster spec: modality_offset must be finite");
  if (!(source_dispersion >= 0.0) || !(target_dispersion >= 0.0))
    throw ConfigError("cluster spec: dispersions must be >= 0");
  if (count < 2 || effective_source_count() < 2)
    throw ConfigError("cluster spec: count must be >= 2 so the cluster can be split into halves");
}

void WorldSnapshot::require_cluster(std::size_t c) const {
  if (c >= clusters.size()) {
    throw LookupError("unknown cluster id " + std::to_string(c) + " (world has " + std::to_string(clusters.size()) +
                      " clusters)");
  }
}

Vector cluster_anchor(std::uint64_t seed, std::size_t cluster, int input_dim) {
  Rng rng(derive_seed(seed, stream_id("anchor", cluster)));
  Vector a(input_dim);
  for (int i = 0; i < input_dim; ++i) a(i) = rng.uniform(0.25, 0.75);
  return a;
}

WorldSnapshot sample_world(std::vector<ClusterSpec> specs, const WorldDims& dims, std::uint64_t seed) {
  if (specs.empty()) throw ConfigError("sample_world: at least one cluster is required");
  SourceEncoder enc = build_encoder(dims, seed);
  for (const auto& s : specs) s.validate(dims.embed_dim);

  WorldSnapshot w{dims, seed, std::move(enc), std::move(specs), {}, {}};
  const double noise_scale = 1.0 / std::sqrt(static_cast<double>(dims.embed_dim));
  for (std::size_t c = 0; c < w.clusters.size(); ++c) {
    const ClusterSpec& spec = w.clusters[c];
    const Vector anchor = cluster_anchor(seed, c, dims.input_dim);

    Rng src_rng(derive_seed(seed, stream_id("source", c)));
    std::vector<Vector> inputs;
    inputs.reserve(static_cast<std::size_t>(spec.effective_source_count()));
    for (int k = 0; k < spec.effective_source_count(); ++k) {
      Vector x(dims.input_dim);
      for (int i = 0; i < dims.input_dim; ++i)
        x(i) = std::clamp(anchor(i) + spec.source_dispersion * src_rng.normal(), 0.0, 1.0);
      inputs.push_back(std::move(x));
    }
    w.source_inputs.push_back(std::move(inputs));

    Rng tgt_rng(derive_seed(seed, stream_id("target", c)));
    EmbeddingSet targets;
    targets.label = "cluster-" + std::to_string(c);
    const Vector centre = spec.concept_direction + spec.modality_offset;
    for (int k = 0; k < spec.count; ++k) {
      Vector t = centre;
      for (int i = 0; i < dims.embed_dim; ++i) t(i) += spec.target_dispersion * noise_scale * tgt_rng.normal();
      targets.members.push_back(unit_normalize(t));
    }
    w.target_embeddings.push_back(std::move(targets));
  }
  return w;
}

std::vector<std::size_t> proxy_indices(std::size_t count) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; i += 2) out.push_back(i);
  return out;
}

std::vector<std::size_t> true_target_indices(std::size_t count) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < count; i += 2) out.push_back(i);
  return out;
}

EmbeddingSet proxy_half(const EmbeddingSet& s) {
  EmbeddingSet out(even_half(s.members), s.label + "/proxy");
  if (!s.tags.empty()) out.tags = even_half(s.tags);
  return out;
}

EmbeddingSet true_target_half(const EmbeddingSet& s) {
  EmbeddingSet out(odd_half(s.members), s.label + "/true");
  if (!s.tags.empty()) out.tags = odd_half(s.tags);
  return out;
}

std::vector<EmbeddingSet> source_embeddings(const WorldSnapshot& w) {
  std::vector<EmbeddingSet> out;
  out.reserve(w.cluster_count());
  for (std::size_t c = 0; c < w.cluster_count(); ++c) {
    EmbeddingSet s;
    s.label = "cluster-" + std::to_string(c);
    s.members.reserve(w.source_inputs[c].size());
    for (const auto& x : w.source_inputs[c]) s.members.push_back(w.encoder.encode(x));
    out.push_back(std::move(s));
  }
  return out;
}

GapStats empirical_gap_stats(const WorldSnapshot& w, std::size_t cluster) {
  w.require_cluster(cluster);
  std::vector<Embedding> src;
  src.reserve(w.source_inputs[cluster].size());
  for (const auto& x : w.source_inputs[cluster]) src.push_back(w.encoder.encode(x));
  const auto& tgt = w.target_embeddings[cluster].members;
  GapStats g;
  g.delta_norm = (mean_embedding(tgt) - mean_embedding(src)).norm();
  g.sigma_S = variance_trace(src);
  g.sigma_T = variance_trace(tgt);
  return g;
}

Preset parse_preset(std::string_view name) {
  if (name == "classification") return Preset::classification;
  if (name == "retrieval") return Preset::retrieval;
  throw ConfigError("unknown world preset '" + std::string(name) + "' (expected classification|retrieval)");
}

std::string_view to_string(Preset p) {
  return p == Preset::classification ? "classification" : "retrieval";
}

std::vector<ClusterSpec> preset_specs(Preset p, const WorldDims& dims, std::uint64_t seed, int clusters) {
  if (clusters < 1) throw ConfigError("preset_specs: at least one cluster is required");
  const SourceEncoder enc = build_encoder(dims, seed);

  // Calibrated against the covariance-trace reference magnitudes; see the header.
  double src_disp = 0.17, tgt_disp = 2.45, offset_norm = 1.8;
  if (p == Preset::classification) {
    src_disp = 0.09;
    tgt_disp = 0.65;
    offset_norm = 1.5;
  }

  Rng rng(derive_seed(seed, stream_id("modality-offset")));
  Vector offset(dims.embed_dim);
  for (int i = 0; i < dims.embed_dim; ++i) offset(i) = rng.normal();
  offset = unit_normalize(offset) * offset_norm;

  std::vector<ClusterSpec> specs;
  for (int c = 0; c < clusters; ++c) {
    ClusterSpec s;
    s.concept_direction = enc.encode(cluster_anchor(seed, static_cast<std::size_t>(c), dims.input_dim));
    s.source_dispersion = src_disp;
    s.target_dispersion = tgt_disp;
    s.modality_offset = offset;
    s.count = 100;
    s.source_count = 200;
    specs.push_back(std::move(s));
  }
  return specs;
}

EmbeddingSet paired_queries(const WorldSnapshot& w, std::span<const Embedding> items,
                            std::span<const std::size_t> item_clusters, double dispersion, std::uint64_t seed) {
  if (items.size() != item_clusters.size()) throw DomainError("paired_queries: one cluster id per item is required");
  if (!(dispersion >= 0.0)) throw ConfigError("paired_queries: dispersion must be >= 0");
  Rng rng(derive_seed(seed, stream_id("queries")));
  const double scale = dispersion / std::sqrt(static_cast<double>(w.dims.embed_dim));
  EmbeddingSet out;
  out.label = "paired-queries";
  for (std::size_t i = 0; i < items.size(); ++i) {
    w.require_cluster(item_clusters[i]);
    Vector q = items[i] + w.clusters[item_clusters[i]].modality_offset;
    for (Eigen::Index k = 0; k < q.size(); ++k) q(k) += scale * rng.normal();
    out.members.push_back(unit_normalize(q));
  }
  return out;
}

void replace_target_embeddings(WorldSnapshot& w, std::vector<EmbeddingSet> groups) {
  if (groups.size() != w.cluster_count()) {
    throw ConfigError("replace_target_embeddings: got " + std::to_string(groups.size()) + " groups for " +
                      std::to_string(w.cluster_count()) + " clusters");
  }
  for (std::size_t c = 0; c < groups.size(); ++c) {
    groups[c].validate();
    if (groups[c].dim() != w.dims.embed_dim)
      throw ConfigError("replace_target_embeddings: group " + std::to_string(c) + " has wrong dimension");
    if (groups[c].size() < 2) throw ConfigError("replace_target_embeddings: each group needs >= 2 embeddings to split");
    w.clusters[c].count = static_cast<int>(groups[c].size());
  }
  w.target_embeddings = std::move(groups);
}

nlohmann::json world_to_json(const WorldSnapshot& w) {
  nlohmann::json j;
  j["dims"] = {{"input_dim", w.dims.input_dim}, {"hidden_dim", w.dims.hidden_dim}, {"embed_dim", w.dims.embed_dim}};
  j["seed"] = w.seed;
  j["clusters"] = nlohmann::json::array();
  for (const auto& c : w.clusters) {
    j["clusters"].push_back({{"concept_direction", vector_to_json(c.concept_direction)},
                             {"source_dispersion", c.source_dispersion},
                             {"target_dispersion", c.target_dispersion},
                             {"modality_offset", vector_to_json(c.modality_offset)},
                             {"count", c.count},
                             {"source_count", c.effective_source_count()}});
  }
  j["source_inputs"] = nlohmann::json::array();
  for (const auto& cl : w.source_inputs) {
    auto arr = nlohmann::json::array();
    for (const auto& x : cl) arr.push_back(vector_to_json(x));
    j["source_inputs"].push_back(std::move(arr));
  }
  j["target_embeddings"] = nlohmann::json::array();
  for (const auto& cl : w.target_embeddings) {
    auto arr = nlohmann::json::array();
    for (const auto& e : cl.members) arr.push_back(vector_to_json(e));
    j["target_embeddings"].push_back(std::move(arr));
  }
  return j;
}

WorldSnapshot world_from_json(const nlohmann::json& j) {
  try {
    WorldDims dims{j.at("dims").at("input_dim").get<int>(), j.at("dims").at("hidden_dim").get<int>(),
                   j.at("dims").at("embed_dim").get<int>()};
    const auto seed = j.at("seed").get<std::uint64_t>();
    std::vector<ClusterSpec> specs;
    for (const auto& c : j.at("clusters")) {
      ClusterSpec s;
      s.concept_direction = json_to_vector(c.at("concept_direction"));
      s.source_dispersion = c.at("source_dispersion").get<double>();
      s.target_dispersion = c.at("target_dispersion").get<double>();
      s.modality_offset = json_to_vector(c.at("modality_offset"));
      s.count = c.at("count").get<int>();
      s.source_count = c.value("source_count", 0);
      s.validate(dims.embed_dim);
      specs.push_back(std::move(s));
    }
    WorldSnapshot w{dims, seed, build_encoder(dims, seed), std::move(specs), {}, {}};
    for (const auto& cl : j.at("source_inputs")) {
      std::vector<Vector> inputs;
      for (const auto& x : cl) {
        Vector v = json_to_vector(x);
        if (v.size() != dims.input_dim) throw ParseError(0, "snapshot: source input has wrong dimension");
        if ((v.array() < 0.0).any() || (v.array() > 1.0).any())
          throw ParseError(0, "snapshot: source input outside [0,1]");
        inputs.push_back(std::move(v));
      }
      w.source_inputs.push_back(std::move(inputs));
    }
    std::size_t c = 0;
    for (const auto& cl : j.at("target_embeddings")) {
      EmbeddingSet s;
      s.label = "cluster-" + std::to_string(c++);
      for (const auto& e : cl) s.members.push_back(json_to_vector(e));
      s.validate();
      if (s.dim() != dims.embed_dim) throw ParseError(0, "snapshot: target embedding has wrong dimension");
      w.target_embeddings.push_back(std::move(s));
    }
    if (w.source_inputs.size() != w.clusters.size() || w.target_embeddings.size() != w.clusters.size())
      throw ParseError(0, "snapshot: per-cluster arrays do not match the cluster list");
    return w;
  } catch (const ParseError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("snapshot: ") + e.what());
  } catch (const Error& e) {
    throw ParseError(0, std::string("snapshot: ") + e.what());
  }
}

}  // namespace pta
