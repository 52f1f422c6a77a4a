#include "doctest.h"
#include "support.hpp"

#include "pta/errors.hpp"
#include "pta/synthworld.hpp"

#include <cmath>
#include <set>

using namespace pta;

namespace {

const WorldDims kSmall{48, 16, 8};

ClusterSpec spec(const Embedding& dir, double src_sd, double tgt_sd, const Embedding& offset, int count = 10) {
  ClusterSpec s;
  s.concept_direction = dir;
  s.source_dispersion = src_sd;
  s.target_dispersion = tgt_sd;
  s.modality_offset = offset;
  s.count = count;
  return s;
}

Embedding axis(int d, int k) {
  Embedding e = Embedding::Zero(d);
  e(k) = 1.0;
  return e;
}

}  // namespace

TEST_CASE("build_encoder is deterministic and seed-sensitive") {
  const auto a = build_encoder(8, 16, 4, 1);
  const auto b = build_encoder(8, 16, 4, 1);
  const auto c = build_encoder(8, 16, 4, 2);
  CHECK(a.layer1_weights() == b.layer1_weights());
  CHECK(a.layer1_bias() == b.layer1_bias());
  CHECK(a.layer2_weights() == b.layer2_weights());
  CHECK((a.layer1_weights() - c.layer1_weights()).cwiseAbs().maxCoeff() > 0.0);
  CHECK(a.input_dim() == 8);
  CHECK(a.hidden_dim() == 16);
  CHECK(a.embed_dim() == 4);
}

TEST_CASE("build_encoder rejects tiny dimensions") {
  CHECK_THROWS_AS(build_encoder(1, 16, 4, 0), ConfigError);
  CHECK_THROWS_AS(build_encoder(8, 1, 4, 0), ConfigError);
  CHECK_THROWS_AS(build_encoder(8, 16, 1, 0), ConfigError);
}

TEST_CASE("encode is unit-norm, deterministic and continuous") {
  const auto enc = build_encoder(8, 16, 4, 1);
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const auto x = test::random_box(rng, 8);
    const auto v = enc.encode(x);
    CHECK(std::abs(v.norm() - 1.0) < 1e-9);
    CHECK(enc.encode(x) == v);
    Vector dx = test::gaussian(rng, 8);
    dx *= 1e-6 / dx.norm();
    CHECK((enc.encode(x + dx) - v).norm() < 1e-4);
  }
  CHECK_THROWS_AS(enc.encode(Vector::Zero(7)), DomainError);
  Vector bad = Vector::Constant(8, 0.5);
  bad(3) = std::nan("");
  CHECK_THROWS_AS(enc.encode(bad), DomainError);
}

TEST_CASE("encode_gradient matches central finite differences") {
  Rng rng(5);
  const auto enc = build_encoder(kSmall, 77);
  for (int probe = 0; probe < 100; ++probe) {
    const auto x = test::random_box(rng, kSmall.input_dim, 0.05, 0.95);
    const auto u = test::gaussian(rng, kSmall.embed_dim);
    const auto g = enc.encode_gradient(x, u);
    Vector fd(x.size());
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Vector xp = x, xm = x;
      xp(i) += h;
      xm(i) -= h;
      fd(i) = (u.dot(enc.encode(xp)) - u.dot(enc.encode(xm))) / (2 * h);
    }
    CHECK((g - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-4);
  }
}

TEST_CASE("encode_gradient is linear in the upstream slot") {
  Rng rng(6);
  const auto enc = build_encoder(kSmall, 3);
  const auto x = test::random_box(rng, kSmall.input_dim);
  const auto u1 = test::gaussian(rng, kSmall.embed_dim);
  const auto u2 = test::gaussian(rng, kSmall.embed_dim);
  CHECK(enc.encode_gradient(x, Vector::Zero(kSmall.embed_dim)).norm() == 0.0);
  const Vector sum = u1 + u2;
  CHECK((enc.encode_gradient(x, sum) - enc.encode_gradient(x, u1) - enc.encode_gradient(x, u2)).norm() < 1e-9);
  CHECK_THROWS_AS(enc.encode_gradient(x, Vector::Zero(3)), DomainError);
  Vector bad = u1;
  bad(0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(enc.encode_gradient(x, bad), DomainError);
}

TEST_CASE("sample_world with zero target dispersion gives identical targets") {
  const auto dir = axis(kSmall.embed_dim, 0);
  const auto off = Embedding::Zero(kSmall.embed_dim);
  const auto w = sample_world({spec(dir, 0.1, 0.0, off)}, kSmall, 9);
  const auto& t = w.target_embeddings[0];
  for (const auto& e : t.members) CHECK((e - t[0]).norm() == 0.0);
}

TEST_CASE("sample_world keeps inputs in the box and embeddings on the sphere") {
  Rng rng(1);
  const auto w = sample_world({spec(test::random_unit(rng, 8), 0.5, 0.3, test::gaussian(rng, 8), 12),
                               spec(test::random_unit(rng, 8), 2.0, 1.0, test::gaussian(rng, 8), 12)},
                              kSmall, 4);
  for (const auto& cluster : w.source_inputs) {
    for (const auto& x : cluster) {
      CHECK(x.minCoeff() >= 0.0);
      CHECK(x.maxCoeff() <= 1.0);
    }
  }
  for (const auto& s : source_embeddings(w))
    for (const auto& e : s.members) CHECK(std::abs(e.norm() - 1.0) < 1e-9);
  for (const auto& s : w.target_embeddings)
    for (const auto& e : s.members) CHECK(std::abs(e.norm() - 1.0) < 1e-9);
}

TEST_CASE("sample_world is bit-reproducible") {
  Rng rng(2);
  std::vector<ClusterSpec> specs{spec(test::random_unit(rng, 8), 0.2, 0.4, test::gaussian(rng, 8))};
  const auto a = sample_world(specs, kSmall, 17);
  const auto b = sample_world(specs, kSmall, 17);
  CHECK(world_to_json(a).dump() == world_to_json(b).dump());
}

TEST_CASE("proxy and true-target halves partition the cluster") {
  for (std::size_t n : {2u, 7u, 10u, 101u}) {
    const auto p = proxy_indices(n);
    const auto t = true_target_indices(n);
    std::set<std::size_t> all(p.begin(), p.end());
    for (auto i : t) CHECK(all.insert(i).second);
    CHECK(all.size() == n);
    CHECK(*all.rbegin() == n - 1);
  }
}

TEST_CASE("sample_world rejects clusters that cannot be split") {
  CHECK_THROWS_AS(sample_world({spec(axis(8, 0), 0.1, 0.1, Embedding::Zero(8), 1)}, kSmall, 0), ConfigError);
  CHECK_THROWS_AS(sample_world({}, kSmall, 0), ConfigError);
  CHECK_THROWS_AS(sample_world({spec(Embedding::Constant(8, 1.0), 0.1, 0.1, Embedding::Zero(8))}, kSmall, 0),
                  ConfigError);
}

TEST_CASE("empirical_gap_stats on degenerate and offset worlds") {
  const auto dir = axis(8, 1);
  const auto off = Embedding::Zero(8);
  const auto w = sample_world({spec(dir, 0.0, 0.0, off)}, kSmall, 3);
  const auto g = empirical_gap_stats(w, 0);
  CHECK(g.sigma_S == doctest::Approx(0.0).epsilon(1e-20));
  CHECK(g.sigma_T == doctest::Approx(0.0).epsilon(1e-20));
  // With no offset and no noise the gap is the encoder's own geometry.
  const auto src = source_embeddings(w)[0];
  CHECK(g.delta_norm == doctest::Approx((dir - mean_embedding(src)).norm()).epsilon(1e-12));
  CHECK_THROWS_AS(empirical_gap_stats(w, 1), LookupError);
}

TEST_CASE("presets land near the reference dispersion magnitudes") {
  for (auto [preset, sigma_T, sigma_S] :
       {std::tuple{Preset::classification, 0.1107, 0.2753}, std::tuple{Preset::retrieval, 0.5868, 0.5706}}) {
    double st = 0.0, ss = 0.0;
    const int seeds = 3;
    for (int s = 0; s < seeds; ++s) {
      const auto w = make_preset_world(preset, static_cast<std::uint64_t>(s));
      for (std::size_t c = 0; c < w.cluster_count(); ++c) {
        const auto g = empirical_gap_stats(w, c);
        st += g.sigma_T;
        ss += g.sigma_S;
      }
    }
    const double n = seeds * 8.0;
    CAPTURE(to_string(preset));
    CHECK(st / n == doctest::Approx(sigma_T).epsilon(0.25));
    CHECK(ss / n == doctest::Approx(sigma_S).epsilon(0.25));
  }
}

TEST_CASE("larger target dispersion increases sigma_T (sign test over seeds)") {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng(seed);
    const auto dir = test::random_unit(rng, 8);
    const auto off = test::gaussian(rng, 8);
    const auto lo = sample_world({spec(dir, 0.1, 0.3, off, 40)}, kSmall, seed);
    const auto hi = sample_world({spec(dir, 0.1, 0.6, off, 40)}, kSmall, seed);
    wins += empirical_gap_stats(hi, 0).sigma_T > empirical_gap_stats(lo, 0).sigma_T;
  }
  // P(>= 10 of 12 | p = 1/2) < 0.02.
  CHECK(wins >= 10);
}

TEST_CASE("world JSON round-trip") {
  const auto w = make_preset_world(Preset::classification, 5, kSmall, 3);
  const auto j = world_to_json(w);
  const auto back = world_from_json(j);
  CHECK(world_to_json(back).dump() == j.dump());
  CHECK(back.encoder.layer2_weights() == w.encoder.layer2_weights());
  auto broken = j;
  broken["target_embeddings"][0][0] = {1.0, 2.0};
  CHECK_THROWS_AS(world_from_json(broken), ParseError);
  CHECK_THROWS_AS(world_from_json(nlohmann::json::object()), ParseError);
}

TEST_CASE("replace_target_embeddings swaps in external groups") {
  auto w = make_preset_world(Preset::retrieval, 1, kSmall, 2);
  Rng rng(8);
  std::vector<EmbeddingSet> groups{EmbeddingSet(test::random_units(rng, 4, 8), "a"),
                                   EmbeddingSet(test::random_units(rng, 6, 8), "b")};
  replace_target_embeddings(w, groups);
  CHECK(w.target_embeddings[1].size() == 6);
  CHECK(w.target_embeddings[0][2] == groups[0][2]);
  CHECK_THROWS_AS(replace_target_embeddings(w, {groups[0]}), ConfigError);
}

TEST_CASE("paired_queries are unit-norm and seed-deterministic") {
  const auto w = make_preset_world(Preset::retrieval, 2, kSmall, 3);
  const auto src = source_embeddings(w);
  std::vector<Embedding> items{src[0][1], src[1][1], src[2][1]};
  std::vector<std::size_t> clusters{0, 1, 2};
  const auto a = paired_queries(w, items, clusters, 0.8, 4);
  const auto b = paired_queries(w, items, clusters, 0.8, 4);
  CHECK(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i] == b[i]);
    CHECK(std::abs(a[i].norm() - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(paired_queries(w, items, std::vector<std::size_t>{0}, 0.8, 4), DomainError);
  CHECK_THROWS_AS(paired_queries(w, items, clusters, -1.0, 4), ConfigError);
}

TEST_CASE("parse_preset") {
  CHECK(parse_preset("classification") == Preset::classification);
  CHECK(parse_preset("retrieval") == Preset::retrieval);
  CHECK_THROWS_AS(parse_preset("nope"), ConfigError);
}
