#include "doctest.h"
#include "support.hpp"

#include "pta/errors.hpp"
#include "pta/evalharness.hpp"

#include <algorithm>
#include <numeric>

using namespace pta;
using pta::test::vec;

namespace {

Embedding axis(int d, int k) {
  Embedding e = Embedding::Zero(d);
  e(k) = 1.0;
  return e;
}

std::vector<ClassificationOutcome> outcomes(int n, int success, int pre_and_success, int detected = 0) {
  std::vector<ClassificationOutcome> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& o = out[static_cast<std::size_t>(i)];
    o.target_class = 1;
    o.post_class = i < success ? 1 : 0;
    o.pre_class = i < pre_and_success ? 1 : 0;
    o.detected = i >= pre_and_success && i < pre_and_success + detected;
  }
  return out;
}

}  // namespace

TEST_CASE("classify examples") {
  const std::vector<EmbeddingSet> classes{EmbeddingSet({axis(4, 0)}), EmbeddingSet({axis(4, 1), axis(4, 2)}),
                                          EmbeddingSet({axis(4, 3)})};
  CHECK(classify(axis(4, 0), classes) == 0);
  CHECK(classify(axis(4, 2), classes) == 1);
  const std::vector<EmbeddingSet> tie{EmbeddingSet({axis(3, 2)}), EmbeddingSet({axis(3, 0)}),
                                      EmbeddingSet({axis(3, 2)}), EmbeddingSet({axis(3, 0)})};
  CHECK(classify(axis(3, 0), tie) == 1);
  CHECK_THROWS_AS(classify(axis(3, 0), std::vector<EmbeddingSet>{}), ConfigError);
  CHECK_THROWS_AS(classify(axis(3, 0), std::vector<EmbeddingSet>{EmbeddingSet()}), ConfigError);
}

TEST_CASE("classify matches an exhaustive scan") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<EmbeddingSet> classes;
    for (int c = 0; c < 3; ++c) classes.emplace_back(test::random_units(rng, 1 + rng.below(4), 5));
    const auto v = test::random_unit(rng, 5);
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < classes.size(); ++c)
      for (const auto& p : classes[c].members)
        if (cosine(v, p) > best) {
          best = cosine(v, p);
          arg = c;
        }
    CHECK(classify(v, classes) == arg);
  }
}

TEST_CASE("cls_asr examples") {
  CHECK(cls_asr(outcomes(10, 8, 2)) == doctest::Approx(60.0));
  CHECK(cls_asr(outcomes(10, 0, 0)) == 0.0);
  CHECK(cls_asr(outcomes(10, 10, 0)) == 100.0);
  CHECK_THROWS_AS(cls_asr(std::vector<ClassificationOutcome>{}), DomainError);
}

TEST_CASE("asrd examples") {
  const auto none = classification_report(outcomes(10, 6, 0, 0));
  CHECK(none.asrd == none.asr);
  CHECK(classification_report(outcomes(10, 6, 0, 6)).asrd == 0.0);
  const auto r = classification_report(outcomes(10, 6, 0, 3));
  CHECK(r.asr == doctest::Approx(60.0));
  CHECK(r.asrd == doctest::Approx(30.0));
  CHECK(r.n_detected == 3);
  std::vector<bool> s{true, true, false}, pre{false, false, false}, det{true, false, true};
  CHECK(asrd(s, pre, det) == doctest::Approx(100.0 / 3.0));
}

TEST_CASE("retrieve_topk examples") {
  Gallery g;
  g.items = {axis(3, 1), axis(3, 0), axis(3, 2)};
  CHECK(retrieve_topk(axis(3, 0), g, 1) == std::vector<std::size_t>{1});
  Gallery dup;
  dup.items = {axis(3, 2), axis(3, 0), axis(3, 0)};
  CHECK(retrieve_topk(axis(3, 0), dup, 2) == std::vector<std::size_t>{1, 2});
  CHECK_THROWS_AS(retrieve_topk(axis(3, 0), g, 4), ConfigError);
  CHECK_THROWS_AS(retrieve_topk(axis(3, 0), g, 0), ConfigError);
}

TEST_CASE("retrieve_topk matches a full sort") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    Gallery g;
    g.items = test::random_units(rng, 15, 6);
    g.injected = test::random_units(rng, 5, 6);
    const auto q = test::random_unit(rng, 6);
    std::vector<std::size_t> ids(20);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return cosine(q, g.at(a)) > cosine(q, g.at(b)); });
    const std::size_t K = 1 + rng.below(20);
    ids.resize(K);
    CHECK(retrieve_topk(q, g, K) == ids);
  }
}

TEST_CASE("rk_asr examples") {
  Gallery g;
  g.items = {axis(4, 0), axis(4, 1)};
  g.injected = {axis(4, 2)};
  g.injected_originals = {axis(4, 3)};
  CHECK(rk_asr(std::vector<Embedding>{axis(4, 2)}, g, 1) == 100.0);
  Gallery clean;
  clean.items = {axis(4, 0), axis(4, 1)};
  CHECK(rk_asr(std::vector<Embedding>{axis(4, 2)}, clean, 1) == 0.0);
  CHECK_THROWS_AS(rk_asr(std::vector<Embedding>{}, g, 1), DomainError);
}

TEST_CASE("rk_asr on a hand-enumerated 3-query, 5-item instance") {
  // Items 0..3 are benign, item 4 is the AE; its clean original sits on axis 3.
  Gallery g;
  g.items = {unit_normalize(vec({1, 0.2, 0, 0})), unit_normalize(vec({0, 1, 0.1, 0})),
             unit_normalize(vec({0, 0, 1, 0})), unit_normalize(vec({0.3, 0.3, 0.3, 1}))};
  g.injected = {unit_normalize(vec({1, 1, 0, 0}))};
  g.injected_originals = {unit_normalize(vec({0, 0, 0.1, 1}))};
  const std::vector<Embedding> q{unit_normalize(vec({1, 0.9, 0, 0})), unit_normalize(vec({0, 0, 0.2, 1})),
                                 unit_normalize(vec({0, 1, 0, 0}))};
  // K = 1: q0 -> AE (cos .997 vs item0 .79). q1 -> item 3 both before and after.
  // q2 -> item 1 (.995 vs AE .707). One fresh success out of three.
  CHECK(rk_asr(q, g, 1) == doctest::Approx(100.0 / 3.0));
  // K = 2: q2 also sees the AE second; q1's top-2 before attack holds the original (cos .999), so it is in A'.
  // After attack q1's top-2 are items 3 and 2; not a success. Fresh: q0, q2.
  CHECK(rk_asr(q, g, 2) == doctest::Approx(200.0 / 3.0));
}

TEST_CASE("rk_asr is monotone in K without pre-attack successes") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    Gallery g;
    g.items = test::random_units(rng, 10, 4);
    g.injected = test::random_units(rng, 2, 4);
    const auto q = test::random_units(rng, 6, 4);
    double prev = -1.0;
    for (std::size_t K = 1; K <= g.size(); ++K) {
      const double a = rk_asr(q, g, K);
      CHECK(a >= prev);
      prev = a;
    }
  }
}

TEST_CASE("rk_asr can shrink with K once originals enter the pre-attack set") {
  // The original reaches q's top-2 but not its top-1, so the K = 2 success is discounted.
  Gallery g;
  g.items = {axis(3, 0), axis(3, 1)};
  g.injected = {unit_normalize(vec({1, 0, 0.2}))};
  g.injected_originals = {unit_normalize(vec({0.8, 0, 1}))};
  const std::vector<Embedding> q{unit_normalize(vec({1, 0, 0.3}))};
  CHECK(rk_asr(q, g, 1) == 100.0);
  CHECK(rk_asr(q, g, 2) == 0.0);
}

TEST_CASE("asrd never exceeds asr") {
  Rng rng(3);
  DetectionConfig det;
  det.neighbors_k = 2;
  for (int trial = 0; trial < 40; ++trial) {
    Gallery g;
    g.items = test::random_units(rng, 10, 4);
    g.injected = test::random_units(rng, 2, 4);
    g.injected_originals = test::random_units(rng, 2, 4);
    const auto q = test::random_units(rng, 6, 4);
    const auto flags = detect_in_window(q, g, 5, det);
    const auto rep = retrieval_report(q, g, 3, flags);
    CHECK(rep.asrd <= rep.asr);
    CHECK(rep.asr <= 100.0);
  }
}

TEST_CASE("detect_in_window and detect_in_pool") {
  Rng rng(4);
  Gallery g;
  for (int i = 0; i < 30; ++i) g.items.push_back(unit_normalize(axis(6, 0) + 0.05 * test::gaussian(rng, 6)));
  g.injected = {axis(6, 5)};
  DetectionConfig det;
  // A query near the AE pulls it into the window, where it is the lone outlier.
  const std::vector<Embedding> q{unit_normalize(axis(6, 0) + axis(6, 5))};
  CHECK(detect_in_window(q, g, 20, det) == std::vector<bool>{true});
  // A window that misses the AE flags nothing.
  const std::vector<Embedding> q2{axis(6, 0)};
  CHECK(detect_in_window(q2, g, 5, det) == std::vector<bool>{false});

  CHECK(detect_in_pool(axis(6, 5), g.items, det));
  CHECK_FALSE(detect_in_pool(g.items[3], g.items, det));
  CHECK_THROWS_AS(detect_in_pool(axis(6, 5), std::vector<Embedding>{}, det), DomainError);
}

TEST_CASE("retrieval flags remove detected successes only") {
  Gallery g;
  g.items = {axis(3, 0), axis(3, 1)};
  g.injected = {axis(3, 2), unit_normalize(vec({1, 0, 0.5}))};
  const std::vector<Embedding> q{axis(3, 2), unit_normalize(vec({1, 0, 0.4}))};
  const auto f = retrieval_flags(q, g, 1, {true, false});
  CHECK(f.success == std::vector<bool>{true, true});
  CHECK(f.detected == std::vector<bool>{true, false});
  const auto rep = success_report(f);
  CHECK(rep.asr == 100.0);
  CHECK(rep.asrd == 50.0);
}

TEST_CASE("poisoning examples") {
  std::vector<Embedding> items, queries;
  for (int i = 0; i < 10; ++i) items.push_back(axis(12, i));
  queries = items;
  std::vector<std::size_t> truth(10);
  std::iota(truth.begin(), truth.end(), std::size_t{0});
  const auto none = poisoning_degradation(queries, truth, items, std::vector<Embedding>{}, 0.0);
  CHECK(none.recall_before == 100.0);
  CHECK(none.drop == 0.0);

  // Queries 0 and 1 lean toward two AEs, which then outrank their ground-truth items.
  queries[0] = unit_normalize(axis(12, 0) + 0.8 * axis(12, 10));
  queries[1] = unit_normalize(axis(12, 1) + 0.8 * axis(12, 11));
  const std::vector<Embedding> aes{unit_normalize(axis(12, 0) + axis(12, 10)),
                                   unit_normalize(axis(12, 1) + axis(12, 11))};
  const auto p = poisoning_degradation(queries, truth, items, aes, 0.2);
  CHECK(p.injected == 2);
  CHECK(p.recall_before == 100.0);
  CHECK(p.recall_after == 80.0);
  CHECK(p.drop == 20.0);
  CHECK_THROWS_AS(poisoning_degradation(queries, truth, items, aes, 0.5), ConfigError);
}

TEST_CASE("injection_count rounds up with a guard") {
  CHECK(injection_count(0.01, 800) == 8);
  CHECK(injection_count(0.1, 800) == 80);
  CHECK(injection_count(0.3, 10) == 3);
  CHECK(injection_count(0.0, 800) == 0);
  CHECK(injection_count(0.001, 800) == 1);
  CHECK_THROWS_AS(injection_count(-0.1, 10), ConfigError);
}

TEST_CASE("gallery bookkeeping") {
  Gallery g;
  g.items = {axis(3, 0), axis(3, 1), axis(3, 2)};
  g.injected = {axis(3, 0)};
  CHECK(g.size() == 4);
  CHECK(g.is_injected(3));
  CHECK_FALSE(g.is_injected(2));
  CHECK(g.injection_ratio() == 0.25);
  CHECK_THROWS_AS(g.at(4), LookupError);
  CHECK_THROWS_AS(g.with_originals(), PreconditionError);
  g.item_clusters = {0};
  CHECK_THROWS_AS(g.validate(), DomainError);
}

TEST_CASE("metric report JSON carries absent optionals as null") {
  const auto r = classification_report(outcomes(4, 2, 0));
  const auto j = r.to_json();
  CHECK(j["asr"] == 50.0);
  CHECK(j["recall_at_1"].is_null());
  CHECK(j["n_total"] == 4);
}
