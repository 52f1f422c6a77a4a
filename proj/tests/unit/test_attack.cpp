#include "doctest.h"
#include "support.hpp"

#include "pta/attack.hpp"
#include "pta/errors.hpp"
#include "pta/synthworld.hpp"

#include <algorithm>
#include <cmath>

using namespace pta;
using pta::test::vec;

namespace {

const WorldDims kSmall{48, 16, 8};

ProxySet proxies(std::vector<Embedding> target, std::vector<Embedding> source = {}) {
  ProxySet p;
  p.target_proxies = EmbeddingSet(std::move(target));
  p.source_proxies = EmbeddingSet(std::move(source));
  return p;
}

Goal random_goal(Rng& rng, Objective kind, int d) {
  switch (kind) {
    case Objective::pta:
      return Goal::pta(proxies(test::random_units(rng, 5, d), test::random_units(rng, 3, d)));
    case Objective::illusion:
      return Goal::illusion(test::random_unit(rng, d));
    case Objective::samemodal:
      return Goal::samemodal(test::random_unit(rng, d));
  }
  return {};
}

bool within_constraints(const Vector& x, const Vector& x0, double eps) {
  return (x - x0).cwiseAbs().maxCoeff() <= eps + 1e-9 && x.minCoeff() >= 0.0 && x.maxCoeff() <= 1.0;
}

}  // namespace

TEST_CASE("loss_G examples") {
  const auto e0 = vec({1, 0}), e1 = vec({0, 1});
  CHECK(loss_G(e0, proxies({e0})) == doctest::Approx(0.0));
  CHECK(loss_G(e0, proxies({e1, vec({0, -1})})) == doctest::Approx(1.0));
  CHECK(loss_G(e0, proxies({e0, e1})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(loss_G(e0, ProxySet{}), DomainError);
}

TEST_CASE("loss_D examples") {
  const auto e0 = vec({1, 0});
  CHECK(loss_D(e0, proxies({e0}, {e0, e0})) == doctest::Approx(0.0));
  CHECK(loss_D(e0, proxies({e0}, {vec({-1, 0})})) == doctest::Approx(2.0));
  // Distances 1 and 3 from the origin.
  CHECK(loss_D(vec({0, 0}), proxies({e0}, {vec({1, 0}), vec({0, 3})})) == doctest::Approx(2.0));
  CHECK_THROWS_AS(loss_D(e0, proxies({e0})), DomainError);
}

TEST_CASE("pta_objective examples") {
  Rng rng(1);
  const auto v = test::random_unit(rng, 6);
  const auto p = proxies(test::random_units(rng, 4, 6), test::random_units(rng, 3, 6));
  CHECK(pta_objective(v, p, 0.0) == loss_G(v, p));
  // Both losses 0.5: v between two target proxies at cosines {1, 0}, source proxies at distance 0.5.
  const auto e0 = vec({1, 0}), e1 = vec({0, 1});
  const auto q = proxies({e0, e1}, {vec({1.5, 0})});
  CHECK(pta_objective(e0, q, 1.0) == doctest::Approx(1.0));
  const auto t = test::random_unit(rng, 6);
  CHECK(pta_objective(v, proxies({t}), 0.0) == doctest::Approx(illusion_objective(v, t)).epsilon(1e-15));
  CHECK_THROWS_AS(pta_objective(v, proxies({t}), 0.5), ConfigError);
  CHECK_THROWS_AS(pta_objective(v, p, -1.0), ConfigError);
}

TEST_CASE("illusion and same-modal objective examples") {
  const auto t = vec({0.6, 0.8});
  CHECK(illusion_objective(t, t) == doctest::Approx(0.0));
  CHECK(illusion_objective(vec({-0.8, 0.6}), t) == doctest::Approx(1.0));
  CHECK(illusion_objective(-t, t) == doctest::Approx(2.0));
  CHECK(samemodal_objective(t, t) == 0.0);
  CHECK(samemodal_objective(-t, t) == doctest::Approx(2.0));
}

TEST_CASE("objective properties") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const int d = 2 + static_cast<int>(rng.below(20));
    const auto v = test::random_unit(rng, d);
    auto tp = test::random_units(rng, 1 + rng.below(6), d);
    auto sp = test::random_units(rng, 1 + rng.below(6), d);
    const auto p = proxies(tp, sp);
    const double a = rng.uniform(0.0, 3.0);
    CHECK(std::abs(pta_objective(v, p, a) - pta_objective(v, p, 0.0) - a * loss_D(v, p)) < 1e-12);
    CHECK(loss_G(v, p) >= 0.0);
    CHECK(loss_G(v, p) <= 2.0);
    CHECK(loss_D(v, p) >= 0.0);
    CHECK(loss_D(v, p) <= 2.0 + 1e-12);
    std::reverse(tp.begin(), tp.end());
    std::rotate(sp.begin(), sp.begin() + 1, sp.end());
    CHECK(std::abs(pta_objective(v, proxies(tp, sp), a) - pta_objective(v, p, a)) < 1e-12);
  }
}

TEST_CASE("objective gradients in embedding space match finite differences") {
  Rng rng(3);
  for (auto kind : {Objective::pta, Objective::illusion, Objective::samemodal}) {
    for (int probe = 0; probe < 30; ++probe) {
      const auto goal = random_goal(rng, kind, 8);
      const Embedding v = test::gaussian(rng, 8);
      const double alpha = 0.7;
      const auto g = objective_gradient(goal, v, alpha);
      Vector fd(8);
      for (int i = 0; i < 8; ++i) {
        Vector vp = v, vm = v;
        vp(i) += 1e-5;
        vm(i) -= 1e-5;
        fd(i) = (objective_value(goal, vp, alpha) - objective_value(goal, vm, alpha)) / 2e-5;
      }
      CAPTURE(to_string(kind));
      CHECK((g - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-4);
    }
  }
}

TEST_CASE("input gradients through the encoder match finite differences") {
  Rng rng(4);
  const auto enc = build_encoder(kSmall, 21);
  for (auto kind : {Objective::pta, Objective::illusion, Objective::samemodal}) {
    for (int probe = 0; probe < 50; ++probe) {
      const auto goal = random_goal(rng, kind, kSmall.embed_dim);
      const auto x = test::random_box(rng, kSmall.input_dim, 0.05, 0.95);
      const double alpha = 0.4;
      const auto g = input_gradient(enc, x, goal, alpha);
      Vector fd(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp(i) += 1e-5;
        xm(i) -= 1e-5;
        fd(i) = (input_objective(enc, xp, goal, alpha) - input_objective(enc, xm, goal, alpha)) / 2e-5;
      }
      CAPTURE(to_string(kind));
      CHECK((g - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-4);
    }
  }
}

TEST_CASE("pgd with zero iterations returns x0") {
  Rng rng(5);
  const auto enc = build_encoder(kSmall, 1);
  const auto x0 = test::random_box(rng, kSmall.input_dim);
  AttackConfig cfg;
  cfg.iterations = 0;
  const auto r = run_pgd(enc, x0, random_goal(rng, Objective::illusion, kSmall.embed_dim), cfg);
  CHECK(r.adversarial_input == x0);
  CHECK(r.loss_trace.size() == 1);
}

TEST_CASE("pgd one signed step on a linear objective") {
  Rng rng(6);
  const auto x0 = test::random_box(rng, 20);
  const auto g = test::gaussian(rng, 20);
  AttackConfig cfg;
  cfg.iterations = 1;
  cfg.epsilon = 0.1;
  cfg.step_size = 0.1;
  const auto out = pgd_minimize(x0, [&](const Vector& x) { return g.dot(x); }, [&](const Vector&) { return g; }, cfg);
  Vector expect(20);
  for (int i = 0; i < 20; ++i) expect(i) = std::clamp(x0(i) - 0.1 * (g(i) > 0 ? 1.0 : -1.0), 0.0, 1.0);
  CHECK((out.best - expect).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(out.trace.size() == 2);
}

TEST_CASE("pgd respects constraints and never reports worse than x0") {
  Rng rng(7);
  const auto enc = build_encoder(kSmall, 2);
  for (int run = 0; run < 30; ++run) {
    const auto x0 = test::random_box(rng, kSmall.input_dim);
    AttackConfig cfg;
    cfg.iterations = 20;
    cfg.alpha = 0.3;
    const auto goal = random_goal(rng, static_cast<Objective>(run % 3), kSmall.embed_dim);
    const auto r = run_pgd(enc, x0, goal, cfg);
    CHECK(within_constraints(r.adversarial_input, x0, cfg.epsilon));
    CHECK(input_objective(enc, r.adversarial_input, goal, cfg.alpha) <= r.loss_trace.front());
    CHECK(r.best_loss() == doctest::Approx(input_objective(enc, r.adversarial_input, goal, cfg.alpha)));
  }
}

TEST_CASE("pgd rejects bad configs and starts") {
  const auto enc = build_encoder(kSmall, 2);
  const auto goal = Goal::illusion(unit_normalize(Vector::Ones(kSmall.embed_dim)));
  AttackConfig cfg;
  cfg.step_size = 2 * cfg.epsilon;
  CHECK_THROWS_AS(run_pgd(enc, Vector::Constant(kSmall.input_dim, 0.5), goal, cfg), ConfigError);
  CHECK_THROWS_AS(run_pgd(enc, Vector::Constant(kSmall.input_dim, 1.5), goal, AttackConfig{}), DomainError);
  AttackConfig alpha_cfg;
  alpha_cfg.alpha = 0.5;
  Rng rng(0);
  CHECK_THROWS_AS(run_pgd(enc, Vector::Constant(kSmall.input_dim, 0.5),
                          Goal::pta(proxies(test::random_units(rng, 2, kSmall.embed_dim))), alpha_cfg),
                  ConfigError);
  AttackConfig nan_cfg;
  const Vector x0 = Vector::Constant(4, 0.5);
  CHECK_THROWS_AS(pgd_minimize(
                      x0, [](const Vector&) { return 0.0; },
                      [](const Vector& x) { return Vector::Constant(x.size(), std::nan("")); }, nan_cfg),
                  NumericError);
}

TEST_CASE("square p schedule halves at the fixed budget fractions") {
  CHECK(square_p_schedule(0.8, 0, 10000) == 0.8);
  CHECK(square_p_schedule(0.8, 10, 10000) == 0.8);
  CHECK(square_p_schedule(0.8, 11, 10000) == 0.4);
  CHECK(square_p_schedule(0.8, 51, 10000) == 0.2);
  CHECK(square_p_schedule(0.8, 201, 10000) == 0.1);
  CHECK(square_p_schedule(0.8, 1001, 10000) == 0.05);
  CHECK(square_p_schedule(0.8, 2001, 10000) == 0.025);
  CHECK(square_p_schedule(0.8, 5001, 10000) == 0.0125);
  CHECK(square_p_schedule(0.8, 9999, 10000) == 0.0125);
}

TEST_CASE("square attack: monotone trace, constraints, budget, determinism") {
  Rng rng(8);
  const auto enc = build_encoder(kSmall, 3);
  for (int run = 0; run < 20; ++run) {
    const auto x0 = test::random_box(rng, kSmall.input_dim);
    auto cfg = square_defaults();
    cfg.query_budget = 300;
    cfg.seed = static_cast<std::uint64_t>(run);
    cfg.alpha = 0.2;
    const auto goal = random_goal(rng, static_cast<Objective>(run % 3), kSmall.embed_dim);
    const auto r = run_square(enc, x0, goal, cfg);
    CHECK(within_constraints(r.adversarial_input, x0, cfg.epsilon));
    CHECK(r.queries_used <= cfg.query_budget);
    CHECK(static_cast<int>(r.loss_trace.size()) == r.queries_used);
    CHECK(std::is_sorted(r.loss_trace.rbegin(), r.loss_trace.rend()));
    CHECK(r.loss_trace.back() == doctest::Approx(input_objective(enc, r.adversarial_input, goal, cfg.alpha)));
    const auto again = run_square(enc, x0, goal, cfg);
    CHECK(again.adversarial_input == r.adversarial_input);
  }
}

TEST_CASE("square attack with a budget of one query returns x0") {
  const auto enc = build_encoder(kSmall, 3);
  auto cfg = square_defaults();
  cfg.query_budget = 1;
  const Vector x0 = Vector::Constant(kSmall.input_dim, 0.5);
  const auto r = run_square(enc, x0, Goal::illusion(unit_normalize(Vector::Ones(kSmall.embed_dim))), cfg);
  CHECK(r.adversarial_input == x0);
  CHECK(r.queries_used == 1);
}

TEST_CASE("square attack lowers the objective on the retrieval preset") {
  double before = 0.0, after = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto w = make_preset_world(Preset::retrieval, seed);
    const auto target = proxy_half(w.target_embeddings[0]);
    const auto goal = Goal::pta(proxies({target.members.begin(), target.members.begin() + 10}));
    auto cfg = square_defaults();
    cfg.seed = seed;
    const auto r = run_square(w.encoder, w.source_inputs[1][0], goal, cfg);
    before += r.loss_trace.front();
    after += r.loss_trace.back();
  }
  CHECK(after < before);
}

TEST_CASE("run_attack dispatches and serializes") {
  Rng rng(9);
  const auto enc = build_encoder(kSmall, 4);
  const auto x0 = test::random_box(rng, kSmall.input_dim);
  const auto goal = random_goal(rng, Objective::pta, kSmall.embed_dim);
  AttackConfig cfg;
  cfg.iterations = 5;
  const auto r = run_attack(enc, x0, goal, cfg);
  CHECK(r.queries_used == 6);
  const auto j = r.to_json();
  for (const char* key : {"original", "adversarial_input", "objective_trace", "config_echo", "seed"})
    CHECK(j.contains(key));
  CHECK(j["config_echo"]["objective"] == "pta");
  cfg.optimizer = Optimizer::square;
  cfg.query_budget = 20;
  CHECK(run_attack(enc, x0, goal, cfg).queries_used <= 20);
}

TEST_CASE("attack config validation and parsing") {
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttackConfig{};
  c.alpha = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttackConfig{};
  c.query_budget = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_optimizer("square") == Optimizer::square);
  CHECK(parse_objective("samemodal") == Objective::samemodal);
  CHECK_THROWS_AS(parse_objective("crossfire"), ConfigError);
  CHECK(square_defaults().epsilon == doctest::Approx(16.0 / 255.0));
  CHECK(AttackConfig{}.epsilon == doctest::Approx(8.0 / 255.0));
  CHECK(AttackConfig{}.iterations == 100);
}

TEST_CASE("select_surrogate takes the closest cluster mean, then its closest member") {
  const EmbeddingSet a({vec({1, 0}), vec({0.8, 0.6})}, "a");
  const EmbeddingSet b({vec({0, 1}), vec({0.6, 0.8}), vec({-0.6, 0.8})}, "b");
  const std::vector<EmbeddingSet> clusters{a, b};
  const auto s = select_surrogate(clusters, vec({0.1, 1.0}));
  CHECK(s.cluster == 1);
  CHECK(s.member == 0);
  const auto t = select_surrogate(clusters, vec({0.7, 0.6}));
  CHECK(t.cluster == 0);
  CHECK(t.member == 1);
}

TEST_CASE("proxy set validation") {
  ProxySet p;
  CHECK_THROWS_AS(p.validate(), DomainError);
  p = proxies({vec({2, 0})});
  CHECK_THROWS_AS(p.validate(), DomainError);
  p = proxies({vec({1, 0})}, {vec({1, 0, 0})});
  CHECK_THROWS_AS(p.validate(), DomainError);
  CHECK_NOTHROW(proxies({vec({1, 0})}).validate());
}
