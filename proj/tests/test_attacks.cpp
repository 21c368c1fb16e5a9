#include "doctest.h"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include "owb/attacks.hpp"

#include <algorithm>
#include <cmath>

using namespace owb;

namespace {

/// Linear model on a single zero pixel whose softmax is `probs`.
Classifier fixed_output(const std::vector<double>& probs) {
  Classifier m = make_classifier("linear", {1}, std::vector<std::string>(probs.size(), "c"), 0);
  auto params = m.network().parameters();
  params.front()->data().setZero();
  for (std::size_t i = 0; i < probs.size(); ++i) (*params.back())[static_cast<Index>(i)] = std::log(probs[i]);
  return m;
}

std::vector<Tensor> random_images(std::size_t n, const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_tensor(rng, shape, 0, 1));
  return out;
}

const std::vector<std::string> kFour{"a", "b", "c", "d"};

}  // namespace

TEST_CASE("select_target") {
  const Tensor x({1}, {0.0});
  CHECK(select_target(fixed_output({0.7, 0.2, 0.1}), x, Targeting::least_likely, 0) == 2);
  CHECK(select_target(fixed_output({0.5, 0.25, 0.25}), x, Targeting::least_likely, 0) == 1);

  const Classifier m = fixed_output({0.1, 0.6, 0.2, 0.1});
  std::vector<int> seen(4, 0);
  for (std::uint64_t s = 0; s < 1000; ++s) ++seen[static_cast<std::size_t>(select_target(m, x, Targeting::rand, s))];
  CHECK(seen[1] == 0);
  CHECK(seen[0] > 250);
  CHECK(seen[2] > 250);
  CHECK(seen[3] > 250);

  CHECK_THROWS(select_target(fixed_output({1.0}), x, Targeting::rand, 0));
}

TEST_CASE("adversarial losses") {
  Tape tape;
  const Var z = tape.constant(Tensor({1, 3}, {3, 1, 0}));
  const std::vector<int> t0{0}, t1{1};
  CHECK(adv_loss(z, t0, LossKind::cw, 0).value()[0] == 0.0);
  CHECK(adv_loss(z, t1, LossKind::cw, 0).value()[0] == 2.0);
  CHECK(adv_loss(z, t0, LossKind::cw, 5).value()[0] == -2.0);
  CHECK(adv_loss(z, t1, LossKind::xent, 0).value()[0] == doctest::Approx(cross_entropy(z, t1).value()[0]));

  const Tensor probs({3}, {0.7, 0.2, 0.1});
  CHECK(adv_loss_from_probs(probs, 1, LossKind::cw, 0) == doctest::Approx(std::log(0.7 / 0.2)));
  CHECK(adv_loss_from_probs(probs, 1, LossKind::xent, 0) == doctest::Approx(-std::log(0.2)));
}

TEST_CASE("Linf projection clamps to the ball and the box") {
  const PerturbationConstraint c{Norm::linf, 0.2};
  const Tensor x0({3}, {0.5, 0.1, 0.95});
  const Tensor p = project(Tensor({3}, {0.9, -0.5, 1.2}), x0, c);
  CHECK(p[0] == doctest::Approx(0.7));
  CHECK(p[1] == 0.0);
  CHECK(p[2] == 1.0);
  const Tensor inside({3}, {0.6, 0.2, 0.9});
  CHECK(project(inside, x0, c) == inside);
}

TEST_CASE("L2 projection matches the grid-search and enumeration oracles on 3-pixel cases") {
  Rng rng(17);
  double worst_grid = 0, worst_exact = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x0 = testing::random_tensor(rng, {3}, 0, 1);
    const double eps = rng.uniform(0.05, 0.8);
    const Tensor x = testing::random_tensor(rng, {3}, -0.8, 1.8);
    const PerturbationConstraint c{Norm::l2, eps};
    const Tensor p = project(x, x0, c);
    CHECK(is_feasible(p, x0, c));
    const Tensor exact = testing::enumerate_project(x, x0, eps);
    worst_exact = std::max(worst_exact, (p.data() - exact.data()).cwiseAbs().maxCoeff());
    if (trial < 40) {
      const double dp = l2_distance(p, x), dg = l2_distance(testing::grid_project(x, x0, eps), x);
      CHECK(dp <= dg + 1e-12);
      worst_grid = std::max(worst_grid, dg - dp);
    }
  }
  CHECK(worst_exact < 1e-6);
  // Pattern search stalls along the curved boundary, a few 1e-6 short of optimal.
  CHECK(worst_grid < 1e-5);

  const Tensor x0({3}, {0.5, 0.5, 0.5});
  const Tensor inside({3}, {0.55, 0.45, 0.5});
  CHECK(project(inside, x0, {Norm::l2, 0.1}) == inside);
}

TEST_CASE("epsilon 0 returns the start") {
  const Classifier m = make_classifier("mlp-2", {1, 8, 8}, kFour, 3);
  const auto starts = random_images(3, {1, 8, 8}, 2);
  for (Norm n : {Norm::linf, Norm::l2}) {
    AttackConfig cfg;
    cfg.constraint = {n, 0.0};
    cfg.step_size = 0.1;
    cfg.max_iters = 10;
    for (const Tensor& x : starts) CHECK(pgd_attack(m, x, 1, cfg).adv_example == x);
  }
}

TEST_CASE("PGD results are feasible, consistent and deterministic") {
  const Classifier m = make_classifier("cnn-s", {1, 12, 12}, kFour, 5);
  const auto starts = random_images(6, {1, 12, 12}, 9);
  const std::vector<int> targets = select_targets(m, starts, Targeting::rand, 4);
  for (Norm n : {Norm::linf, Norm::l2}) {
    for (LossKind k : {LossKind::xent, LossKind::cw}) {
      AttackConfig cfg;
      cfg.loss = k;
      cfg.constraint = {n, n == Norm::linf ? 0.1 : 1.0};
      cfg.max_iters = 30;
      const auto a = pgd_attack_batch(m, starts, targets, cfg);
      const auto b = pgd_attack_batch(m, starts, targets, cfg);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(is_feasible(a[i].adv_example, starts[i], cfg.constraint));
        CHECK(a[i].adv_example == b[i].adv_example);
        CHECK(a[i].final_loss <= a[i].initial_loss);
        const Prediction p = predict(m, a[i].adv_example);
        CHECK(a[i].predicted == p.label);
        CHECK(a[i].success == (p.label == targets[i]));
        CHECK(a[i].target_confidence == doctest::Approx(confidences(m, a[i].adv_example)[targets[i]]));
      }
      // Batched matrix products may round differently from single rows; the
      // sign step hides that, the normalized step does not.
      const AttackResult single = pgd_attack(m, starts[2], targets[2], cfg);
      if (n == Norm::linf) {
        CHECK(single.adv_example == a[2].adv_example);
      } else {
        CHECK((single.adv_example.data() - a[2].adv_example.data()).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }
}

TEST_CASE("zero gradient at the start is recorded") {
  const Classifier m = fixed_output({0.5, 0.3, 0.2});
  AttackConfig cfg;
  cfg.constraint = {Norm::linf, 0.1};
  cfg.max_iters = 5;
  const AttackResult r = pgd_attack(m, Tensor({1}, {0.5}), 2, cfg);
  CHECK(r.zero_gradient_start);
  CHECK(r.adv_example == Tensor({1}, {0.5}));
}

TEST_CASE("EOT with the identity sampler is plain PGD") {
  const Classifier m = make_classifier("mlp-2", {1, 8, 8}, kFour, 6);
  const auto starts = random_images(4, {1, 8, 8}, 3);
  const std::vector<int> targets{1, 2, 3, 0};
  AttackConfig cfg;
  cfg.constraint = {Norm::linf, 0.2};
  cfg.max_iters = 20;
  const auto plain = pgd_attack_batch(m, starts, targets, cfg);
  for (int samples : {1, 4}) {
    const auto eot = eot_attack(m, starts, targets, cfg, identity_sampler(), samples, 5);
    for (std::size_t i = 0; i < starts.size(); ++i) {
      CHECK(eot[i].adv_example == plain[i].adv_example);
      REQUIRE(eot[i].transform_success.has_value());
      CHECK(*eot[i].transform_success == (plain[i].success ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("EOT transforms") {
  const Tensor x = random_images(1, {1, 8, 8}, 1).front();
  CHECK(apply_transform(x, EotTransform{}) == x);
  const Tensor bright = apply_transform(x, EotTransform{0.2, 1, 0});
  CHECK(bright.data().maxCoeff() <= 1.0);
  CHECK(bright[0] == doctest::Approx(std::min(1.0, x[0] + 0.2)));
  Rng rng(2);
  const auto sampler = default_transform_sampler();
  for (int i = 0; i < 100; ++i) {
    const EotTransform t = sampler(rng);
    CHECK(std::abs(t.brightness) <= 0.2);
    CHECK(t.scale >= 0.8);
    CHECK(t.scale <= 1.2);
    CHECK(std::abs(t.rotation_deg) <= 15);
  }
}

TEST_CASE("finite-difference gradient estimation") {
  SUBCASE("sum of squares") {
    QueryOracle oracle([](const Tensor& x) { return x; });
    const auto est = estimate_gradient_fd(
        oracle, Tensor({2}, {1, 2}), [](const Tensor& y) { return y.data().squaredNorm(); }, 1, 1e-3, 0);
    CHECK(est.gradient[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(est.gradient[1] == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(est.queries == 4);
    CHECK(oracle.queries() == 4);
  }
  SUBCASE("query accounting with ragged groups") {
    QueryOracle oracle([](const Tensor&) { return Tensor({3}, {0.2, 0.3, 0.5}); });
    const Tensor x({1, 28, 28});
    CHECK(estimate_gradient_fd(oracle, x, LossKind::xent, 1, 0, 8, 1e-3, 0).queries == 196);
    CHECK(estimate_gradient_fd(oracle, x, LossKind::xent, 1, 0, 10, 1e-3, 0).queries == 2 * 79);
    CHECK(oracle.queries() == 196 + 158);
  }
  SUBCASE("grouped pixels share one estimate") {
    QueryOracle oracle([](const Tensor& x) { return x; });
    const Tensor x({4}, {0.1, 0.2, 0.3, 0.4});
    const auto est = estimate_gradient_fd(
        oracle, x, [](const Tensor& y) { return y.data().sum(); }, 4, 1e-3, 0);
    CHECK(est.queries == 2);
    for (Index i = 0; i < 4; ++i) CHECK(est.gradient[i] == doctest::Approx(4.0));
  }
  SUBCASE("oracle failure carries the query count") {
    QueryOracle oracle([](const Tensor& x) { return x; }, 5);
    try {
      (void)estimate_gradient_fd(
          oracle, Tensor({8}), [](const Tensor& y) { return y.data().sum(); }, 1, 1e-3, 0);
      FAIL("expected an oracle error");
    } catch (const OracleError& e) {
      CHECK(e.queries() == 5);
    }
    QueryOracle broken([](const Tensor&) -> Tensor { throw std::runtime_error("backend down"); });
    try {
      (void)broken(Tensor({1}));
      FAIL("expected an oracle error");
    } catch (const OracleError& e) {
      CHECK(e.queries() == 1);
      CHECK(std::string(e.what()).find("backend down") != std::string::npos);
    }
  }
}

TEST_CASE("black-box PGD counts every query and stays feasible") {
  const Classifier m = make_classifier("mlp-2", {1, 6, 6}, kFour, 2);
  const Tensor x0 = random_images(1, {1, 6, 6}, 5).front();
  AttackConfig cfg;
  cfg.constraint = {Norm::linf, 0.2};
  cfg.max_iters = 5;
  cfg.plateau_patience = 0;
  QueryOracle oracle = local_oracle(m);
  const AttackResult r = blackbox_pgd_attack(oracle, x0, 2, cfg, BlackBoxConfig{4, 1e-3});
  CHECK(r.queries_used == oracle.queries());
  CHECK(r.queries_used >= 5 * 2 * 9);
  CHECK(is_feasible(r.adv_example, x0, cfg.constraint));
}

TEST_CASE("BPDA without squeezed-branch weight is the L2 Adam attack") {
  const Classifier m = make_classifier("mlp-2", {1, 8, 8}, kFour, 7);
  const auto starts = random_images(4, {1, 8, 8}, 8);
  const std::vector<int> targets{3, 0, 1, 2};
  AttackConfig cfg;
  cfg.constraint = {Norm::l2, 1.0};
  cfg.max_iters = 25;
  BpdaConfig bpda;
  bpda.threshold = 2.0;  // L1 distance of distributions never exceeds 2
  bpda.squeeze_weight = 0;
  const auto got = bpda_attack(m, bpda, starts, targets, cfg);

  AttackConfig run = cfg;
  run.plateau_patience = 0;
  const Objective plain = whitebox_objective(m, run);
  const Objective with_success = [&](const Tensor& b, std::span<const int> tg, std::span<const std::size_t> ids) {
    ObjectiveValue v = plain(b, tg, ids);
    const Tensor z = logits(m, b);
    for (Index r = 0; r < z.dim(0); ++r) {
      v.success.push_back(argmax(z.data().segment(r * z.dim(1), z.dim(1))) == tg[static_cast<std::size_t>(r)]);
    }
    return v;
  };
  const auto ref = run_pgd_engine(starts, targets, run, EngineOptions{StepRule::adam}, with_success);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    CHECK(got[i].adv_example == ref[i].best);
    CHECK(is_feasible(got[i].adv_example, starts[i], cfg.constraint));
    CHECK(got[i].success == (got[i].predicted == targets[i]));
  }
  CHECK_THROWS_AS(bpda_attack(m, bpda, starts, targets, AttackConfig{}), std::invalid_argument);
}

TEST_CASE("config validation") {
  AttackConfig cfg;
  cfg.constraint = {Norm::linf, -0.1};
  CHECK_THROWS(cfg.validate());
  cfg.constraint = {Norm::linf, 0.3};
  cfg.max_iters = 0;
  CHECK_THROWS(cfg.validate());
  cfg.max_iters = 10;
  CHECK(cfg.effective_step() == doctest::Approx(0.03));
  cfg.constraint = {Norm::l2, 2.0};
  CHECK(cfg.effective_step() == doctest::Approx(0.4));
}
