#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "supici/losses.hpp"
#include "supici/rng.hpp"

using namespace supici;
using losses::ContrastiveConfig;
using losses::InstanceFeatures;
using losses::WEConfig;

namespace {

std::vector<std::vector<double>> random_vectors(rng::Engine& eng, int n, int d) {
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& v : out)
    for (double& e : v) e = eng.normal();
  return out;
}

}  // namespace

TEST_CASE("cosine_sim values and errors") {
  const std::vector<double> e1{1, 0}, e2{0, 1}, diag{1, 1};
  CHECK(losses::cosine_sim(e1, e1) == doctest::Approx(1.0));
  CHECK(losses::cosine_sim(e1, e2) == 0.0);
  CHECK(losses::cosine_sim(diag, e1) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  const std::vector<double> bad{1, 2, 3};
  CHECK_THROWS_AS(losses::cosine_sim(e1, bad), std::invalid_argument);
}

TEST_CASE("rank_weights: rank-0 convention, competition ties, omega scaling") {
  CHECK(losses::rank_weights({0.3}, 0.25) == std::vector<double>{1.0});

  const auto w = losses::rank_weights({0.9, 0.5}, 0.25);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == doctest::Approx(std::exp(-0.25)).epsilon(1e-12));

  for (const double x : losses::rank_weights({0.4, 0.4, 0.4}, 0.7)) CHECK(x == 1.0);

  // competition ranking: two tied leaders, the next gets rank 2
  const auto tied = losses::rank_weights({0.9, 0.9, 0.5}, 0.25);
  CHECK(tied[0] == 1.0);
  CHECK(tied[1] == 1.0);
  CHECK(tied[2] == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
}

TEST_CASE("contrastive_neg_loss frozen values") {
  ContrastiveConfig cfg;

  // one orthogonal pair: log(1 - 0) = 0
  const InstanceFeatures ortho({{1.0, 0.0}}, {{0.0, 1.0}});
  const auto zero = losses::contrastive_neg_loss(ortho, cfg);
  CHECK(zero.active);
  CHECK(zero.value == 0.0);

  // s = 0.5 -> -log 0.5
  const InstanceFeatures half({{1.0, 0.0}}, {{0.5, std::sqrt(3.0) / 2.0}});
  CHECK(losses::contrastive_neg_loss(half, cfg).value ==
        doctest::Approx(0.6931471805599453).epsilon(1e-9));

  // identical vectors clamp at 1 - eps: -log(eps) with eps = 1e-6
  const InstanceFeatures same({{1.0, 2.0}}, {{1.0, 2.0}});
  CHECK(losses::contrastive_neg_loss(same, cfg).value ==
        doctest::Approx(13.815510557964274).epsilon(1e-9));

  // inactive when either side is empty
  const auto inactive = losses::contrastive_neg_loss(InstanceFeatures({{1.0, 0.0}}, {}), cfg);
  CHECK_FALSE(inactive.active);
  CHECK(inactive.value == 0.0);
  for (const auto& g : inactive.grad.foreground)
    for (const double x : g) CHECK(x == 0.0);
}

TEST_CASE("contrastive_pos_loss frozen values") {
  ContrastiveConfig cfg;

  // two identical foreground vectors: s clamps to 1-eps, loss = -log(1-eps)
  const InstanceFeatures same({{1.0, 2.0}, {1.0, 2.0}}, {});
  CHECK(losses::contrastive_pos_loss(same, cfg).value ==
        doctest::Approx(1e-6).epsilon(1e-2));

  // one foreground pair with s = 0.5, single pair has weight 1
  const InstanceFeatures half({{1.0, 0.0}, {0.5, std::sqrt(3.0) / 2.0}}, {});
  CHECK(losses::contrastive_pos_loss(half, cfg).value ==
        doctest::Approx(0.6931471805599453).epsilon(1e-9));

  // both sets too small: inactive zero
  const auto off = losses::contrastive_pos_loss(InstanceFeatures({{1.0, 0.0}}, {{0.0, 1.0}}), cfg);
  CHECK_FALSE(off.active);
  CHECK(off.value == 0.0);
}

TEST_CASE("contrastive_loss composes exactly and deactivates") {
  ContrastiveConfig cfg;
  rng::Engine eng(11);
  for (int i = 0; i < 50; ++i) {
    const InstanceFeatures feat(random_vectors(eng, eng.uniform_int(0, 4), 5),
                                random_vectors(eng, eng.uniform_int(0, 4), 5));
    const auto total = losses::contrastive_loss(feat, cfg);
    const auto neg = losses::contrastive_neg_loss(feat, cfg);
    const auto pos = losses::contrastive_pos_loss(feat, cfg);
    CHECK(total.value == neg.value + pos.value);  // bit-exact by construction
    CHECK(total.active == (neg.active || pos.active));
  }

  // m = 1, k = 1 orthogonal: equals the negative term alone
  const InstanceFeatures ortho({{1.0, 0.0}}, {{0.0, 1.0}});
  CHECK(losses::contrastive_loss(ortho, cfg).value ==
        losses::contrastive_neg_loss(ortho, cfg).value);
}

TEST_CASE("InstanceFeatures invariants enforced on construction") {
  CHECK_THROWS_AS(InstanceFeatures({{1.0, 0.0}}, {{1.0, 0.0, 0.0}}), std::invalid_argument);
  CHECK_THROWS_AS(InstanceFeatures({{0.0, 0.0}}, {}), std::invalid_argument);
  CHECK_THROWS_AS(InstanceFeatures({{}}, {}), std::invalid_argument);
  CHECK_NOTHROW(InstanceFeatures({}, {}));
}

TEST_CASE("bce_loss frozen values") {
  CHECK(losses::bce_loss(1.0, 1).value == doctest::Approx(0.0).epsilon(1e-5));
  CHECK(losses::bce_loss(0.5, 0).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(losses::bce_loss(0.5, 1).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(losses::bce_loss(0.9, 0).value == doctest::Approx(2.302585092994046).epsilon(1e-9));
  CHECK_THROWS_AS(losses::bce_loss(0.5, 2), std::invalid_argument);
}

TEST_CASE("smooth_l1 frozen values") {
  const std::array<double, 6> zero{};
  CHECK(losses::smooth_l1(zero, zero).value == 0.0);

  std::array<double, 6> pred{};
  pred[0] = 0.5;
  CHECK(losses::smooth_l1(pred, zero).value == doctest::Approx(0.125).epsilon(1e-12));

  pred[0] = 2.0;
  CHECK(losses::smooth_l1(pred, zero).value == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(losses::smooth_l1(pred, zero).grad[0] == 1.0);
}

TEST_CASE("sup_detection_loss composition and empty-target behavior") {
  using losses::InstancePrediction;
  using losses::InstanceTarget;
  using losses::TargetLabel;

  // single RPN instance, p = 0.5 vs positive target, zero regression diff
  InstancePrediction p;
  p.prob = 0.5;
  InstanceTarget t;
  t.label = TargetLabel::Positive;
  const auto single = losses::sup_detection_loss({p}, {t}, {}, {});
  CHECK(single.value == doctest::Approx(0.6931471805599453).epsilon(1e-9));

  // random instance: value equals independently summed components
  rng::Engine eng(3);
  std::vector<InstancePrediction> rpn(4), roi(3);
  std::vector<InstanceTarget> rpn_t(4), roi_t(3);
  double expected = 0.0;
  const auto fill = [&](std::vector<InstancePrediction>& preds,
                        std::vector<InstanceTarget>& targets) {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      preds[i].prob = eng.uniform(0.05, 0.95);
      const double u = eng.uniform();
      targets[i].label = u < 0.4   ? TargetLabel::Positive
                         : u < 0.8 ? TargetLabel::Negative
                                   : TargetLabel::Ignore;
      for (int d = 0; d < 6; ++d) {
        preds[i].offsets[d] = eng.normal();
        targets[i].offsets[d] = eng.normal();
      }
      if (targets[i].label == TargetLabel::Positive)
        expected += losses::bce_loss(preds[i].prob, 1).value +
                    losses::smooth_l1(preds[i].offsets, targets[i].offsets).value;
      else if (targets[i].label == TargetLabel::Negative)
        expected += losses::bce_loss(preds[i].prob, 0).value;
    }
  };
  fill(rpn, rpn_t);
  fill(roi, roi_t);
  const auto out = losses::sup_detection_loss(rpn, rpn_t, roi, roi_t);
  CHECK(out.value == doctest::Approx(expected).epsilon(1e-12));

  // empty target set: zero, inactive
  const auto empty = losses::sup_detection_loss({}, {}, {}, {});
  CHECK(empty.value == 0.0);
  CHECK_FALSE(empty.active);
}

TEST_CASE("we_loss dead zone and frozen branch values") {
  WEConfig cfg;  // tau 0.25/0.75, gamma 4, alpha 0.1

  CHECK(losses::we_loss({0.5}, cfg).value == 0.0);
  CHECK_FALSE(losses::we_loss({0.5}, cfg).active);

  // p = 0.1: (1-alpha) * p^gamma * (-p ln p) = 0.9 * 1e-4 * 0.230258509...
  CHECK(losses::we_loss({0.1}, cfg).value ==
        doctest::Approx(2.0723265836946415e-05).epsilon(1e-9));

  // p = 0.9: alpha * (1-p)^gamma * (-p ln p) = 0.1 * 1e-4 * 0.094824464...
  CHECK(losses::we_loss({0.9}, cfg).value ==
        doctest::Approx(9.482446409204366e-07).epsilon(1e-9));

  // sums over instances, nonnegative everywhere
  rng::Engine eng(8);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> probs(eng.uniform_int(1, 6));
    for (double& q : probs) q = eng.uniform(0.001, 0.999);
    CHECK(losses::we_loss(probs, cfg).value >= 0.0);
  }

  CHECK_THROWS_AS(losses::we_loss({0.5}, WEConfig{0.8, 0.2, 4.0, 0.1, false}),
                  std::invalid_argument);
}

TEST_CASE("student_total_loss linearity") {
  losses::LossOutput sup{2.0, {1.0, -2.0, 0.5}, true};
  losses::LossOutput unsup{0.5, {0.25, 0.0, -1.0}, true};

  const auto eta0 = losses::student_total_loss(sup, unsup, 0.0);
  CHECK(eta0.value == 0.5);
  for (int i = 0; i < 3; ++i) CHECK(eta0.grad[i] == unsup.grad[i]);

  const auto eta1 = losses::student_total_loss(sup, unsup, 1.0);
  CHECK(eta1.value == 2.5);

  rng::Engine eng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const double eta = eng.uniform(0.0, 3.0);
    losses::LossOutput a{eng.normal(), {eng.normal(), eng.normal()}, true};
    losses::LossOutput b{eng.normal(), {eng.normal(), eng.normal()}, true};
    const auto total = losses::student_total_loss(a, b, eta);
    for (int i = 0; i < 2; ++i) CHECK(total.grad[i] == eta * a.grad[i] + b.grad[i]);
  }

  CHECK_THROWS_AS(losses::student_total_loss(sup, unsup, -0.1), std::invalid_argument);
}
