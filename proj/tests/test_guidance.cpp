#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "psdlab/guidance.hpp"
#include "psdlab/harness/config.hpp"
#include "psdlab/oracle.hpp"
#include "psdlab/rng.hpp"

using namespace psdlab;
using harness::random_gmm;

namespace {

const Schedule& sch() {
  static const Schedule s = default_schedule();
  return s;
}

RewardSpec quadratic(const Vec& mu, int de) {
  RewardSpec r;
  r.target_map = Mat::Zero(mu.size(), de);
  r.offset = mu;
  return r;
}

bool bit_equal(const Vec& a, const Vec& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

struct Fixture {
  GmmScoreModel model;
  RewardSpec reward;
  Embedding y, neg;
  double gamma;
};

Fixture random_fixture(Rng& rng, int K) {
  Fixture f{random_gmm(2, 2, K, static_cast<std::uint64_t>(rng.engine()())), quadratic(rng.normal_vec(2), 2),
            {rng.normal_vec(2)}, {rng.normal_vec(2), EmbeddingLabel::Negative}, 1.0 + 7.0 * rng.uniform()};
  return f;
}

}  // namespace

TEST(MakePair, BranchesAreNoisedRenderingAndRankedByReward) {
  Rng rng(1, "t");
  for (int i = 0; i < 200; ++i) {
    const Fixture f = random_fixture(rng, 2);
    const Vec xc = rng.normal_vec(2), ea = rng.normal_vec(2), eb = rng.normal_vec(2);
    const int t = rng.uniform_int(1, 1000);
    const WinLosePair p = make_pair_from_noises(xc, t, ea, eb, f.model, f.reward, f.y, f.neg, f.gamma, sch());
    EXPECT_LE((p.x_t_win - (sch().alpha_at(t) * xc + sch().sigma_at(t) * p.eps_win)).norm(), 1e-14);
    EXPECT_LE((p.x_t_lose - (sch().alpha_at(t) * xc + sch().sigma_at(t) * p.eps_lose)).norm(), 1e-14);
    EXPECT_GE(p.outcome.delta_r, 0.0);
    EXPECT_DOUBLE_EQ(p.outcome.delta_r, reward(f.reward, f.y, p.x0hat_win) - reward(f.reward, f.y, p.x0hat_lose));
  }
}

TEST(MakePair, IdenticalNoisesTie) {
  Rng rng(2, "t");
  const Fixture f = random_fixture(rng, 2);
  const Vec e = rng.normal_vec(2);
  const WinLosePair p = make_pair_from_noises(Vec::Zero(2), 500, e, e, f.model, f.reward, f.y, f.neg, 3.0, sch());
  EXPECT_EQ(p.outcome.delta_r, 0.0);
  EXPECT_EQ(p.outcome.p_win, 0.5);
  EXPECT_EQ(p.outcome.winner_index, 0);
}

TEST(MakePair, WinnerIsTheNoiseWhosePredictionIsNearerTheTarget) {
  Rng rng(3, "t");
  for (int i = 0; i < 200; ++i) {
    const Fixture f = random_fixture(rng, 1);
    const Vec xc = f.reward.offset;
    const Vec ea = rng.normal_vec(2), eb = rng.normal_vec(2);
    const int t = rng.uniform_int(1, 1000);
    const WinLosePair p = make_pair_from_noises(xc, t, ea, eb, f.model, f.reward, f.y, f.neg, f.gamma, sch());
    // Brute force: distance of each guided one-step prediction to the target.
    auto dist = [&](const Vec& e) {
      const double a = sch().alpha_at(t), s = sch().sigma_at(t);
      const Vec xt = a * xc + s * e;
      const Vec en = -s * oracle::gmm_score(f.model, xt, f.neg.v, a, s);
      const Vec ey = -s * oracle::gmm_score(f.model, xt, f.y.v, a, s);
      return ((xt - s * (en + f.gamma * (ey - en))) / a - xc).norm();
    };
    const int want = dist(eb) < dist(ea) ? 1 : 0;
    EXPECT_EQ(p.outcome.winner_index, want);
  }
}

TEST(MakePair, SeededDrawsAreReproducible) {
  Rng rng(4, "t");
  const Fixture f = random_fixture(rng, 3);
  for (auto kind : {NoisingKind::Independent, NoisingKind::InversionPredicted}) {
    RngStreams a(17), b(17);
    const NoisingStrategy ns{kind, 100, 300};
    for (int k = 0; k < 20; ++k) {
      const WinLosePair p = make_pair(Vec::Ones(2), 400, ns, f.model, f.reward, f.y, f.neg, f.gamma, sch(), a);
      const WinLosePair q = make_pair(Vec::Ones(2), 400, ns, f.model, f.reward, f.y, f.neg, f.gamma, sch(), b);
      EXPECT_TRUE(bit_equal(p.x_t_win, q.x_t_win));
      EXPECT_TRUE(bit_equal(p.eps_lose, q.eps_lose));
      EXPECT_EQ(p.tau, q.tau);
    }
  }
}

TEST(MakePair, InversionPredictedUsesShiftedPrediction) {
  Rng rng(5, "t");
  const Fixture f = random_fixture(rng, 2);
  const NoisingStrategy ns{NoisingKind::InversionPredicted, 100, 300};
  RngStreams streams(3);
  RngStreams shadow(3);
  const Vec xc = rng.normal_vec(2);
  for (int k = 0; k < 50; ++k) {
    const WinLosePair p = make_pair(xc, 500, ns, f.model, f.reward, f.y, f.neg, f.gamma, sch(), streams);
    const Vec ea = shadow.noise_a.normal_vec(2);
    const Vec eb = shadow.noise_b.normal_vec(2);
    const int tau = shadow.tau.uniform_int(100, 300);
    EXPECT_EQ(p.tau, tau);
    EXPECT_GE(p.tau, 100);
    EXPECT_LE(p.tau, 300);
    const Vec predicted = eps_predict(f.model, add_noise(xc, 500 + tau, ea, sch()), f.y, sch());
    const Vec first = p.outcome.winner_index == 0 ? p.eps_win : p.eps_lose;
    const Vec second = p.outcome.winner_index == 0 ? p.eps_lose : p.eps_win;
    EXPECT_TRUE(bit_equal(first, predicted));
    EXPECT_TRUE(bit_equal(second, eb));
  }
}

TEST(MakePair, RangeAndParameterErrors) {
  Rng rng(6, "t");
  const Fixture f = random_fixture(rng, 1);
  RngStreams s(0);
  EXPECT_THROW(make_pair(Vec::Ones(2), 900, {NoisingKind::InversionPredicted, 200, 200}, f.model, f.reward, f.y,
                         f.neg, 2.0, sch(), s),
               RangeError);
  EXPECT_THROW(make_pair(Vec::Ones(2), 100, {NoisingKind::InversionPredicted, 50, 10}, f.model, f.reward, f.y, f.neg,
                         2.0, sch(), s),
               ParameterError);
  EXPECT_THROW(make_pair(Vec::Ones(2), 1001, {}, f.model, f.reward, f.y, f.neg, 2.0, sch(), s), RangeError);
  Vec bad = Vec::Ones(2);
  bad[0] = std::nan("");
  EXPECT_THROW(make_pair(bad, 100, {}, f.model, f.reward, f.y, f.neg, 2.0, sch(), s), NumericalError);
}

TEST(PreferenceGuidance, IdenticalBranchesAndAntisymmetry) {
  Rng rng(7, "t");
  for (int i = 0; i < 100; ++i) {
    const Fixture f = random_fixture(rng, 3);
    const int t = rng.uniform_int(1, 1000);
    WinLosePair p = make_pair_from_noises(rng.normal_vec(2), t, rng.normal_vec(2), rng.normal_vec(2), f.model,
                                          f.reward, f.y, f.neg, f.gamma, sch());
    const Vec d = preference_guidance(p, f.model, f.y, f.neg, f.gamma, sch());
    std::swap(p.x_t_win, p.x_t_lose);
    EXPECT_TRUE(bit_equal(preference_guidance(p, f.model, f.y, f.neg, f.gamma, sch()), -d));
    p.x_t_lose = p.x_t_win;
    EXPECT_EQ(preference_guidance(p, f.model, f.y, f.neg, f.gamma, sch()), Vec::Zero(2));
  }
}

TEST(PreferenceGuidance, SingleGaussianClosedForm) {
  Rng rng(8, "t");
  for (int i = 0; i < 200; ++i) {
    const Fixture f = random_fixture(rng, 1);
    const int t = rng.uniform_int(1, 1000);
    const double a = sch().alpha_at(t), s = sch().sigma_at(t);
    const WinLosePair p = make_pair_from_noises(rng.normal_vec(2), t, rng.normal_vec(2), rng.normal_vec(2), f.model,
                                                f.reward, f.y, f.neg, f.gamma, sch());
    auto guided = [&](const Vec& x) {
      const Vec en = -s * oracle::gaussian_score(f.model.component_mean(0, f.neg.v), f.model.covariances[0], x, a, s);
      const Vec ey = -s * oracle::gaussian_score(f.model.component_mean(0, f.y.v), f.model.covariances[0], x, a, s);
      return Vec(en + f.gamma * (ey - en));
    };
    const Vec want = guided(p.x_t_win) - guided(p.x_t_lose);
    EXPECT_LE(oracle::relative_error(preference_guidance(p, f.model, f.y, f.neg, f.gamma, sch()), want), 1e-9);
  }
}

TEST(ComposeTerms, AdaptiveScaleHandValuesAndLimits) {
  EXPECT_DOUBLE_EQ(adaptive_pref_scale(7.5, 2.0, 4.0, 0.0), 1.875);
  EXPECT_LT(adaptive_pref_scale(7.5, 2.0, 4.0, 50.0), 1e-20);
  EXPECT_EQ(adaptive_pref_scale(7.5, 2.0, 4.0, 1e6), 0.0);
  EXPECT_EQ(adaptive_pref_scale(7.5, 2.0, 0.0, 0.0), 0.0);
}

TEST(ComposeTerms, DegeneratePairReducesToGuidedDistillation) {
  Rng rng(9, "t");
  const Fixture f = random_fixture(rng, 2);
  const Vec e = rng.normal_vec(2);
  const WinLosePair p = make_pair_from_noises(rng.normal_vec(2), 300, e, e, f.model, f.reward, f.y, f.neg, 4.0, sch());
  const GuidanceTerms g = compose_terms(p, f.model, f.y, f.neg, 4.0, sch());
  EXPECT_EQ(g.delta_pref, Vec::Zero(2));
  EXPECT_EQ(g.beta_r, 0.0);
  EXPECT_TRUE(bit_equal(total_update(g, 4.0), Vec(g.delta_gen + 4.0 * g.delta_cls)));
}

TEST(ComposeTerms, TermDefinitions) {
  Rng rng(10, "t");
  for (int i = 0; i < 100; ++i) {
    const Fixture f = random_fixture(rng, 2);
    const int t = rng.uniform_int(1, 1000);
    const WinLosePair p = make_pair_from_noises(rng.normal_vec(2), t, rng.normal_vec(2), rng.normal_vec(2), f.model,
                                                f.reward, f.y, f.neg, f.gamma, sch());
    const GuidanceTerms g = compose_terms(p, f.model, f.y, f.neg, f.gamma, sch());
    const NoisyState w{p.x_t_win, t};
    EXPECT_TRUE(bit_equal(g.delta_gen, Vec(eps_predict(f.model, w, Embedding::unconditional(2), sch()) - p.eps_win)));
    EXPECT_TRUE(bit_equal(g.delta_cls,
                          Vec(eps_predict(f.model, w, f.y, sch()) - eps_predict(f.model, w, f.neg, sch()))));
    EXPECT_GT(g.pref_weight, 0.0);
    EXPECT_LE(g.pref_weight, 0.5);
    // Norm balance: ||beta_r delta_pref|| = gamma sigmoid(-dr) ||delta_cls||.
    const double lhs = (g.beta_r * g.delta_pref).norm();
    const double rhs = f.gamma * logistic(-p.outcome.delta_r) * g.delta_cls.norm();
    EXPECT_LE(std::abs(lhs - rhs), 1e-12 * std::max(1.0, rhs));
  }
}

TEST(TotalUpdate, ReductionsAndIndependentRecomputation) {
  Rng rng(11, "t");
  for (int i = 0; i < 100; ++i) {
    GuidanceTerms g;
    g.delta_gen = rng.normal_vec(3);
    g.delta_cls = rng.normal_vec(3);
    g.delta_pref = rng.normal_vec(3);
    g.beta_r = rng.uniform();
    const double gamma = 10.0 * rng.uniform();
    const Vec u = total_update(g, gamma);
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(u[k], g.delta_gen[k] + gamma * g.delta_cls[k] + g.beta_r * g.delta_pref[k], 1e-13);
    }
    g.beta_r = 0.0;
    EXPECT_TRUE(bit_equal(total_update(g, 0.0), g.delta_gen));
  }
}

TEST(DreamDpoBracket, PreferenceTermAtUnitWeightPlusControlVariate) {
  Rng rng(12, "t");
  for (int i = 0; i < 1000; ++i) {
    const Fixture f = random_fixture(rng, rng.uniform_int(1, 3));
    const int t = rng.uniform_int(1, 1000);
    const WinLosePair p = make_pair_from_noises(rng.normal_vec(2), t, rng.normal_vec(2), rng.normal_vec(2), f.model,
                                                f.reward, f.y, f.neg, 1.0, sch());
    const Vec pref = preference_guidance(p, f.model, f.y, f.neg, 1.0, sch());
    const Vec ours = pref - (p.eps_win - p.eps_lose);
    const Vec bracket = (eps_predict(f.model, {p.x_t_win, t}, f.y, sch()) - p.eps_win) -
                        (eps_predict(f.model, {p.x_t_lose, t}, f.y, sch()) - p.eps_lose);
    EXPECT_LE((ours - bracket).norm(), 1e-12);
  }
}
