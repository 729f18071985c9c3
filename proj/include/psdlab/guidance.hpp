#pragma once

#include <string>

#include "psdlab/errors.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/rng.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"
#include "psdlab/types.hpp"

namespace psdlab {

enum class NoisingKind { Independent, InversionPredicted };

/// How the two sibling noises of a pair are produced.  InversionPredicted
/// replaces the first noise by eps_phi(x_s, y, s) at the noisier step
/// s = t + tau, tau ~ U{tau_min, ..., tau_max}.
struct NoisingStrategy {
  NoisingKind kind = NoisingKind::Independent;
  int tau_min = 100;
  int tau_max = 300;
};

struct WinLosePair {
  Vec x_c;
  int t = 0;
  int tau = 0;
  Vec x_t_win, x_t_lose;
  Vec eps_win, eps_lose;
  Vec x0hat_win, x0hat_lose;
  PreferenceOutcome outcome;
};

struct GuidanceTerms {
  Vec delta_gen;
  Vec delta_cls;
  Vec delta_pref;
  double beta_r = 0.0;
  double pref_weight = 0.5;  // sigmoid(-delta_r)
  double norm_qref = 0.0;    // ||eps_win - eps_lose||, the dropped reference-marginal term
};

/// Builds and ranks a pair from two explicit noises.  Ranking uses the
/// guided one-step prediction of each sibling.
template <NoisePredictor M>
WinLosePair make_pair_from_noises(const Vec& x_c, int t, const Vec& eps_a, const Vec& eps_b, const M& model,
                                  const RewardSpec& rewards, const Embedding& y, const Embedding& neg, double gamma,
                                  const Schedule& schedule) {
  if (!x_c.allFinite()) throw NumericalError("make_pair: non-finite rendering");
  const NoisyState xa = add_noise(x_c, t, eps_a, schedule);
  const NoisyState xb = add_noise(x_c, t, eps_b, schedule);
  const Vec x0a = tweedie_predict(xa, cfg_eps(model, xa, y, neg, gamma, schedule), schedule);
  const Vec x0b = tweedie_predict(xb, cfg_eps(model, xb, y, neg, gamma, schedule), schedule);
  const PreferenceOutcome outcome = rank_pair(rewards, y, x0a, x0b);

  WinLosePair pair;
  pair.x_c = x_c;
  pair.t = t;
  pair.outcome = outcome;
  if (outcome.winner_index == 0) {
    pair.x_t_win = xa.x, pair.x_t_lose = xb.x;
    pair.eps_win = eps_a, pair.eps_lose = eps_b;
    pair.x0hat_win = x0a, pair.x0hat_lose = x0b;
  } else {
    pair.x_t_win = xb.x, pair.x_t_lose = xa.x;
    pair.eps_win = eps_b, pair.eps_lose = eps_a;
    pair.x0hat_win = x0b, pair.x0hat_lose = x0a;
  }
  return pair;
}

/// Draws the sibling noises from the run's streams.  Both strategies consume
/// the same draws, so paired runs stay aligned across strategies.
template <NoisePredictor M>
WinLosePair make_pair(const Vec& x_c, int t, const NoisingStrategy& noising, const M& model,
                      const RewardSpec& rewards, const Embedding& y, const Embedding& neg, double gamma,
                      const Schedule& schedule, RngStreams& rng) {
  schedule.check_index(t);
  Vec eps_a = rng.noise_a.normal_vec(x_c.size());
  const Vec eps_b = rng.noise_b.normal_vec(x_c.size());
  int tau = 0;
  if (noising.kind == NoisingKind::InversionPredicted) {
    if (noising.tau_min < 0 || noising.tau_max < noising.tau_min) {
      throw ParameterError("make_pair: invalid tau interval");
    }
    tau = rng.tau.uniform_int(noising.tau_min, noising.tau_max);
    const int s = t + tau;
    if (s > schedule.num_steps) {
      throw RangeError("make_pair: t + tau = " + std::to_string(s) + " exceeds T = " +
                       std::to_string(schedule.num_steps));
    }
    const NoisyState xs = add_noise(x_c, s, eps_a, schedule);
    eps_a = eps_predict(model, xs, y, schedule);
  }
  WinLosePair pair = make_pair_from_noises(x_c, t, eps_a, eps_b, model, rewards, y, neg, gamma, schedule);
  pair.tau = tau;
  return pair;
}

/// delta_pref = eps~(x_t^w) - eps~(x_t^l), both guided.
template <NoisePredictor M>
Vec preference_guidance(const WinLosePair& pair, const M& model, const Embedding& y, const Embedding& neg,
                        double gamma, const Schedule& schedule) {
  const NoisyState w{pair.x_t_win, pair.t};
  const NoisyState l{pair.x_t_lose, pair.t};
  return cfg_eps(model, w, y, neg, gamma, schedule) - cfg_eps(model, l, y, neg, gamma, schedule);
}

/// beta_r = gamma * ||delta_cls|| / ||delta_pref|| * sigmoid(-delta_r), and 0
/// when delta_pref vanishes.
inline double adaptive_pref_scale(double gamma, double norm_cls, double norm_pref, double delta_r) {
  if (!(norm_pref > 0.0)) return 0.0;
  return gamma * (norm_cls / norm_pref) * logistic(-delta_r);
}

template <NoisePredictor M>
GuidanceTerms compose_terms(const WinLosePair& pair, const M& model, const Embedding& y, const Embedding& neg,
                            double gamma, const Schedule& schedule) {
  const NoisyState w{pair.x_t_win, pair.t};
  const Embedding uncond = Embedding::unconditional(y.v.size());
  const Vec eps_uncond = eps_predict(model, w, uncond, schedule);
  const Vec eps_y = eps_predict(model, w, y, schedule);
  const Vec eps_neg = eps_predict(model, w, neg, schedule);

  GuidanceTerms terms;
  terms.delta_gen = eps_uncond - pair.eps_win;
  terms.delta_cls = eps_y - eps_neg;
  terms.delta_pref = preference_guidance(pair, model, y, neg, gamma, schedule);
  terms.pref_weight = logistic(-pair.outcome.delta_r);
  terms.beta_r = adaptive_pref_scale(gamma, terms.delta_cls.norm(), terms.delta_pref.norm(), pair.outcome.delta_r);
  terms.norm_qref = (pair.eps_win - pair.eps_lose).norm();
  return terms;
}

/// delta_gen + gamma delta_cls + beta_r delta_pref: the data-space cotangent.
inline Vec total_update(const GuidanceTerms& terms, double gamma) {
  return terms.delta_gen + gamma * terms.delta_cls + terms.beta_r * terms.delta_pref;
}

}  // namespace psdlab
