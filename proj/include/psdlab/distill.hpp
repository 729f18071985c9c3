#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "psdlab/adam.hpp"
#include "psdlab/errors.hpp"
#include "psdlab/guidance.hpp"
#include "psdlab/representation.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/rng.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"

namespace psdlab {

/// PSD is the full method; NoPref is PSD without the preference term (plain
/// guided distillation over the same ranked pair).  The rest are baselines.
enum class Method { PSD, SDS, CSD, DreamDPO, DreamReward, PrefOnly, NoPref };

enum class TimeWeight { Unit, SigmaSquared };

struct AnnealSpec {
  double t_max_frac = 0.98;
  double t_min_frac = 0.02;
};

struct DistillConfig {
  Method method = Method::PSD;
  double gamma = 7.5;
  double beta = 1.0;  // RLHF temperature; only the diagnostics read it
  double lr_theta = 0.002;
  double lr_neg = 0.01;
  int neg_update_interval = 1;
  int num_iters = 500;
  AnnealSpec anneal;
  TimeWeight w_t = TimeWeight::Unit;
  double lambda_r = 1.0;
  int tau_min = 100;
  int tau_max = 300;
  NoisingKind noising = NoisingKind::Independent;
  int camera_batch = 1;
  std::optional<double> beta_r_override;
  AdamSpec adam;
  std::uint64_t seed = 0;

  NoisingStrategy noising_strategy() const { return {noising, tau_min, tau_max}; }

  void validate() const {
    if (!(anneal.t_max_frac > 0.0 && anneal.t_max_frac <= 1.0 && anneal.t_min_frac > 0.0 &&
          anneal.t_min_frac <= 1.0 && anneal.t_max_frac >= anneal.t_min_frac)) {
      throw ParameterError("DistillConfig: anneal fractions must lie in (0,1] with t_max_frac >= t_min_frac");
    }
    if (!(lr_theta >= 0.0) || !(lr_neg >= 0.0)) throw ParameterError("DistillConfig: learning rates must be >= 0");
    if (neg_update_interval < 1) throw ParameterError("DistillConfig: neg_update_interval must be >= 1");
    if (num_iters < 0) throw ParameterError("DistillConfig: num_iters must be >= 0");
    if (!(gamma >= 0.0)) throw ParameterError("DistillConfig: gamma must be >= 0");
    if (camera_batch < 1) throw ParameterError("DistillConfig: camera_batch must be >= 1");
    if (tau_min < 0 || tau_max < tau_min) throw ParameterError("DistillConfig: invalid tau interval");
  }
};

/// Analytic rewards for one run: the optimised target plus held-out ones
/// that are only observed.
struct RewardSet {
  RewardSpec target;
  std::vector<RewardSpec> heldout;
};

struct OptimState {
  Representation rep;
  Embedding neg;
  int iter = 0;
  AdamState theta_opt;
  AdamState neg_opt;

  static OptimState start(Representation rep, Embedding neg) {
    OptimState s;
    s.theta_opt = AdamState::zeros(rep.theta.size());
    s.neg_opt = AdamState::zeros(neg.v.size());
    s.rep = std::move(rep);
    s.neg = std::move(neg);
    return s;
  }
};

/// Everything logged for one iteration.
struct StepRecord {
  int iter = 0;
  int t = 0;
  int camera = 0;
  double r_win = 0.0;
  double r_lose = 0.0;
  double delta_r = 0.0;
  double beta_r = 0.0;
  double pref_weight = 0.5;
  double norm_gen = 0.0;
  double norm_cls = 0.0;
  double norm_pref = 0.0;
  double norm_qref = 0.0;
  double reward_target = 0.0;
  std::vector<double> reward_heldout;
  bool neg_updated = false;
  double wall_seconds = 0.0;
};

/// Linear anneal from t_max_frac*T (first iteration) to t_min_frac*T (last).
inline int anneal_timestep(int iter, int num_iters, const AnnealSpec& anneal, const Schedule& schedule) {
  const double T = schedule.num_steps;
  const double frac = num_iters > 1 ? double(iter) / double(num_iters - 1) : 0.0;
  const double tf = anneal.t_max_frac + (anneal.t_min_frac - anneal.t_max_frac) * frac;
  const long t = std::lround(T * tf);
  return static_cast<int>(std::clamp<long>(t, 1, schedule.num_steps));
}

inline double time_weight(TimeWeight w, int t, const Schedule& schedule) {
  return w == TimeWeight::SigmaSquared ? schedule.sigma_at(t) * schedule.sigma_at(t) : 1.0;
}

/// Mean reward of the current renderings over all cameras.
inline double rendered_reward(const Representation& rep, const RewardSpec& spec, const Embedding& y) {
  double acc = 0.0;
  for (std::size_t c = 0; c < rep.num_cameras(); ++c) acc += reward(spec, y, render(rep, int(c)).x_c);
  return acc / double(rep.num_cameras());
}

/// grad_n r(y, x0_hat(n)) for the winner's guided one-step prediction:
/// x0_hat = (x_t - sigma eps~)/alpha, eps~ = eps(n) + gamma (eps(y) - eps(n)).
template <NoisePredictor M>
Vec neg_embedding_gradient(const WinLosePair& pair, const M& model, const RewardSpec& target, const Embedding& y,
                           const Embedding& neg, double gamma, const Schedule& schedule) {
  const NoisyState w{pair.x_t_win, pair.t};
  const double a = schedule.alpha_at(pair.t);
  const double s = schedule.sigma_at(pair.t);
  const Vec x0_hat = tweedie_predict(w, cfg_eps(model, w, y, neg, gamma, schedule), schedule);
  const Vec grad_r = reward_gradient(target, y, x0_hat);
  const double dx0_deps = -s / a;          // Tweedie
  const double deps_deneg = 1.0 - gamma;   // guidance
  const Mat jac = eps_embedding_jacobian(model, w, neg, schedule);
  return jac.transpose() * (deps_deneg * dx0_deps * grad_r);
}

/// Ascends the target reward in the shared negative embedding using every
/// pair of the current iteration.
template <NoisePredictor M>
void neg_embed_step(OptimState& state, const DistillConfig& config, const M& model, const RewardSet& rewards,
                    const Embedding& y, const Schedule& schedule, const std::vector<WinLosePair>& pairs) {
  if (!(config.lr_neg > 0.0)) throw ParameterError("neg_embed_step: lr_neg must be > 0");
  if (pairs.empty()) return;
  Vec grad = Vec::Zero(state.neg.v.size());
  for (const auto& p : pairs) grad += neg_embedding_gradient(p, model, rewards.target, y, state.neg, config.gamma, schedule);
  grad /= double(pairs.size());
  adam_ascend(state.neg.v, grad, config.lr_neg, state.neg_opt, config.adam);
  if (!state.neg.v.allFinite()) {
    throw NumericalError("iteration " + std::to_string(state.iter) + ": negative embedding became non-finite");
  }
}

namespace detail {

inline bool uses_pairs(Method m) {
  return m == Method::PSD || m == Method::NoPref || m == Method::DreamDPO || m == Method::PrefOnly;
}

inline bool trains_negative(Method m) { return m == Method::PSD || m == Method::NoPref; }

struct CameraUpdate {
  Vec cotangent;
  std::optional<WinLosePair> pair;
  double r_win = 0.0, r_lose = 0.0, delta_r = 0.0, beta_r = 0.0, pref_weight = 0.5;
  double norm_gen = 0.0, norm_cls = 0.0, norm_pref = 0.0, norm_qref = 0.0;
};

inline void log_pair(CameraUpdate& cu, const WinLosePair& pair) {
  cu.r_win = pair.outcome.reward_win;
  cu.r_lose = pair.outcome.reward_lose;
  cu.delta_r = pair.outcome.delta_r;
  cu.pref_weight = logistic(-pair.outcome.delta_r);
}

/// Data-space update of one method for one rendering.
template <NoisePredictor M>
CameraUpdate camera_update(const Vec& x_c, int t, const OptimState& state, const DistillConfig& config, const M& model,
                           const RewardSet& rewards, const Embedding& y, const Schedule& schedule, RngStreams& rng) {
  CameraUpdate cu;
  const double gamma = config.gamma;
  const double w = time_weight(config.w_t, t, schedule);
  switch (config.method) {
    case Method::PSD: {
      WinLosePair pair = make_pair(x_c, t, config.noising_strategy(), model, rewards.target, y, state.neg, gamma,
                                   schedule, rng);
      GuidanceTerms terms = compose_terms(pair, model, y, state.neg, gamma, schedule);
      if (config.beta_r_override) terms.beta_r = *config.beta_r_override;
      cu.cotangent = total_update(terms, gamma);
      log_pair(cu, pair);
      cu.beta_r = terms.beta_r;
      cu.norm_gen = terms.delta_gen.norm();
      cu.norm_cls = terms.delta_cls.norm();
      cu.norm_pref = terms.delta_pref.norm();
      cu.norm_qref = terms.norm_qref;
      cu.pair = std::move(pair);
      break;
    }
    case Method::NoPref: {
      // Guided distillation on the ranked pair, without touching delta_pref.
      WinLosePair pair = make_pair(x_c, t, config.noising_strategy(), model, rewards.target, y, state.neg, gamma,
                                   schedule, rng);
      const NoisyState xw{pair.x_t_win, t};
      const Vec eps_uncond = eps_predict(model, xw, Embedding::unconditional(y.v.size()), schedule);
      const Vec delta_gen = eps_uncond - pair.eps_win;
      const Vec delta_cls = eps_predict(model, xw, y, schedule) - eps_predict(model, xw, state.neg, schedule);
      cu.cotangent = delta_gen + gamma * delta_cls;
      log_pair(cu, pair);
      cu.norm_gen = delta_gen.norm();
      cu.norm_cls = delta_cls.norm();
      cu.norm_qref = (pair.eps_win - pair.eps_lose).norm();
      cu.pair = std::move(pair);
      break;
    }
    case Method::PrefOnly: {
      WinLosePair pair = make_pair(x_c, t, config.noising_strategy(), model, rewards.target, y, state.neg, gamma,
                                   schedule, rng);
      GuidanceTerms terms = compose_terms(pair, model, y, state.neg, gamma, schedule);
      if (config.beta_r_override) terms.beta_r = *config.beta_r_override;
      cu.cotangent = terms.beta_r * terms.delta_pref;
      log_pair(cu, pair);
      cu.beta_r = terms.beta_r;
      cu.norm_cls = terms.delta_cls.norm();
      cu.norm_pref = terms.delta_pref.norm();
      cu.norm_qref = terms.norm_qref;
      cu.pair = std::move(pair);
      break;
    }
    case Method::DreamDPO: {
      WinLosePair pair = make_pair(x_c, t, config.noising_strategy(), model, rewards.target, y, state.neg, gamma,
                                   schedule, rng);
      const Vec win = eps_predict(model, NoisyState{pair.x_t_win, t}, y, schedule) - pair.eps_win;
      const Vec lose = eps_predict(model, NoisyState{pair.x_t_lose, t}, y, schedule) - pair.eps_lose;
      cu.cotangent = w * (win - lose);
      log_pair(cu, pair);
      cu.norm_pref = (win - lose).norm();
      cu.norm_qref = (pair.eps_win - pair.eps_lose).norm();
      cu.pair = std::move(pair);
      break;
    }
    case Method::SDS:
    case Method::DreamReward: {
      const Vec eps = rng.noise_a.normal_vec(x_c.size());
      const NoisyState xt = add_noise(x_c, t, eps, schedule);
      const Vec eps_y = eps_predict(model, xt, y, schedule);
      const Vec x0_hat = tweedie_predict(xt, eps_y, schedule);
      Vec guided = eps_y;
      if (config.method == Method::DreamReward) {
        guided = eps_y - config.lambda_r * reward_gradient(rewards.target, y, x0_hat);
      }
      cu.cotangent = w * (guided - eps);
      cu.r_win = cu.r_lose = reward(rewards.target, y, x0_hat);
      cu.norm_gen = (guided - eps).norm();
      break;
    }
    case Method::CSD: {
      const Vec eps = rng.noise_a.normal_vec(x_c.size());
      const NoisyState xt = add_noise(x_c, t, eps, schedule);
      const Vec eps_y = eps_predict(model, xt, y, schedule);
      const Vec delta_cls = eps_y - eps_predict(model, xt, state.neg, schedule);
      cu.cotangent = gamma * delta_cls;
      cu.r_win = cu.r_lose = reward(rewards.target, y, tweedie_predict(xt, eps_y, schedule));
      cu.norm_cls = delta_cls.norm();
      break;
    }
  }
  return cu;
}

}  // namespace detail

/// One iteration of any method on the shared render / noise / pullback
/// machinery.  Advances `state` and returns the iteration's log record.
template <NoisePredictor M>
StepRecord distill_step(OptimState& state, const DistillConfig& config, const M& model, const RewardSet& rewards,
                        const Embedding& y, const Schedule& schedule, RngStreams& rng) {
  const auto started = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.iter = state.iter;
  try {
    rec.t = anneal_timestep(state.iter, std::max(config.num_iters, 1), config.anneal, schedule);
    Vec grad_theta = Vec::Zero(state.rep.theta.size());
    std::vector<WinLosePair> pairs;
    for (int b = 0; b < config.camera_batch; ++b) {
      const int cam = state.rep.mode == RepresentationMode::MultiView ? sample_camera(state.rep, rng.camera) : 0;
      const Vec x_c = render(state.rep, cam).x_c;
      detail::CameraUpdate cu = detail::camera_update(x_c, rec.t, state, config, model, rewards, y, schedule, rng);
      grad_theta += render_vjp(state.rep, cam, cu.cotangent);
      if (b == 0) {
        rec.camera = cam;
        rec.r_win = cu.r_win, rec.r_lose = cu.r_lose, rec.delta_r = cu.delta_r;
        rec.beta_r = cu.beta_r, rec.pref_weight = cu.pref_weight;
        rec.norm_gen = cu.norm_gen, rec.norm_cls = cu.norm_cls;
        rec.norm_pref = cu.norm_pref, rec.norm_qref = cu.norm_qref;
      }
      if (cu.pair) pairs.push_back(std::move(*cu.pair));
    }
    grad_theta /= double(config.camera_batch);
    if (!grad_theta.allFinite()) throw NumericalError("non-finite parameter gradient");
    adam_descend(state.rep.theta, grad_theta, config.lr_theta, state.theta_opt, config.adam);
    if (!state.rep.theta.allFinite()) throw NumericalError("parameters became non-finite");

    if (detail::trains_negative(config.method) && config.lr_neg > 0.0 &&
        state.iter % config.neg_update_interval == 0) {
      neg_embed_step(state, config, model, rewards, y, schedule, pairs);
      rec.neg_updated = true;
    }
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    if (msg.rfind("iteration ", 0) == 0) throw;
    throw NumericalError("iteration " + std::to_string(state.iter) + ": " + msg);
  }
  rec.reward_target = rendered_reward(state.rep, rewards.target, y);
  for (const auto& h : rewards.heldout) rec.reward_heldout.push_back(rendered_reward(state.rep, h, y));
  ++state.iter;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

/// One PSD iteration.  The negative embedding is stepped only on iterations
/// divisible by neg_update_interval.
template <NoisePredictor M>
StepRecord psd_step(OptimState& state, const DistillConfig& config, const M& model, const RewardSet& rewards,
                    const Embedding& y, const Schedule& schedule, RngStreams& rng) {
  if (config.method != Method::PSD) throw ParameterError("psd_step: method must be PSD");
  return distill_step(state, config, model, rewards, y, schedule, rng);
}

template <NoisePredictor M>
StepRecord baseline_step(OptimState& state, const DistillConfig& config, const M& model, const RewardSet& rewards,
                         const Embedding& y, const Schedule& schedule, RngStreams& rng) {
  if (config.method == Method::PSD) throw ParameterError("baseline_step: method must not be PSD");
  return distill_step(state, config, model, rewards, y, schedule, rng);
}

struct RunTrace {
  std::vector<Vec> thetas;  // thetas[0] is the initial value
  std::vector<Vec> negs;
  std::vector<StepRecord> records;
  double initial_reward_target = 0.0;
  std::vector<double> initial_reward_heldout;
};

/// Runs config.num_iters iterations from `state`, recording every step.
template <NoisePredictor M>
RunTrace distill_run(OptimState& state, const DistillConfig& config, const M& model, const RewardSet& rewards,
                     const Embedding& y, const Schedule& schedule, RngStreams& rng) {
  config.validate();
  RunTrace trace;
  trace.initial_reward_target = rendered_reward(state.rep, rewards.target, y);
  for (const auto& h : rewards.heldout) trace.initial_reward_heldout.push_back(rendered_reward(state.rep, h, y));
  trace.thetas.push_back(state.rep.theta);
  trace.negs.push_back(state.neg.v);
  while (state.iter < config.num_iters) {
    trace.records.push_back(distill_step(state, config, model, rewards, y, schedule, rng));
    trace.thetas.push_back(state.rep.theta);
    trace.negs.push_back(state.neg.v);
  }
  return trace;
}

/// 2D parameterised generation: a raw latent theta ~ N(0, I) optimised for
/// num_iters scheduled steps with time-shifted, inversion-predicted noise.
template <NoisePredictor M>
RunTrace image_gen_run(const DistillConfig& config, const M& model, const RewardSet& rewards, const Embedding& y,
                       const Embedding& neg_init, const Schedule& schedule, RngStreams& rng) {
  if (config.method != Method::PSD && config.method != Method::NoPref) {
    throw ParameterError("image_gen_run: method must be PSD or NoPref");
  }
  config.validate();
  const int t_first = anneal_timestep(0, std::max(config.num_iters, 1), config.anneal, schedule);
  if (config.noising == NoisingKind::InversionPredicted && t_first + config.tau_max > schedule.num_steps) {
    throw RangeError("image_gen_run: first timestep " + std::to_string(t_first) + " + tau_max " +
                     std::to_string(config.tau_max) + " exceeds T");
  }
  OptimState state = OptimState::start(make_raw_latent(rng.init.normal_vec(model.dim())), neg_init);
  return distill_run(state, config, model, rewards, y, schedule, rng);
}

}  // namespace psdlab
