#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psdlab/errors.hpp"
#include "psdlab/guidance.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"

namespace psdlab {

struct DiagnosticReport {
  std::string name;
  std::map<std::string, double> scalar_metrics;
  std::optional<bool> pass;  // set only when a threshold was supplied
};

namespace detail {

inline double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace detail

/// Compares the trained negative branch against the reward-tilted target
///   eps(x_t, n) ~= eps(x_t, y) + sigma_t beta / (gamma - 1) * grad r(x_t).
/// gamma - 1 is the extrapolation weight beyond the conditional branch in
/// eps(n) + gamma (eps(y) - eps(n)); the condition needs gamma > 1.
template <NoisePredictor M>
DiagnosticReport check_optimal_negative_condition(const M& model, const Embedding& trained_neg, const Embedding& y,
                                                  double gamma, double beta, const RewardSpec& rewards,
                                                  const Schedule& schedule,
                                                  const std::vector<NoisyState>& probe_states,
                                                  std::optional<double> min_cosine = std::nullopt) {
  if (!(gamma > 1.0)) throw ParameterError("check_optimal_negative_condition: gamma must exceed 1");
  if (probe_states.empty()) throw ParameterError("check_optimal_negative_condition: no probe states");
  double residual = 0.0, branch_gap = 0.0, cos_sum = 0.0, target_norm = 0.0;
  for (const auto& st : probe_states) {
    const double s = schedule.sigma_at(st.t);
    const Vec eps_n = eps_predict(model, st, trained_neg, schedule);
    const Vec eps_y = eps_predict(model, st, y, schedule);
    const Vec grad_r = reward_gradient(rewards, y, st.x);
    const Vec target = eps_y + (s * beta / (gamma - 1.0)) * grad_r;
    residual += (eps_n - target).norm();
    branch_gap += (eps_n - eps_y).norm();
    target_norm += (target - eps_y).norm();
    cos_sum += detail::cosine(eps_n - eps_y, grad_r);
  }
  const double n = double(probe_states.size());
  DiagnosticReport rep;
  rep.name = "optimal_negative_condition";
  rep.scalar_metrics["mean_residual"] = residual / n;
  rep.scalar_metrics["mean_branch_gap"] = branch_gap / n;
  rep.scalar_metrics["mean_target_shift"] = target_norm / n;
  rep.scalar_metrics["mean_cosine"] = cos_sum / n;
  rep.scalar_metrics["num_probes"] = n;
  if (min_cosine) rep.pass = (cos_sum / n) >= *min_cosine;
  return rep;
}

/// Inner product between -delta_pref (the direction the parameter step moves
/// the sample) and the reward gradient at the winner's one-step prediction.
inline DiagnosticReport check_guidance_direction(const std::vector<WinLosePair>& pairs,
                                                 const std::vector<GuidanceTerms>& terms, const RewardSpec& rewards,
                                                 const Embedding& y,
                                                 std::optional<double> min_fraction_positive = std::nullopt) {
  if (pairs.size() != terms.size()) throw ShapeError("check_guidance_direction: pairs/terms length mismatch");
  if (pairs.empty()) throw ParameterError("check_guidance_direction: empty batch");
  double sum = 0.0, sum_sq = 0.0, pos = 0.0, cos_sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Vec g = reward_gradient(rewards, y, pairs[i].x0hat_win);
    const Vec dir = -terms[i].delta_pref;
    const double ip = dir.dot(g);
    sum += ip;
    sum_sq += ip * ip;
    if (ip > 0.0) pos += 1.0;
    cos_sum += detail::cosine(dir, g);
  }
  const double n = double(pairs.size());
  const double mean = sum / n;
  const double var = n > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
  const double frac = pos / n;
  const double frac_se = std::sqrt(frac * (1.0 - frac) / n);
  DiagnosticReport rep;
  rep.name = "guidance_direction";
  rep.scalar_metrics["mean_inner_product"] = mean;
  rep.scalar_metrics["stderr_inner_product"] = std::sqrt(var / n);
  rep.scalar_metrics["fraction_positive"] = frac;
  rep.scalar_metrics["fraction_positive_ci_low"] = std::max(0.0, frac - 1.96 * frac_se);
  rep.scalar_metrics["fraction_positive_ci_high"] = std::min(1.0, frac + 1.96 * frac_se);
  rep.scalar_metrics["mean_cosine"] = cos_sum / n;
  rep.scalar_metrics["num_pairs"] = n;
  if (min_fraction_positive) rep.pass = frac >= *min_fraction_positive;
  return rep;
}

}  // namespace psdlab
