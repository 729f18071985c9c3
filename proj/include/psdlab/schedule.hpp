#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "psdlab/errors.hpp"
#include "psdlab/types.hpp"

namespace psdlab {

enum class ScheduleKind { VariancePreserving };

/// Tabulated noise schedule.  Index 0 is clean data (alpha = 1, sigma = 0),
/// index num_steps is the noisiest level.
struct Schedule {
  int num_steps = 0;
  std::vector<double> alpha;
  std::vector<double> sigma;
  ScheduleKind kind = ScheduleKind::VariancePreserving;
  double beta_min = 0.0;
  double beta_max = 0.0;

  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t)); }
  double sigma_at(int t) const { return sigma.at(static_cast<std::size_t>(t)); }

  void check_index(int t) const {
    if (t < 0 || t > num_steps) {
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                       std::to_string(num_steps) + "]");
    }
  }
};

/// Linear-beta variance-preserving schedule:
/// alpha_t = prod_{s<=t} sqrt(1 - beta_s), sigma_t = sqrt(1 - alpha_t^2).
inline Schedule build_schedule(ScheduleKind kind, int num_steps, double beta_min, double beta_max) {
  if (num_steps < 2) throw ParameterError("build_schedule: num_steps must be >= 2");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw ParameterError("build_schedule: need 0 < beta_min <= beta_max < 1");
  }
  Schedule s;
  s.kind = kind;
  s.num_steps = num_steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.alpha.resize(static_cast<std::size_t>(num_steps) + 1);
  s.sigma.resize(static_cast<std::size_t>(num_steps) + 1);
  s.alpha[0] = 1.0;
  s.sigma[0] = 0.0;
  double a = 1.0;
  for (int t = 1; t <= num_steps; ++t) {
    const double beta = beta_min + (beta_max - beta_min) * double(t - 1) / double(num_steps - 1);
    a *= std::sqrt(1.0 - beta);
    s.alpha[t] = a;
    s.sigma[t] = std::sqrt(1.0 - a * a);
  }
  return s;
}

inline Schedule default_schedule() {
  return build_schedule(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2);
}

struct NoisyState {
  Vec x;
  int t = 0;
};

/// x_t = alpha_t * x0 + sigma_t * eps
inline NoisyState add_noise(const Vec& x0, int t, const Vec& eps, const Schedule& schedule) {
  detail::require_same_size(x0.size(), eps.size(), "add_noise");
  schedule.check_index(t);
  return {schedule.alpha_at(t) * x0 + schedule.sigma_at(t) * eps, t};
}

/// One-step clean prediction x0_hat = (x_t - sigma_t * eps_hat) / alpha_t.
inline Vec tweedie_predict(const NoisyState& state, const Vec& eps_hat, const Schedule& schedule) {
  detail::require_same_size(state.x.size(), eps_hat.size(), "tweedie_predict");
  schedule.check_index(state.t);
  const double a = schedule.alpha_at(state.t);
  if (!(a > 0.0)) throw NumericalError("tweedie_predict: alpha_t = 0 at t=" + std::to_string(state.t));
  return (state.x - schedule.sigma_at(state.t) * eps_hat) / a;
}

/// Deterministic (eta = 0) DDIM move from state.t to t_next <= state.t.
/// t_next == state.t is the fixed point and returns the state unchanged.
inline NoisyState ddim_step(const NoisyState& state, const Vec& eps_hat, int t_next,
                            const Schedule& schedule) {
  schedule.check_index(t_next);
  if (t_next > state.t) {
    throw OrderingError("ddim_step: t_next=" + std::to_string(t_next) + " > t=" +
                        std::to_string(state.t));
  }
  detail::require_same_size(state.x.size(), eps_hat.size(), "ddim_step");
  if (t_next == state.t) return state;
  const Vec x0_hat = tweedie_predict(state, eps_hat, schedule);
  return {schedule.alpha_at(t_next) * x0_hat + schedule.sigma_at(t_next) * eps_hat, t_next};
}

/// Evenly spaced decreasing timesteps from `t_start` down to 0 (num_steps + 1 entries).
inline std::vector<int> ddim_timesteps(int t_start, int num_steps) {
  if (num_steps < 1) throw ParameterError("ddim_timesteps: num_steps must be >= 1");
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(num_steps) + 1);
  for (int i = num_steps; i >= 0; --i) {
    ts.push_back(static_cast<int>(std::lround(double(t_start) * double(i) / double(num_steps))));
  }
  return ts;
}

}  // namespace psdlab
