#pragma once

// Brute-force and closed-form reference computations.  They share parameter
// structs and schedule tables with the main code but never call into it.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "psdlab/errors.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"
#include "psdlab/types.hpp"

namespace psdlab::oracle {

struct FiniteDiffSpec {
  double h = 1e-4;  // scaled per coordinate by max(|x_i|, 1)
  double rel_tol = 1e-5;

  void validate() const {
    if (!(h > 0.0) || !(rel_tol > 0.0)) throw OracleError("FiniteDiffSpec: h and rel_tol must be positive");
  }
};

using ScalarField = std::function<double(const Vec&)>;
using VectorField = std::function<Vec(const Vec&)>;

inline double step_for(double xi, const FiniteDiffSpec& spec) { return spec.h * std::max(std::abs(xi), 1.0); }

/// Central-difference gradient.
inline Vec fd_gradient(const ScalarField& f, const Vec& x, const FiniteDiffSpec& spec = {}) {
  spec.validate();
  Vec g(x.size());
  Vec xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = step_for(x[i], spec);
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw OracleError("fd_gradient: non-finite function value at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Central-difference Jacobian, column j = d f / d x_j.
inline Mat fd_jacobian(const VectorField& f, const Vec& x, const FiniteDiffSpec& spec = {}) {
  spec.validate();
  const Vec f0 = f(x);
  Mat J(f0.size(), x.size());
  Vec xp = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = step_for(x[j], spec);
    xp[j] = x[j] + h;
    const Vec fp = f(xp);
    xp[j] = x[j] - h;
    const Vec fm = f(xp);
    xp[j] = x[j];
    if (!fp.allFinite() || !fm.allFinite()) {
      throw OracleError("fd_jacobian: non-finite function value at coordinate " + std::to_string(j));
    }
    J.col(j) = (fp - fm) / (2.0 * h);
  }
  return J;
}

/// Relative error ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const Vec& a, const Vec& b, double floor = 1e-12) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

inline double relative_error(const Mat& a, const Mat& b, double floor = 1e-12) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

/// log of sum_k w_k N(x; alpha m_k(e), alpha^2 Sigma_k + sigma^2 I), via
/// explicit inverses and determinants.
inline double gmm_log_density(const GmmScoreModel& model, const Vec& x, const Vec& e, double alpha, double sigma) {
  const Eigen::Index d = x.size();
  std::vector<double> terms;
  for (std::size_t k = 0; k < model.weights.size(); ++k) {
    Mat C = alpha * alpha * model.covariances[k];
    for (Eigen::Index i = 0; i < d; ++i) C(i, i) += sigma * sigma;
    const Vec mean = alpha * (model.cond_maps[k] * e + model.offsets[k]);
    const Vec r = x - mean;
    const double quad = r.dot(C.inverse() * r);
    terms.push_back(std::log(model.weights[k]) - 0.5 * quad - 0.5 * std::log(C.determinant()) -
                    0.5 * double(d) * std::log(2.0 * std::numbers::pi));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double t : terms) mx = std::max(mx, t);
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - mx);
  return mx + std::log(acc);
}

/// Mixture score by explicit responsibilities and inverses.
inline Vec gmm_score(const GmmScoreModel& model, const Vec& x, const Vec& e, double alpha, double sigma) {
  const Eigen::Index d = x.size();
  const std::size_t K = model.weights.size();
  std::vector<double> logw(K);
  std::vector<Vec> pulls(K);
  for (std::size_t k = 0; k < K; ++k) {
    Mat C = alpha * alpha * model.covariances[k] + sigma * sigma * Mat::Identity(d, d);
    const Mat Cinv = C.inverse();
    const Vec r = x - alpha * (model.cond_maps[k] * e + model.offsets[k]);
    pulls[k] = -Cinv * r;
    logw[k] = std::log(model.weights[k]) - 0.5 * r.dot(Cinv * r) - 0.5 * std::log(C.determinant());
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double z = 0.0;
  Vec s = Vec::Zero(d);
  for (std::size_t k = 0; k < K; ++k) {
    const double wk = std::exp(logw[k] - mx);
    z += wk;
    s += wk * pulls[k];
  }
  return s / z;
}

/// Single-Gaussian noised score -(alpha^2 Sigma + sigma^2 I)^{-1} (x - alpha m).
inline Vec gaussian_score(const Vec& mean, const Mat& cov, const Vec& x, double alpha, double sigma) {
  const Mat C = alpha * alpha * cov + sigma * sigma * Mat::Identity(x.size(), x.size());
  return -C.inverse() * (x - alpha * mean);
}

/// E[x0 | x_t] for x0 ~ N(mu, cov):
///   mu + alpha cov (alpha^2 cov + sigma^2 I)^{-1} (x_t - alpha mu).
inline Vec gaussian_posterior_mean(const Vec& mu, const Mat& cov, const Vec& x_t, const Schedule& schedule, int t) {
  if (t < 0 || t > schedule.num_steps) throw OracleError("gaussian_posterior_mean: timestep out of range");
  const double a = schedule.alpha[static_cast<std::size_t>(t)];
  const double s = schedule.sigma[static_cast<std::size_t>(t)];
  const Mat C = a * a * cov + s * s * Mat::Identity(mu.size(), mu.size());
  Eigen::FullPivLU<Mat> lu(C);
  if (!lu.isInvertible()) throw OracleError("gaussian_posterior_mean: singular noised covariance");
  return mu + a * cov * lu.solve(x_t - a * mu);
}

inline double reward_value(const RewardSpec& spec, const Vec& y, const Vec& x) {
  double r2 = 0.0;
  const Vec mu = spec.target_map * y + spec.offset;
  for (Eigen::Index i = 0; i < x.size(); ++i) r2 += (x[i] - mu[i]) * (x[i] - mu[i]);
  if (spec.kind == RewardKind::Quadratic) return -spec.scale * r2;
  return spec.scale * std::exp(-r2 / (2.0 * spec.bandwidth * spec.bandwidth));
}

/// Recomputes both branches of a pair from scratch and ranks them.
inline PreferenceOutcome brute_force_pair_outcome(const Vec& x_c, int t, const Vec& eps_a, const Vec& eps_b,
                                                  const GmmScoreModel& model, const RewardSpec& rewards,
                                                  const Embedding& y, const Embedding& neg, double gamma,
                                                  const Schedule& schedule) {
  const double a = schedule.alpha[static_cast<std::size_t>(t)];
  const double s = schedule.sigma[static_cast<std::size_t>(t)];
  auto branch_reward = [&](const Vec& eps) {
    Vec xt(x_c.size());
    for (Eigen::Index i = 0; i < x_c.size(); ++i) xt[i] = a * x_c[i] + s * eps[i];
    const Vec e_neg = -s * gmm_score(model, xt, neg.v, a, s);
    const Vec e_y = -s * gmm_score(model, xt, y.v, a, s);
    const Vec guided = (1.0 - gamma) * e_neg + gamma * e_y;
    const Vec x0 = (xt - s * guided) / a;
    return reward_value(rewards, y.v, x0);
  };
  const double ra = branch_reward(eps_a);
  const double rb = branch_reward(eps_b);
  PreferenceOutcome out;
  out.winner_index = rb > ra ? 1 : 0;
  out.reward_win = std::max(ra, rb);
  out.reward_lose = std::min(ra, rb);
  out.delta_r = out.reward_win - out.reward_lose;
  out.p_win = 1.0 / (1.0 + std::exp(-out.delta_r));
  return out;
}

}  // namespace psdlab::oracle
