#pragma once

#include <cmath>
#include <concepts>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "psdlab/errors.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/types.hpp"

namespace psdlab {

enum class EmbeddingLabel { Positive, Negative, Unconditional };

struct Embedding {
  Vec v;
  EmbeddingLabel label = EmbeddingLabel::Positive;

  static Embedding unconditional(Eigen::Index dim) {
    return {Vec::Zero(dim), EmbeddingLabel::Unconditional};
  }
};

/// Conditional Gaussian mixture
///   p(x0 | e) = sum_k w_k N(x0; A_k e + b_k, Sigma_k)
/// with a closed-form noised marginal, so the score and its embedding
/// Jacobian are exact.
struct GmmScoreModel {
  std::vector<double> weights;
  std::vector<Mat> cond_maps;  // A_k, d x d_e
  std::vector<Vec> offsets;    // b_k, d
  std::vector<Mat> covariances;

  Eigen::Index dim() const { return offsets.empty() ? 0 : offsets.front().size(); }
  Eigen::Index embed_dim() const { return cond_maps.empty() ? 0 : cond_maps.front().cols(); }
  std::size_t num_components() const { return weights.size(); }

  Vec component_mean(std::size_t k, const Vec& e) const { return cond_maps[k] * e + offsets[k]; }

  void validate() const {
    const std::size_t K = weights.size();
    if (K == 0) throw ParameterError("GmmScoreModel: no components");
    if (cond_maps.size() != K || offsets.size() != K || covariances.size() != K) {
      throw ShapeError("GmmScoreModel: component arrays disagree in length");
    }
    double total = 0.0;
    const Eigen::Index d = dim();
    const Eigen::Index de = embed_dim();
    for (std::size_t k = 0; k < K; ++k) {
      if (!(weights[k] > 0.0)) throw ParameterError("GmmScoreModel: weight " + std::to_string(k) + " not positive");
      total += weights[k];
      if (cond_maps[k].rows() != d || cond_maps[k].cols() != de) {
        throw ShapeError("GmmScoreModel: A_" + std::to_string(k) + " has wrong shape");
      }
      if (offsets[k].size() != d) throw ShapeError("GmmScoreModel: b_" + std::to_string(k) + " has wrong size");
      const Mat& S = covariances[k];
      if (S.rows() != d || S.cols() != d) throw ShapeError("GmmScoreModel: Sigma_" + std::to_string(k) + " has wrong shape");
      if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + S.cwiseAbs().maxCoeff())) {
        throw ParameterError("GmmScoreModel: Sigma_" + std::to_string(k) + " not symmetric");
      }
      Eigen::SelfAdjointEigenSolver<Mat> es(S, Eigen::EigenvaluesOnly);
      if (!(es.eigenvalues().minCoeff() > 1e-9)) {
        throw ParameterError("GmmScoreModel: Sigma_" + std::to_string(k) + " not positive definite");
      }
      if (!cond_maps[k].allFinite() || !offsets[k].allFinite()) {
        throw ParameterError("GmmScoreModel: non-finite parameters in component " + std::to_string(k));
      }
    }
    if (std::abs(total - 1.0) > 1e-9) throw ParameterError("GmmScoreModel: weights do not sum to 1");
  }
};

namespace detail {

/// Per-component quantities of the noised mixture at (x_t, e, t).
struct MixtureEval {
  std::vector<double> resp;   // posterior responsibilities
  std::vector<Vec> u;         // C_k^{-1} (x - alpha m_k(e))
  std::vector<Eigen::LLT<Mat>> chol;
  double log_density = 0.0;
};

inline MixtureEval evaluate_mixture(const GmmScoreModel& model, const NoisyState& state,
                                    const Vec& e, const Schedule& schedule) {
  schedule.check_index(state.t);
  const Eigen::Index d = model.dim();
  require_same_size(state.x.size(), d, "score model (x)");
  require_same_size(e.size(), model.embed_dim(), "score model (embedding)");
  const double a = schedule.alpha_at(state.t);
  const double s = schedule.sigma_at(state.t);
  const std::size_t K = model.num_components();

  MixtureEval out;
  out.resp.resize(K);
  out.u.resize(K);
  out.chol.reserve(K);
  std::vector<double> logp(K);
  const Mat eye = Mat::Identity(d, d);
  for (std::size_t k = 0; k < K; ++k) {
    const Mat C = a * a * model.covariances[k] + s * s * eye;
    out.chol.emplace_back(C);
    if (out.chol.back().info() != Eigen::Success) {
      throw NumericalError("noised covariance of component " + std::to_string(k) + " not invertible");
    }
    const Vec r = state.x - a * model.component_mean(k, e);
    out.u[k] = out.chol.back().solve(r);
    const Mat L = out.chol.back().matrixL();
    const double logdet = 2.0 * L.diagonal().array().log().sum();
    logp[k] = std::log(model.weights[k]) - 0.5 * r.dot(out.u[k]) - 0.5 * logdet -
              0.5 * double(d) * std::log(2.0 * std::numbers::pi);
  }
  // log-sum-exp with max subtraction so far tails do not underflow to 0/0.
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logp) mx = std::max(mx, l);
  double z = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    out.resp[k] = std::exp(logp[k] - mx);
    z += out.resp[k];
  }
  for (double& r : out.resp) r /= z;
  out.log_density = mx + std::log(z);
  return out;
}

}  // namespace detail

/// log p(x_t | e) of the noised marginal.
inline double log_marginal_density(const GmmScoreModel& model, const NoisyState& state, const Embedding& e,
                                   const Schedule& schedule) {
  return detail::evaluate_mixture(model, state, e.v, schedule).log_density;
}

/// grad_{x_t} log p(x_t | e), p(x_t|e) = sum_k w_k N(alpha m_k(e), alpha^2 Sigma_k + sigma^2 I).
inline Vec noisy_score(const GmmScoreModel& model, const NoisyState& state, const Embedding& e,
                       const Schedule& schedule) {
  const auto ev = detail::evaluate_mixture(model, state, e.v, schedule);
  Vec score = Vec::Zero(model.dim());
  for (std::size_t k = 0; k < ev.u.size(); ++k) score -= ev.resp[k] * ev.u[k];
  return score;
}

/// eps_phi(x_t, e, t) = -sigma_t * score.
inline Vec eps_predict(const GmmScoreModel& model, const NoisyState& state, const Embedding& e,
                       const Schedule& schedule) {
  return -schedule.sigma_at(state.t) * noisy_score(model, state, e, schedule);
}

/// d eps_phi / d e  (d x d_e), differentiating through both the component
/// means and the responsibilities.
inline Mat eps_embedding_jacobian(const GmmScoreModel& model, const NoisyState& state, const Embedding& e,
                                  const Schedule& schedule) {
  const auto ev = detail::evaluate_mixture(model, state, e.v, schedule);
  const double a = schedule.alpha_at(state.t);
  const double s = schedule.sigma_at(state.t);
  const std::size_t K = model.num_components();
  const Eigen::Index d = model.dim();
  const Eigen::Index de = model.embed_dim();

  // g_k = d log N_k / d e = alpha A_k^T u_k
  std::vector<Vec> g(K);
  Vec g_bar = Vec::Zero(de);
  for (std::size_t k = 0; k < K; ++k) {
    g[k] = a * model.cond_maps[k].transpose() * ev.u[k];
    g_bar += ev.resp[k] * g[k];
  }
  Mat jac = Mat::Zero(d, de);
  for (std::size_t k = 0; k < K; ++k) {
    jac += ev.resp[k] * (ev.u[k] * (g[k] - g_bar).transpose() - a * ev.chol[k].solve(model.cond_maps[k]));
  }
  return s * jac;
}

/// Interface the guidance and distillation code needs from a noise predictor.
template <typename M>
concept NoisePredictor = requires(const M& m, const NoisyState& st, const Embedding& e, const Schedule& sch) {
  { m.dim() } -> std::convertible_to<Eigen::Index>;
  { eps_predict(m, st, e, sch) } -> std::convertible_to<Vec>;
  { eps_embedding_jacobian(m, st, e, sch) } -> std::convertible_to<Mat>;
};

/// eps(neg) + gamma * (eps(y) - eps(neg)).  With neg unconditional this is
/// classifier-free guidance; with a trained negative it is negative prompting.
template <NoisePredictor M>
Vec cfg_eps(const M& model, const NoisyState& state, const Embedding& y, const Embedding& neg, double gamma,
            const Schedule& schedule) {
  if (!(gamma >= 0.0)) throw ParameterError("cfg_eps: gamma must be >= 0");
  const Vec eps_neg = eps_predict(model, state, neg, schedule);
  const Vec eps_y = eps_predict(model, state, y, schedule);
  return eps_neg + gamma * (eps_y - eps_neg);
}

}  // namespace psdlab
