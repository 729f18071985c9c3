#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "psdlab/distill.hpp"
#include "psdlab/guidance.hpp"
#include "psdlab/harness/config.hpp"
#include "psdlab/oracle.hpp"
#include "psdlab/representation.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/rng.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"

namespace psdlab::harness {

/// Test fixture: forwards to a mixture model but negates its embedding
/// Jacobian.  gradcheck must reject it.
struct SignFlippedJacobian {
  const GmmScoreModel* base = nullptr;
  Eigen::Index dim() const { return base->dim(); }
};

inline Vec eps_predict(const SignFlippedJacobian& m, const NoisyState& st, const Embedding& e, const Schedule& sch) {
  return psdlab::eps_predict(*m.base, st, e, sch);
}

inline Mat eps_embedding_jacobian(const SignFlippedJacobian& m, const NoisyState& st, const Embedding& e,
                                  const Schedule& sch) {
  return -psdlab::eps_embedding_jacobian(*m.base, st, e, sch);
}

struct GradcheckOptions {
  int instances = 100;
  std::uint64_t seed = 0;
  oracle::FiniteDiffSpec fd;
  bool flip_jacobian_sign = false;
};

struct CheckResult {
  std::string name;
  int instances = 0;
  int failures = 0;
  double max_rel_err = 0.0;
  bool pass() const { return failures == 0; }
};

struct GradcheckReport {
  std::vector<CheckResult> checks;
  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass(); });
  }
};

namespace detail {

struct Instance {
  GmmScoreModel model;
  NoisyState state;
  Embedding e;
  Embedding y;
  RewardSpec reward;
  double gamma = 1.0;
};

inline Instance random_instance(Rng& rng, const Schedule& sch) {
  Instance in;
  const int d = rng.uniform_int(1, 3);
  const int de = rng.uniform_int(1, 3);
  const int K = rng.uniform_int(1, 3);
  in.model = random_gmm(d, de, K, static_cast<std::uint64_t>(rng.engine()()));
  const int t = rng.uniform_int(1, sch.num_steps);
  const double a = sch.alpha_at(t);
  const double s = sch.sigma_at(t);
  in.e = {rng.normal_vec(de), EmbeddingLabel::Negative};
  in.y = {rng.normal_vec(de), EmbeddingLabel::Positive};
  const std::size_t k = static_cast<std::size_t>(rng.uniform_int(0, K - 1));
  in.state = {a * in.model.component_mean(k, in.e.v) + 0.7 * (a + s) * rng.normal_vec(d), t};
  in.reward.kind = rng.uniform() < 0.5 ? RewardKind::Quadratic : RewardKind::RBF;
  in.reward.target_map = Mat(d, de);
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < de; ++c) in.reward.target_map(r, c) = 0.3 * rng.normal();
  in.reward.offset = rng.normal_vec(d);
  in.reward.scale = 0.5 + rng.uniform();
  in.reward.bandwidth = 1.0 + 2.0 * rng.uniform();
  in.gamma = 1.0 + 7.0 * rng.uniform();
  return in;
}

inline void record(CheckResult& c, double err, double tol) {
  ++c.instances;
  c.max_rel_err = std::max(c.max_rel_err, err);
  if (!(err <= tol)) ++c.failures;
}

}  // namespace detail

/// Runs every analytic derivative against central finite differences on
/// seeded random instances.
inline GradcheckReport gradcheck(const GradcheckOptions& opt = {}, const Schedule& sch = default_schedule()) {
  opt.fd.validate();
  const double tol = opt.fd.rel_tol;
  CheckResult score{"noisy_score"}, score_closed{"noisy_score_closed_form"}, jac{"eps_embedding_jacobian"},
      rgrad{"reward_gradient"}, vjp{"render_vjp"}, theta{"theta_update_chain"}, neg{"neg_update_chain"};
  Rng rng(opt.seed, "gradcheck");

  for (int i = 0; i < opt.instances; ++i) {
    detail::Instance in = detail::random_instance(rng, sch);
    const GmmScoreModel& model = in.model;
    const SignFlippedJacobian flipped{&model};
    const int t = in.state.t;

    // Score against finite differences of the log density, and against the
    // explicit-inverse closed form.
    const Vec s_an = noisy_score(model, in.state, in.e, sch);
    const Vec s_fd = oracle::fd_gradient(
        [&](const Vec& x) { return log_marginal_density(model, NoisyState{x, t}, in.e, sch); }, in.state.x, opt.fd);
    detail::record(score, oracle::relative_error(s_an, s_fd), tol);
    const Vec s_cf = oracle::gmm_score(model, in.state.x, in.e.v, sch.alpha_at(t), sch.sigma_at(t));
    detail::record(score_closed, oracle::relative_error(s_an, s_cf), tol);

    const Mat j_an = opt.flip_jacobian_sign ? eps_embedding_jacobian(flipped, in.state, in.e, sch)
                                            : eps_embedding_jacobian(model, in.state, in.e, sch);
    const Mat j_fd = oracle::fd_jacobian(
        [&](const Vec& e) { return psdlab::eps_predict(model, in.state, Embedding{e, in.e.label}, sch); }, in.e.v,
        opt.fd);
    detail::record(jac, oracle::relative_error(j_an, j_fd), tol);

    const Vec x0 = rng.normal_vec(model.dim());
    const Vec g_an = reward_gradient(in.reward, in.y, x0);
    const Vec g_fd = oracle::fd_gradient([&](const Vec& x) { return oracle::reward_value(in.reward, in.y.v, x); },
                                         x0, opt.fd);
    detail::record(rgrad, oracle::relative_error(g_an, g_fd), tol);

    // Pullback through a multi-view rendering.
    const Eigen::Index d = model.dim();
    Representation rep = make_default_multiview(d, rng.normal_vec(2 * d));
    const int cam = sample_camera(rep, rng);
    const Vec cot = rng.normal_vec(d);
    auto pulled = [&](const Vec& c) {
      return oracle::fd_gradient(
          [&](const Vec& th) {
            Representation r = rep;
            r.theta = th;
            return c.dot(render(r, cam).x_c);
          },
          rep.theta, opt.fd);
    };
    detail::record(vjp, oracle::relative_error(render_vjp(rep, cam, cot), pulled(cot)), tol);

    // Parameter step: the composed PSD cotangent at this rendering, pulled
    // back, against the stop-gradient surrogate <cotangent, render(theta)>.
    const Vec x_c = render(rep, cam).x_c;
    const Vec eps_a = rng.normal_vec(d);
    const Vec eps_b = rng.normal_vec(d);
    const WinLosePair pair =
        make_pair_from_noises(x_c, t, eps_a, eps_b, model, in.reward, in.y, in.e, in.gamma, sch);
    const GuidanceTerms terms = compose_terms(pair, model, in.y, in.e, in.gamma, sch);
    const Vec full = total_update(terms, in.gamma);
    detail::record(theta, oracle::relative_error(render_vjp(rep, cam, full), pulled(full)), tol);

    // Negative embedding: reward of the winner's guided one-step prediction.
    const Vec n_an = opt.flip_jacobian_sign
                         ? neg_embedding_gradient(pair, flipped, in.reward, in.y, in.e, in.gamma, sch)
                         : neg_embedding_gradient(pair, model, in.reward, in.y, in.e, in.gamma, sch);
    const Vec n_fd = oracle::fd_gradient(
        [&](const Vec& n) {
          const double a = sch.alpha_at(t);
          const double s = sch.sigma_at(t);
          const Vec xw = pair.x_t_win;
          const Vec en = -s * oracle::gmm_score(model, xw, n, a, s);
          const Vec ey = -s * oracle::gmm_score(model, xw, in.y.v, a, s);
          const Vec guided = en + in.gamma * (ey - en);
          return oracle::reward_value(in.reward, in.y.v, (xw - s * guided) / a);
        },
        in.e.v, opt.fd);
    detail::record(neg, oracle::relative_error(n_an, n_fd), tol);
  }
  return {{score, score_closed, jac, rgrad, vjp, theta, neg}};
}

}  // namespace psdlab::harness
