#pragma once

#include <cmath>
#include <string>

#include "psdlab/errors.hpp"
#include "psdlab/score_model.hpp"
#include "psdlab/types.hpp"

namespace psdlab {

enum class RewardKind { Quadratic, RBF };

/// Analytic reward centred on mu_r(y) = M y + m0.
///   Quadratic: -s ||x - mu||^2
///   RBF:        s exp(-||x - mu||^2 / (2 h^2))
struct RewardSpec {
  RewardKind kind = RewardKind::Quadratic;
  Mat target_map;  // d x d_e
  Vec offset;      // d
  double scale = 1.0;
  double bandwidth = 1.0;
  std::string name = "target";

  Vec target(const Vec& y) const {
    detail::require_same_size(y.size(), target_map.cols(), "reward target");
    return target_map * y + offset;
  }

  void validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ParameterError("RewardSpec: scale must be positive");
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw ParameterError("RewardSpec: bandwidth must be positive");
    if (target_map.rows() != offset.size()) throw ShapeError("RewardSpec: target_map rows != offset size");
    if (!target_map.allFinite() || !offset.allFinite()) throw ParameterError("RewardSpec: non-finite parameters");
  }
};

inline double reward(const RewardSpec& spec, const Embedding& y, const Vec& x) {
  detail::require_same_size(x.size(), spec.offset.size(), "reward");
  const double r2 = (x - spec.target(y.v)).squaredNorm();
  switch (spec.kind) {
    case RewardKind::Quadratic:
      return -spec.scale * r2;
    case RewardKind::RBF:
      return spec.scale * std::exp(-r2 / (2.0 * spec.bandwidth * spec.bandwidth));
  }
  return 0.0;
}

inline Vec reward_gradient(const RewardSpec& spec, const Embedding& y, const Vec& x) {
  detail::require_same_size(x.size(), spec.offset.size(), "reward_gradient");
  const Vec diff = x - spec.target(y.v);
  switch (spec.kind) {
    case RewardKind::Quadratic:
      return -2.0 * spec.scale * diff;
    case RewardKind::RBF: {
      const double h2 = spec.bandwidth * spec.bandwidth;
      return -(spec.scale / h2) * std::exp(-diff.squaredNorm() / (2.0 * h2)) * diff;
    }
  }
  return Vec::Zero(x.size());
}

/// Bradley-Terry outcome of one ranked pair.  delta_r >= 0 after ranking.
struct PreferenceOutcome {
  int winner_index = 0;
  double delta_r = 0.0;
  double p_win = 0.5;
  double reward_win = 0.0;
  double reward_lose = 0.0;
};

/// p(first > second) = sigmoid(r_first - r_second).  winner_index names the
/// argmax of the two rewards; ties go to index 0.
inline PreferenceOutcome bt_probability(double r_win, double r_lose) {
  PreferenceOutcome out;
  out.delta_r = r_win - r_lose;
  out.p_win = logistic(out.delta_r);
  out.winner_index = (r_lose > r_win) ? 1 : 0;
  out.reward_win = r_win;
  out.reward_lose = r_lose;
  return out;
}

/// Ranks two one-step predictions; the higher-reward one wins.
inline PreferenceOutcome rank_pair(const RewardSpec& spec, const Embedding& y, const Vec& x0_a, const Vec& x0_b) {
  const double ra = reward(spec, y, x0_a);
  const double rb = reward(spec, y, x0_b);
  PreferenceOutcome out = (rb > ra) ? bt_probability(rb, ra) : bt_probability(ra, rb);
  out.winner_index = (rb > ra) ? 1 : 0;
  return out;
}

}  // namespace psdlab
