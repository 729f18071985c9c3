#pragma once

#include <cmath>

#include "psdlab/errors.hpp"
#include "psdlab/types.hpp"

namespace psdlab {

struct AdamSpec {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m;
  Vec v;
  long step = 0;

  static AdamState zeros(Eigen::Index n) { return {Vec::Zero(n), Vec::Zero(n), 0}; }
};

/// In-place Adam descent step on params along `grad`.
inline void adam_descend(Vec& params, const Vec& grad, double lr, AdamState& st, const AdamSpec& spec) {
  detail::require_same_size(params.size(), grad.size(), "adam");
  detail::require_same_size(st.m.size(), grad.size(), "adam moments");
  ++st.step;
  st.m = spec.beta1 * st.m + (1.0 - spec.beta1) * grad;
  st.v = spec.beta2 * st.v + (1.0 - spec.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(spec.beta1, double(st.step));
  const double c2 = 1.0 - std::pow(spec.beta2, double(st.step));
  params.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + spec.eps);
}

inline void adam_ascend(Vec& params, const Vec& grad, double lr, AdamState& st, const AdamSpec& spec) {
  adam_descend(params, -grad, lr, st, spec);
}

}  // namespace psdlab
