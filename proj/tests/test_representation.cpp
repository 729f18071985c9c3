#include <cmath>

#include <gtest/gtest.h>

#include "psdlab/oracle.hpp"
#include "psdlab/representation.hpp"
#include "psdlab/rng.hpp"

using namespace psdlab;

TEST(Render, RawLatentIsIdentity) {
  const Vec th = (Vec(2) << 1.0, 2.0).finished();
  const Representation rep = make_raw_latent(th);
  EXPECT_EQ(render(rep, 0).x_c, th);
  EXPECT_EQ(render_vjp(rep, 0, th), th);
  EXPECT_THROW(render(rep, 1), RangeError);
}

TEST(Render, IdentityCameraAndIndependentProduct) {
  Representation rep = make_default_multiview(2, (Vec(4) << 1.0, 2.0, 3.0, 4.0).finished());
  EXPECT_EQ(render(rep, 0).x_c, (Vec(2) << 1.0, 2.0).finished());
  EXPECT_EQ(render(rep, 1).x_c, (Vec(2) << 3.0, 4.0).finished());
  Rng rng(1, "t");
  for (int i = 0; i < 50; ++i) {
    rep.theta = rng.normal_vec(4);
    for (int c = 0; c < 4; ++c) {
      const Mat& P = rep.cameras[c];
      Vec want = Vec::Zero(2);
      for (int r = 0; r < 2; ++r)
        for (int k = 0; k < 4; ++k) want[r] += P(r, k) * rep.theta[k];
      EXPECT_LE((render(rep, c).x_c - want).norm(), 1e-14);
    }
  }
}

TEST(RenderVjp, RowSelectionScatters) {
  const Representation rep = make_default_multiview(2, Vec::Zero(4));
  const Vec g = render_vjp(rep, 1, (Vec(2) << 5.0, 6.0).finished());
  EXPECT_EQ(g, (Vec(4) << 0.0, 0.0, 5.0, 6.0).finished());
}

TEST(RenderVjp, FiniteDifferencesAndAdjointness) {
  Rng rng(2, "t");
  for (int i = 0; i < 100; ++i) {
    const int d = rng.uniform_int(1, 4);
    Representation rep = make_default_multiview(d, rng.normal_vec(2 * d));
    const int c = sample_camera(rep, rng);
    const Vec cot = rng.normal_vec(d);
    const Vec fd = oracle::fd_gradient(
        [&](const Vec& th) {
          Representation r = rep;
          r.theta = th;
          return cot.dot(render(r, c).x_c);
        },
        rep.theta);
    EXPECT_LE(oracle::relative_error(render_vjp(rep, c, cot), fd), 1e-6);
    EXPECT_NEAR(cot.dot(render(rep, c).x_c), render_vjp(rep, c, cot).dot(rep.theta), 1e-12);
  }
}

TEST(Render, Linearity) {
  Rng rng(3, "t");
  Representation a = make_default_multiview(3, rng.normal_vec(6));
  Representation b = make_default_multiview(3, rng.normal_vec(6));
  Representation s = make_default_multiview(3, a.theta + b.theta);
  for (int c = 0; c < 4; ++c) {
    EXPECT_LE((render(s, c).x_c - render(a, c).x_c - render(b, c).x_c).norm(), 1e-14);
  }
}

TEST(RenderVjp, RawLatentOneHotRoundTrip) {
  const Representation rep = make_raw_latent(Vec::Zero(3));
  for (int i = 0; i < 3; ++i) {
    const Vec e = Vec::Unit(3, i);
    EXPECT_EQ(render_vjp(rep, 0, render(make_raw_latent(e), 0).x_c), e);
  }
}

TEST(RenderVjp, ShapeErrors) {
  const Representation rep = make_default_multiview(2, Vec::Zero(4));
  EXPECT_THROW(render_vjp(rep, 0, Vec::Zero(3)), ShapeError);
  EXPECT_THROW(render_vjp(rep, 4, Vec::Zero(2)), RangeError);
  EXPECT_THROW(make_default_multiview(2, Vec::Zero(3)), ShapeError);
}

TEST(SampleCamera, ModesDeterminismAndFrequencies) {
  Rng r0(0);
  EXPECT_THROW(sample_camera(make_raw_latent(Vec::Zero(2)), r0), ModeError);
  Representation single = make_default_multiview(2, Vec::Zero(4));
  single.cameras.resize(1);
  single.validate();
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_camera(single, r0), 0);
  const Representation rep = make_default_multiview(2, Vec::Zero(4));
  Rng a(5, "camera"), b(5, "camera");
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_camera(rep, a), sample_camera(rep, b));
  Rng rng(6, "camera");
  const int n = 100000;
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[sample_camera(rep, rng)];
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (int c : counts) EXPECT_LT(std::abs(double(c) / n - 0.25), 4.0 * se);
}

TEST(Representation, ValidateRejectsDegenerateCameras) {
  Representation rep = make_default_multiview(2, Vec::Zero(4));
  rep.cameras[2].setZero();
  EXPECT_THROW(rep.validate(), ParameterError);
  rep = make_default_multiview(2, Vec::Zero(4));
  rep.cameras.clear();
  EXPECT_THROW(rep.validate(), ParameterError);
}
