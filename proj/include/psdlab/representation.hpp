#pragma once

#include <string>
#include <vector>

#include "psdlab/errors.hpp"
#include "psdlab/rng.hpp"
#include "psdlab/types.hpp"

namespace psdlab {

enum class RepresentationMode { MultiView, RawLatent };

/// Parameters theta rendered through per-camera linear projections
/// x_c = P_c theta (MultiView), or used directly as the sample (RawLatent).
struct Representation {
  Vec theta;
  RepresentationMode mode = RepresentationMode::RawLatent;
  std::vector<Mat> cameras;

  std::size_t num_cameras() const { return mode == RepresentationMode::RawLatent ? 1 : cameras.size(); }

  Eigen::Index output_dim() const {
    return mode == RepresentationMode::RawLatent ? theta.size() : cameras.front().rows();
  }

  void validate() const {
    if (!theta.allFinite()) throw ParameterError("Representation: non-finite theta");
    if (mode == RepresentationMode::RawLatent) return;
    if (cameras.empty()) throw ParameterError("Representation: MultiView needs at least one camera");
    for (std::size_t c = 0; c < cameras.size(); ++c) {
      const Mat& P = cameras[c];
      if (P.cols() != theta.size() || P.rows() != cameras.front().rows()) {
        throw ShapeError("Representation: camera " + std::to_string(c) + " has wrong shape");
      }
      Eigen::FullPivLU<Mat> lu(P);
      if (lu.rank() != P.rows()) throw ParameterError("Representation: camera " + std::to_string(c) + " not full row rank");
    }
  }
};

inline Representation make_raw_latent(Vec theta) {
  return {std::move(theta), RepresentationMode::RawLatent, {}};
}

/// Default multi-view geometry: theta has 2d entries split into halves u and
/// v; the four cameras see u, v, (u + v)/sqrt2 and (u - v)/sqrt2, so no
/// single view pins down theta.
inline Representation make_default_multiview(Eigen::Index d, Vec theta) {
  if (theta.size() != 2 * d) throw ShapeError("make_default_multiview: theta must have 2d entries");
  const Mat I = Mat::Identity(d, d);
  const double r = 1.0 / std::sqrt(2.0);
  std::vector<Mat> cams(4, Mat::Zero(d, 2 * d));
  cams[0] << I, Mat::Zero(d, d);
  cams[1] << Mat::Zero(d, d), I;
  cams[2] << r * I, r * I;
  cams[3] << r * I, -r * I;
  Representation rep{std::move(theta), RepresentationMode::MultiView, std::move(cams)};
  rep.validate();
  return rep;
}

struct RenderOutput {
  Vec x_c;
  int camera_index = 0;
};

inline void check_camera(const Representation& rep, int camera_index) {
  if (camera_index < 0 || static_cast<std::size_t>(camera_index) >= rep.num_cameras()) {
    throw RangeError("camera index " + std::to_string(camera_index) + " out of range");
  }
}

inline RenderOutput render(const Representation& rep, int camera_index) {
  check_camera(rep, camera_index);
  if (rep.mode == RepresentationMode::RawLatent) return {rep.theta, camera_index};
  return {rep.cameras[static_cast<std::size_t>(camera_index)] * rep.theta, camera_index};
}

/// Pullback of a data-space cotangent: P_c^T cotangent.
inline Vec render_vjp(const Representation& rep, int camera_index, const Vec& cotangent) {
  check_camera(rep, camera_index);
  detail::require_same_size(cotangent.size(), rep.output_dim(), "render_vjp");
  if (rep.mode == RepresentationMode::RawLatent) return cotangent;
  return rep.cameras[static_cast<std::size_t>(camera_index)].transpose() * cotangent;
}

inline int sample_camera(const Representation& rep, Rng& rng) {
  if (rep.mode != RepresentationMode::MultiView) throw ModeError("sample_camera: representation is RawLatent");
  return rng.uniform_int(0, static_cast<int>(rep.cameras.size()) - 1);
}

}  // namespace psdlab
