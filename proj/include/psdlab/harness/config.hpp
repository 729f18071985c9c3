#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psdlab/distill.hpp"
#include "psdlab/errors.hpp"
#include "psdlab/representation.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/rng.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"
#include "psdlab/tasks.hpp"

namespace psdlab::harness {

using json = nlohmann::json;

enum class RunMode { Distill, ImageGen };

/// Where the score model comes from.  Standard is the built-in bimodal task,
/// File reads a model JSON, Random draws one from a seed, Inline embeds it.
enum class ModelSource { Standard, File, Random, Inline };

struct ModelSpec {
  ModelSource source = ModelSource::Standard;
  std::string path;
  std::uint64_t seed = 0;
  int dim = 2;
  int embed_dim = 2;
  int components = 2;
  std::optional<GmmScoreModel> inline_model;
};

struct RepresentationSpec {
  RepresentationMode mode = RepresentationMode::MultiView;
  std::optional<Vec> theta_init;  // drawn from the init stream when absent
};

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::VariancePreserving;
  int num_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 2e-2;

  Schedule build() const { return build_schedule(kind, num_steps, beta_min, beta_max); }
};

struct RunConfig {
  std::string run_id = "run";
  std::string output_dir = "out";
  RunMode mode = RunMode::Distill;
  DistillConfig distill;
  ModelSpec model;
  Vec prompt;
  Vec negative_init;
  RewardSet rewards;
  RepresentationSpec representation;
  ScheduleSpec schedule;
};

// ---------------------------------------------------------------- enums

namespace detail {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<Method> kMethods[] = {
    {Method::PSD, "psd"},       {Method::SDS, "sds"},           {Method::CSD, "csd"},
    {Method::DreamDPO, "dreamdpo"}, {Method::DreamReward, "dreamreward"}, {Method::PrefOnly, "pref_only"},
    {Method::NoPref, "no_pref"}};
inline constexpr EnumName<TimeWeight> kTimeWeights[] = {{TimeWeight::Unit, "unit"},
                                                        {TimeWeight::SigmaSquared, "sigma_squared"}};
inline constexpr EnumName<NoisingKind> kNoising[] = {{NoisingKind::Independent, "independent"},
                                                     {NoisingKind::InversionPredicted, "inversion_predicted"}};
inline constexpr EnumName<RewardKind> kRewardKinds[] = {{RewardKind::Quadratic, "quadratic"},
                                                        {RewardKind::RBF, "rbf"}};
inline constexpr EnumName<RepresentationMode> kRepModes[] = {{RepresentationMode::MultiView, "multiview"},
                                                             {RepresentationMode::RawLatent, "raw_latent"}};
inline constexpr EnumName<RunMode> kRunModes[] = {{RunMode::Distill, "distill"}, {RunMode::ImageGen, "image_gen"}};
inline constexpr EnumName<ModelSource> kModelSources[] = {{ModelSource::Standard, "standard"},
                                                          {ModelSource::File, "file"},
                                                          {ModelSource::Random, "random"},
                                                          {ModelSource::Inline, "inline"}};
inline constexpr EnumName<ScheduleKind> kScheduleKinds[] = {{ScheduleKind::VariancePreserving, "vp"}};

template <class E, std::size_t N>
std::string enum_to_string(E v, const EnumName<E> (&table)[N]) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  throw ConfigError("unknown enum value");
}

template <class E, std::size_t N>
E enum_from_string(const std::string& s, const EnumName<E> (&table)[N], const char* field) {
  for (const auto& e : table) {
    if (s == e.name) return e.value;
  }
  std::string allowed;
  for (const auto& e : table) allowed += std::string(allowed.empty() ? "" : ", ") + e.name;
  throw ConfigError(std::string(field) + ": unknown value '" + s + "' (expected one of: " + allowed + ")");
}

}  // namespace detail

inline std::string to_string(Method m) { return detail::enum_to_string(m, detail::kMethods); }
inline Method method_from_string(const std::string& s) {
  return detail::enum_from_string(s, detail::kMethods, "method");
}

// ---------------------------------------------------------------- vectors

inline json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vec vec_from_json(const json& j, const char* field) {
  if (!j.is_array()) throw ConfigError(std::string(field) + ": expected an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(std::string(field) + ": non-numeric entry");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline Mat mat_from_json(const json& j, const char* field) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) {
    throw ConfigError(std::string(field) + ": expected a non-empty array of rows");
  }
  const std::size_t cols = j[0].size();
  Mat m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError(std::string(field) + ": ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw ConfigError(std::string(field) + ": non-numeric entry");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

// ---------------------------------------------------------------- models

inline json model_to_json(const GmmScoreModel& m) {
  json comps = json::array();
  for (std::size_t k = 0; k < m.num_components(); ++k) {
    comps.push_back({{"weight", m.weights[k]},
                     {"cond_map", mat_to_json(m.cond_maps[k])},
                     {"offset", vec_to_json(m.offsets[k])},
                     {"covariance", mat_to_json(m.covariances[k])}});
  }
  return {{"components", comps}};
}

inline GmmScoreModel model_from_json(const json& j) {
  if (!j.is_object() || !j.contains("components") || !j["components"].is_array()) {
    throw ConfigError("model: expected an object with a 'components' array");
  }
  GmmScoreModel m;
  for (const auto& c : j["components"]) {
    m.weights.push_back(c.at("weight").get<double>());
    m.cond_maps.push_back(mat_from_json(c.at("cond_map"), "model.cond_map"));
    m.offsets.push_back(vec_from_json(c.at("offset"), "model.offset"));
    m.covariances.push_back(mat_from_json(c.at("covariance"), "model.covariance"));
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return m;
}

/// A random well-conditioned mixture: equal-ish weights, unit-scale maps and
/// offsets, covariances L L^T + 0.1 I.
inline GmmScoreModel random_gmm(int dim, int embed_dim, int components, std::uint64_t seed) {
  if (dim < 1 || embed_dim < 1 || components < 1) throw ParameterError("random_gmm: sizes must be >= 1");
  Rng rng(seed, "model");
  GmmScoreModel m;
  double total = 0.0;
  for (int k = 0; k < components; ++k) {
    const double w = 0.5 + rng.uniform();
    m.weights.push_back(w);
    total += w;
    Mat A(dim, embed_dim), L(dim, dim);
    for (int r = 0; r < dim; ++r) {
      for (int c = 0; c < embed_dim; ++c) A(r, c) = 0.5 * rng.normal();
      for (int c = 0; c < dim; ++c) L(r, c) = 0.4 * rng.normal();
    }
    m.cond_maps.push_back(A);
    m.offsets.push_back(1.5 * rng.normal_vec(dim));
    m.covariances.push_back(L * L.transpose() + 0.1 * Mat::Identity(dim, dim));
  }
  for (auto& w : m.weights) w /= total;
  m.validate();
  return m;
}

// ---------------------------------------------------------------- rewards

inline json reward_to_json(const RewardSpec& r) {
  return {{"name", r.name},
          {"kind", detail::enum_to_string(r.kind, detail::kRewardKinds)},
          {"target_map", mat_to_json(r.target_map)},
          {"offset", vec_to_json(r.offset)},
          {"scale", r.scale},
          {"bandwidth", r.bandwidth}};
}

inline RewardSpec reward_from_json(const json& j) {
  RewardSpec r;
  r.name = j.value("name", std::string("reward"));
  r.kind = detail::enum_from_string(j.value("kind", std::string("quadratic")), detail::kRewardKinds, "reward.kind");
  r.offset = vec_from_json(j.at("offset"), "reward.offset");
  if (j.contains("target_map")) {
    r.target_map = mat_from_json(j["target_map"], "reward.target_map");
  } else {
    r.target_map = Mat::Zero(r.offset.size(), 0);  // filled in once the prompt size is known
  }
  r.scale = j.value("scale", 1.0);
  r.bandwidth = j.value("bandwidth", 1.0);
  return r;
}

// ---------------------------------------------------------------- config

inline json distill_to_json(const DistillConfig& c) {
  json j = {{"method", to_string(c.method)},
            {"gamma", c.gamma},
            {"beta", c.beta},
            {"lr_theta", c.lr_theta},
            {"lr_neg", c.lr_neg},
            {"neg_update_interval", c.neg_update_interval},
            {"num_iters", c.num_iters},
            {"anneal", {{"t_max_frac", c.anneal.t_max_frac}, {"t_min_frac", c.anneal.t_min_frac}}},
            {"w_t", detail::enum_to_string(c.w_t, detail::kTimeWeights)},
            {"lambda_r", c.lambda_r},
            {"tau_min", c.tau_min},
            {"tau_max", c.tau_max},
            {"noising", detail::enum_to_string(c.noising, detail::kNoising)},
            {"camera_batch", c.camera_batch},
            {"beta_r_override", nullptr},
            {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
            {"seed", c.seed}};
  if (c.beta_r_override) j["beta_r_override"] = *c.beta_r_override;
  return j;
}

/// Missing keys keep the values already in `c`, so callers can start from a
/// task default and overlay a partial document.
inline void distill_from_json(const json& j, DistillConfig& c) {
  if (!j.is_object()) throw ConfigError("distill: expected an object");
  if (j.contains("method")) c.method = method_from_string(j["method"].get<std::string>());
  c.gamma = j.value("gamma", c.gamma);
  c.beta = j.value("beta", c.beta);
  c.lr_theta = j.value("lr_theta", c.lr_theta);
  c.lr_neg = j.value("lr_neg", c.lr_neg);
  c.neg_update_interval = j.value("neg_update_interval", c.neg_update_interval);
  c.num_iters = j.value("num_iters", c.num_iters);
  if (j.contains("anneal")) {
    c.anneal.t_max_frac = j["anneal"].value("t_max_frac", c.anneal.t_max_frac);
    c.anneal.t_min_frac = j["anneal"].value("t_min_frac", c.anneal.t_min_frac);
  }
  if (j.contains("w_t")) c.w_t = detail::enum_from_string(j["w_t"].get<std::string>(), detail::kTimeWeights, "w_t");
  c.lambda_r = j.value("lambda_r", c.lambda_r);
  c.tau_min = j.value("tau_min", c.tau_min);
  c.tau_max = j.value("tau_max", c.tau_max);
  if (j.contains("noising")) {
    c.noising = detail::enum_from_string(j["noising"].get<std::string>(), detail::kNoising, "noising");
  }
  c.camera_batch = j.value("camera_batch", c.camera_batch);
  if (j.contains("beta_r_override")) {
    if (j["beta_r_override"].is_null()) {
      c.beta_r_override.reset();
    } else {
      c.beta_r_override = j["beta_r_override"].get<double>();
    }
  }
  if (j.contains("adam")) {
    c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
    c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
    c.adam.eps = j["adam"].value("eps", c.adam.eps);
  }
  c.seed = j.value("seed", c.seed);
}

inline json model_spec_to_json(const ModelSpec& m) {
  json j = {{"source", detail::enum_to_string(m.source, detail::kModelSources)}};
  switch (m.source) {
    case ModelSource::Standard:
      break;
    case ModelSource::File:
      j["path"] = m.path;
      break;
    case ModelSource::Random:
      j["seed"] = m.seed;
      j["dim"] = m.dim;
      j["embed_dim"] = m.embed_dim;
      j["components"] = m.components;
      break;
    case ModelSource::Inline:
      j["model"] = model_to_json(*m.inline_model);
      break;
  }
  return j;
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec m;
  m.source = detail::enum_from_string(j.value("source", std::string("standard")), detail::kModelSources,
                                      "model.source");
  switch (m.source) {
    case ModelSource::Standard:
      break;
    case ModelSource::File:
      m.path = j.at("path").get<std::string>();
      break;
    case ModelSource::Random:
      m.seed = j.value("seed", std::uint64_t{0});
      m.dim = j.value("dim", 2);
      m.embed_dim = j.value("embed_dim", 2);
      m.components = j.value("components", 2);
      break;
    case ModelSource::Inline:
      m.inline_model = model_from_json(j.at("model"));
      break;
  }
  return m;
}

inline json to_json(const RunConfig& c) {
  json held = json::array();
  for (const auto& h : c.rewards.heldout) held.push_back(reward_to_json(h));
  json rep = {{"mode", detail::enum_to_string(c.representation.mode, detail::kRepModes)}, {"theta_init", nullptr}};
  if (c.representation.theta_init) rep["theta_init"] = vec_to_json(*c.representation.theta_init);
  return {{"run_id", c.run_id},
          {"output_dir", c.output_dir},
          {"mode", detail::enum_to_string(c.mode, detail::kRunModes)},
          {"distill", distill_to_json(c.distill)},
          {"model", model_spec_to_json(c.model)},
          {"prompt", vec_to_json(c.prompt)},
          {"negative_init", vec_to_json(c.negative_init)},
          {"rewards", {{"target", reward_to_json(c.rewards.target)}, {"heldout", held}}},
          {"representation", rep},
          {"schedule",
           {{"kind", detail::enum_to_string(c.schedule.kind, detail::kScheduleKinds)},
            {"num_steps", c.schedule.num_steps},
            {"beta_min", c.schedule.beta_min},
            {"beta_max", c.schedule.beta_max}}}};
}

/// Parses a config document.  Anything not given falls back to the
/// standard quadratic task for the chosen mode.  `base_dir` anchors relative
/// model paths.
inline RunConfig from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  try {
    RunConfig c;
    const StandardTask task = standard_task();
    c.mode = detail::enum_from_string(j.value("mode", std::string("distill")), detail::kRunModes, "mode");
    c.distill = c.mode == RunMode::Distill ? standard_distill_config() : standard_image_config();
    c.representation.mode = c.mode == RunMode::Distill ? RepresentationMode::MultiView : RepresentationMode::RawLatent;
    c.run_id = j.value("run_id", c.run_id);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("distill")) distill_from_json(j["distill"], c.distill);
    if (j.contains("seed")) c.distill.seed = j["seed"].get<std::uint64_t>();

    c.model = j.contains("model") ? model_spec_from_json(j["model"]) : ModelSpec{};
    if (c.model.source == ModelSource::File) {
      std::filesystem::path p(c.model.path);
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      if (!std::filesystem::exists(p)) throw ConfigError("model.path does not exist: " + p.string());
      c.model.path = p.string();
    }

    c.prompt = j.contains("prompt") ? vec_from_json(j["prompt"], "prompt") : task.prompt.v;
    c.negative_init = j.contains("negative_init") ? vec_from_json(j["negative_init"], "negative_init")
                                                  : Vec::Zero(c.prompt.size());

    if (j.contains("rewards")) {
      const json& r = j["rewards"];
      c.rewards.target = reward_from_json(r.at("target"));
      if (r.contains("heldout")) {
        for (const auto& h : r["heldout"]) c.rewards.heldout.push_back(reward_from_json(h));
      }
    } else {
      c.rewards = task.rewards;
    }
    auto fix_map = [&](RewardSpec& rs) {
      if (rs.target_map.cols() == 0) rs.target_map = Mat::Zero(rs.offset.size(), c.prompt.size());
    };
    fix_map(c.rewards.target);
    for (auto& h : c.rewards.heldout) fix_map(h);

    if (j.contains("representation")) {
      const json& r = j["representation"];
      if (r.contains("mode")) {
        c.representation.mode =
            detail::enum_from_string(r["mode"].get<std::string>(), detail::kRepModes, "representation.mode");
      }
      if (r.contains("theta_init") && !r["theta_init"].is_null()) {
        c.representation.theta_init = vec_from_json(r["theta_init"], "representation.theta_init");
      }
    }
    if (j.contains("schedule")) {
      const json& s = j["schedule"];
      c.schedule.kind = detail::enum_from_string(s.value("kind", std::string("vp")), detail::kScheduleKinds,
                                                 "schedule.kind");
      c.schedule.num_steps = s.value("num_steps", c.schedule.num_steps);
      c.schedule.beta_min = s.value("beta_min", c.schedule.beta_min);
      c.schedule.beta_max = s.value("beta_max", c.schedule.beta_max);
    }
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// ---------------------------------------------------------------- hashing

/// FNV-1a over the canonical dump (sorted keys, shortest round-trip doubles).
inline std::uint64_t content_hash(const json& j) { return fnv1a64(j.dump()); }

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of everything that determines the run's numbers; output location and
/// run id are excluded so relocated copies of a run hash the same.
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  j.erase("run_id");
  return hex64(content_hash(j));
}

inline std::string schedule_hash(const RunConfig& c) { return hex64(content_hash(to_json(c)["schedule"])); }

// ---------------------------------------------------------------- loading

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("parse error in " + path.string() + ": " + e.what());
  }
}

/// Reads a config and applies the PSDLAB_OUT environment override.
inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig c = from_json(read_json_file(path), path.parent_path());
  if (const char* out = std::getenv("PSDLAB_OUT"); out && *out) c.output_dir = out;
  return c;
}

// ---------------------------------------------------------------- resolution

/// Everything a run needs once files are read and seeds are spent.
struct ResolvedRun {
  GmmScoreModel model;
  Schedule schedule;
  Embedding prompt;
  Embedding negative_init;
  RewardSet rewards;
};

inline GmmScoreModel resolve_model(const ModelSpec& spec) {
  switch (spec.source) {
    case ModelSource::Standard:
      return standard_task().model;
    case ModelSource::File:
      return model_from_json(read_json_file(spec.path));
    case ModelSource::Random:
      return random_gmm(spec.dim, spec.embed_dim, spec.components, spec.seed);
    case ModelSource::Inline:
      return *spec.inline_model;
  }
  throw ConfigError("unknown model source");
}

inline std::string model_hash(const GmmScoreModel& m) { return hex64(content_hash(model_to_json(m))); }

/// Builds the run's objects and checks every cross-field constraint.
inline ResolvedRun resolve(const RunConfig& c) {
  ResolvedRun r;
  try {
    c.distill.validate();
    r.schedule = c.schedule.build();
    r.model = resolve_model(c.model);
    r.model.validate();
    if (c.prompt.size() != r.model.embed_dim()) {
      throw ConfigError("prompt has " + std::to_string(c.prompt.size()) + " entries, model expects " +
                        std::to_string(r.model.embed_dim()));
    }
    if (c.negative_init.size() != c.prompt.size()) throw ConfigError("negative_init size differs from prompt");
    r.prompt = {c.prompt, EmbeddingLabel::Positive};
    r.negative_init = {c.negative_init, EmbeddingLabel::Negative};
    r.rewards = c.rewards;
    auto check_reward = [&](const RewardSpec& rs) {
      rs.validate();
      if (rs.offset.size() != r.model.dim() || rs.target_map.cols() != c.prompt.size()) {
        throw ConfigError("reward '" + rs.name + "' does not match model/prompt dimensions");
      }
    };
    check_reward(r.rewards.target);
    for (const auto& h : r.rewards.heldout) check_reward(h);
    if (c.mode == RunMode::ImageGen) {
      if (c.representation.mode != RepresentationMode::RawLatent) {
        throw ConfigError("image_gen mode needs a raw_latent representation");
      }
      if (c.distill.method != Method::PSD && c.distill.method != Method::NoPref) {
        throw ConfigError("image_gen mode supports only psd and no_pref");
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return r;
}

/// Initial representation for a distill run, drawing theta from the init
/// stream when the config does not pin it.
inline Representation initial_representation(const RunConfig& c, const ResolvedRun& r, RngStreams& rng) {
  const Eigen::Index d = r.model.dim();
  const Eigen::Index n = c.representation.mode == RepresentationMode::MultiView ? 2 * d : d;
  Vec theta = c.representation.theta_init ? *c.representation.theta_init : rng.init.normal_vec(n);
  if (theta.size() != n) {
    throw ConfigError("representation.theta_init must have " + std::to_string(n) + " entries");
  }
  if (c.representation.mode == RepresentationMode::MultiView) return make_default_multiview(d, std::move(theta));
  return make_raw_latent(std::move(theta));
}

}  // namespace psdlab::harness
