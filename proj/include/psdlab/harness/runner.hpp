#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "psdlab/distill.hpp"
#include "psdlab/harness/config.hpp"
#include "psdlab/harness/io.hpp"
#include "psdlab/harness/stats.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"

namespace psdlab::harness {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailure = 1, kUsage = 2, kNumerical = 3 };

// ================================================================== run

/// Runs the configured method in memory.  Nothing is written.
inline RunTrace execute(const RunConfig& c, const ResolvedRun& r) {
  RngStreams rng(c.distill.seed);
  if (c.mode == RunMode::ImageGen) {
    if (c.representation.theta_init) {
      OptimState st = OptimState::start(make_raw_latent(*c.representation.theta_init), r.negative_init);
      return distill_run(st, c.distill, r.model, r.rewards, r.prompt, r.schedule, rng);
    }
    return image_gen_run(c.distill, r.model, r.rewards, r.prompt, r.negative_init, r.schedule, rng);
  }
  OptimState st = OptimState::start(initial_representation(c, r, rng), r.negative_init);
  return distill_run(st, c.distill, r.model, r.rewards, r.prompt, r.schedule, rng);
}

inline std::vector<std::string> metrics_header(const RewardSet& rewards) {
  std::vector<std::string> h = {"iter",     "t",        "camera",   "r_win",    "r_lose",
                                "delta_r",  "beta_r",   "norm_gen", "norm_cls", "norm_pref",
                                "reward_target"};
  for (std::size_t k = 0; k < rewards.heldout.size(); ++k) h.push_back("reward_heldout_" + std::to_string(k + 1));
  h.insert(h.end(), {"pref_weight", "norm_qref", "neg_updated"});
  return h;
}

/// Per-iteration metrics.  Wall-clock lives in timing.csv so this file stays
/// byte-identical across repeated runs.
inline std::string metrics_csv(const RunTrace& trace, const RewardSet& rewards) {
  CsvWriter w(metrics_header(rewards));
  for (const auto& r : trace.records) {
    w.cell(r.iter).cell(r.t).cell(r.camera).cell(r.r_win).cell(r.r_lose).cell(r.delta_r).cell(r.beta_r);
    w.cell(r.norm_gen).cell(r.norm_cls).cell(r.norm_pref).cell(r.reward_target);
    for (double h : r.reward_heldout) w.cell(h);
    w.cell(r.pref_weight).cell(r.norm_qref).cell(r.neg_updated ? 1 : 0);
    w.end_row();
  }
  return w.str();
}

inline std::string timing_csv(const RunTrace& trace) {
  CsvWriter w({"iter", "wall_seconds"});
  for (const auto& r : trace.records) w.cell(r.iter).cell(r.wall_seconds).end_row();
  return w.str();
}

inline double final_target(const RunTrace& t) {
  return t.records.empty() ? t.initial_reward_target : t.records.back().reward_target;
}

inline std::vector<double> final_heldout(const RunTrace& t) {
  return t.records.empty() ? t.initial_reward_heldout : t.records.back().reward_heldout;
}

inline double mean_wall_seconds(const RunTrace& t) {
  if (t.records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : t.records) s += r.wall_seconds;
  return s / double(t.records.size());
}

inline json final_state_json(const RunConfig& c, const ResolvedRun& r, const RunTrace& trace) {
  return {{"run_id", c.run_id},
          {"method", to_string(c.distill.method)},
          {"seed", c.distill.seed},
          {"num_iters", c.distill.num_iters},
          {"theta", vec_to_json(trace.thetas.back())},
          {"negative_embedding", vec_to_json(trace.negs.back())},
          {"initial_reward_target", trace.initial_reward_target},
          {"final_reward_target", final_target(trace)},
          {"initial_reward_heldout", trace.initial_reward_heldout},
          {"final_reward_heldout", final_heldout(trace)},
          {"config_hash", config_hash(c)},
          {"schedule_hash", schedule_hash(c)},
          {"model_hash", model_hash(r.model)}};
}

inline fs::path run_dir(const RunConfig& c) { return fs::path(c.output_dir) / c.run_id; }

/// Writes metrics.csv, timing.csv, final_state.json, config_resolved.json.
inline void write_run_outputs(const RunConfig& c, const ResolvedRun& r, const RunTrace& trace) {
  const fs::path dir = run_dir(c);
  fs::create_directories(dir);
  json resolved = to_json(c);
  resolved["config_hash"] = config_hash(c);
  write_atomic(dir / "config_resolved.json", resolved.dump(2) + "\n");
  write_atomic(dir / "metrics.csv", metrics_csv(trace, r.rewards));
  write_atomic(dir / "timing.csv", timing_csv(trace));
  write_atomic(dir / "final_state.json", final_state_json(c, r, trace).dump(2) + "\n");
}

struct RunOutcome {
  int exit_code = kOk;
  std::string message;
  std::optional<RunTrace> trace;
};

/// Runs one config end to end and maps failures to exit codes.
inline RunOutcome run_config(const RunConfig& c, bool write_outputs = true) {
  RunOutcome out;
  try {
    const ResolvedRun r = resolve(c);
    RunTrace trace = execute(c, r);
    if (write_outputs) write_run_outputs(c, r, trace);
    out.trace = std::move(trace);
  } catch (const ConfigError& e) {
    out.exit_code = kUsage;
    out.message = std::string("config error: ") + e.what();
  } catch (const NumericalError& e) {
    out.exit_code = kNumerical;
    out.message = std::string("numerical abort: ") + e.what();
  } catch (const RangeError& e) {
    out.exit_code = kUsage;
    out.message = std::string("range error: ") + e.what();
  } catch (const ParameterError& e) {
    out.exit_code = kUsage;
    out.message = std::string("parameter error: ") + e.what();
  } catch (const std::exception& e) {
    out.exit_code = kUsage;
    out.message = std::string("error: ") + e.what();
  }
  return out;
}

// ================================================================== ablate

struct MatrixConfig {
  json base;                          // a RunConfig document
  std::vector<std::string> axes;      // distill keys, in declaration order
  std::vector<std::vector<json>> values;
  std::vector<std::uint64_t> seeds;
  std::string matrix_id = "matrix";
  std::string output_dir = "out";
  int jobs = 0;                       // 0: hardware concurrency
};

/// {"base": {...}, "grid": {"method": ["psd", "no_pref"], ...},
///  "seeds": [0, 1] or {"from": 0, "count": 20}, "matrix_id": ..., "jobs": 4}
inline MatrixConfig matrix_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("matrix: top level must be an object");
  MatrixConfig m;
  m.base = j.value("base", json::object());
  m.matrix_id = j.value("matrix_id", m.matrix_id);
  m.output_dir = j.value("output_dir", m.base.value("output_dir", m.output_dir));
  m.jobs = j.value("jobs", 0);
  if (j.contains("grid")) {
    if (!j["grid"].is_object()) throw ConfigError("matrix.grid must be an object");
    for (auto it = j["grid"].begin(); it != j["grid"].end(); ++it) {
      if (!it.value().is_array() || it.value().empty()) {
        throw ConfigError("matrix.grid." + it.key() + " must be a non-empty array");
      }
      m.axes.push_back(it.key());
      m.values.emplace_back(it.value().begin(), it.value().end());
    }
  }
  const json seeds = j.value("seeds", json::array({0}));
  if (seeds.is_array()) {
    for (const auto& s : seeds) m.seeds.push_back(s.get<std::uint64_t>());
  } else if (seeds.is_object()) {
    const auto from = seeds.value("from", std::uint64_t{0});
    const auto count = seeds.value("count", std::uint64_t{1});
    for (std::uint64_t s = 0; s < count; ++s) m.seeds.push_back(from + s);
  } else {
    throw ConfigError("matrix.seeds must be an array or {from, count}");
  }
  if (m.seeds.empty()) throw ConfigError("matrix.seeds is empty");
  return m;
}

inline int resolve_jobs(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PSDLAB_JOBS"); env && *env) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct CellResult {
  std::string cell;
  std::uint64_t seed = 0;
  std::string method;
  int exit_code = kOk;
  std::string message;
  double initial_target = 0.0;
  double final_target = 0.0;
  std::vector<double> final_heldout;
  double wall_per_iter = 0.0;
};

struct MatrixResult {
  std::vector<CellResult> runs;  // cell-major, seed-minor
  std::vector<std::string> heldout_names;
  int exit_code = kOk;
};

inline std::string cell_name(const std::vector<std::string>& axes, const std::vector<json>& picks) {
  if (axes.empty()) return "base";
  std::string s;
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (i) s += "__";
    s += axes[i] + "=" + (picks[i].is_string() ? picks[i].get<std::string>() : picks[i].dump());
  }
  return s;
}

/// Runs the method/hyper-parameter cross product for every seed on a bounded
/// worker pool.  Per-run outputs go under <out>/<matrix_id>/ next to
/// runs.csv and summary.csv.
inline MatrixResult run_matrix(const MatrixConfig& m, int jobs_override = 0, bool write_outputs = true,
                               const fs::path& base_dir = {}) {
  struct Job {
    std::string cell;
    RunConfig config;
  };
  std::vector<Job> jobs;
  std::vector<std::size_t> idx(m.axes.size(), 0);
  const std::string out_root = std::getenv("PSDLAB_OUT") && *std::getenv("PSDLAB_OUT") ? std::getenv("PSDLAB_OUT")
                                                                                       : m.output_dir;
  while (true) {
    std::vector<json> picks;
    json doc = m.base;
    if (!doc.contains("distill")) doc["distill"] = json::object();
    for (std::size_t a = 0; a < m.axes.size(); ++a) {
      picks.push_back(m.values[a][idx[a]]);
      doc["distill"][m.axes[a]] = m.values[a][idx[a]];
    }
    const std::string name = cell_name(m.axes, picks);
    for (std::uint64_t s : m.seeds) {
      doc["distill"]["seed"] = s;
      RunConfig c = from_json(doc, base_dir);
      c.output_dir = (fs::path(out_root) / m.matrix_id).string();
      c.run_id = name + "__seed=" + std::to_string(s);
      jobs.push_back({name, std::move(c)});
    }
    std::size_t a = 0;
    for (; a < m.axes.size(); ++a) {
      if (++idx[a] < m.values[a].size()) break;
      idx[a] = 0;
    }
    if (a == m.axes.size()) break;
  }

  MatrixResult result;
  result.runs.resize(jobs.size());
  for (const auto& h : jobs.front().config.rewards.heldout) result.heldout_names.push_back(h.name);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
      const RunConfig& c = jobs[i].config;
      const RunOutcome o = run_config(c, write_outputs);
      CellResult& cr = result.runs[i];
      cr.cell = jobs[i].cell;
      cr.seed = c.distill.seed;
      cr.method = to_string(c.distill.method);
      cr.exit_code = o.exit_code;
      cr.message = o.message;
      if (o.trace) {
        cr.initial_target = o.trace->initial_reward_target;
        cr.final_target = final_target(*o.trace);
        cr.final_heldout = final_heldout(*o.trace);
        cr.wall_per_iter = mean_wall_seconds(*o.trace);
      }
    }
  };
  const int n_threads = std::min<int>(resolve_jobs(jobs_override > 0 ? jobs_override : m.jobs),
                                      static_cast<int>(jobs.size()));
  std::vector<std::thread> pool;
  for (int k = 0; k < n_threads; ++k) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  for (const auto& r : result.runs) result.exit_code = std::max(result.exit_code, r.exit_code);

  if (write_outputs) {
    const fs::path dir = fs::path(out_root) / m.matrix_id;
    std::vector<std::string> rh = {"cell", "method", "seed", "exit_code", "initial_reward_target",
                                   "final_reward_target"};
    for (const auto& n : result.heldout_names) rh.push_back("final_" + n);
    rh.push_back("wall_seconds_per_iter");
    CsvWriter runs(rh);
    for (const auto& r : result.runs) {
      runs.cell(r.cell).cell(r.method).cell(std::to_string(r.seed)).cell(r.exit_code);
      runs.cell(r.initial_target).cell(r.final_target);
      for (std::size_t k = 0; k < result.heldout_names.size(); ++k) {
        runs.cell(k < r.final_heldout.size() ? r.final_heldout[k] : std::nan(""));
      }
      runs.cell(r.wall_per_iter).end_row();
    }
    write_atomic(dir / "runs.csv", runs.str());

    std::vector<std::string> sh = {"cell", "num_runs", "num_failed", "mean_initial_reward_target",
                                   "mean_final_reward_target"};
    for (const auto& n : result.heldout_names) sh.push_back("mean_final_" + n);
    sh.push_back("mean_wall_seconds_per_iter");
    CsvWriter summary(sh);
    std::vector<std::string> order;
    for (const auto& r : result.runs) {
      if (std::find(order.begin(), order.end(), r.cell) == order.end()) order.push_back(r.cell);
    }
    for (const auto& cell : order) {
      int n = 0, failed = 0;
      double init = 0.0, fin = 0.0, wall = 0.0;
      std::vector<double> held(result.heldout_names.size(), 0.0);
      for (const auto& r : result.runs) {
        if (r.cell != cell) continue;
        if (r.exit_code != kOk) {
          ++failed;
          continue;
        }
        ++n;
        init += r.initial_target, fin += r.final_target, wall += r.wall_per_iter;
        for (std::size_t k = 0; k < held.size(); ++k) held[k] += r.final_heldout[k];
      }
      const double dn = n > 0 ? double(n) : std::nan("");
      summary.cell(cell).cell(n).cell(failed).cell(init / dn).cell(fin / dn);
      for (double h : held) summary.cell(h / dn);
      summary.cell(wall / dn).end_row();
    }
    write_atomic(dir / "summary.csv", summary.str());
  }
  return result;
}

// ================================================================== report

struct ReportOptions {
  int smooth_window = 10;
  int bootstrap_resamples = 10000;
  double level = 0.95;
  bool force = false;
};

struct LoadedRun {
  fs::path dir;
  json final_state;
  CsvTable metrics;
};

struct ReportResult {
  int exit_code = kOk;
  std::vector<std::string> problems;
  json summary;
};

/// Aggregates run directories into curve, endpoint and paired-comparison
/// files under `out_dir`.
inline ReportResult report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir,
                           const ReportOptions& opt = {}) {
  ReportResult res;
  if (run_dirs.empty()) {
    res.exit_code = kUsage;
    res.problems.push_back("no run directories given");
    return res;
  }
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) {
    try {
      LoadedRun lr{d, read_json_file(d / "final_state.json"), read_csv(d / "metrics.csv")};
      if (lr.metrics.column("reward_target") < 0) throw Error("metrics.csv lacks reward_target");
      runs.push_back(std::move(lr));
    } catch (const std::exception& e) {
      res.problems.push_back(d.string() + ": " + e.what());
    }
  }
  if (runs.empty()) {
    res.exit_code = kCheckFailure;
    return res;
  }

  std::set<std::string> sched, model;
  for (const auto& r : runs) {
    sched.insert(r.final_state.value("schedule_hash", std::string("?")));
    model.insert(r.final_state.value("model_hash", std::string("?")));
  }
  if ((sched.size() > 1 || model.size() > 1) && !opt.force) {
    res.exit_code = kUsage;
    res.problems.push_back("runs disagree on schedule or model hash; pass --force to aggregate anyway");
    return res;
  }

  // Curves: raw values straight from metrics.csv, plus a trailing average.
  CsvWriter curves({"run", "iter", "reward_target", "reward_target_smoothed"});
  CsvWriter ends({"run", "method", "seed", "initial_reward_target", "final_reward_target"});
  std::map<std::string, std::map<std::uint64_t, double>> finals;  // method -> seed -> final target
  std::vector<std::string> method_order;
  for (const auto& r : runs) {
    const std::string name = r.final_state.value("run_id", r.dir.filename().string());
    const int ci = r.metrics.column("reward_target");
    const int ii = r.metrics.column("iter");
    std::vector<double> raw;
    for (const auto& row : r.metrics.rows) raw.push_back(std::stod(row[static_cast<std::size_t>(ci)]));
    const auto smooth = moving_average(raw, opt.smooth_window);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      curves.cell(name).cell(r.metrics.rows[i][static_cast<std::size_t>(ii)]);
      curves.cell(r.metrics.rows[i][static_cast<std::size_t>(ci)]).cell(smooth[i]).end_row();
    }
    const std::string method = r.final_state.value("method", std::string("?"));
    const auto seed = r.final_state.value("seed", std::uint64_t{0});
    const double fin = r.final_state.value("final_reward_target", std::nan(""));
    ends.cell(name).cell(method).cell(std::to_string(seed));
    ends.cell(r.final_state.value("initial_reward_target", std::nan(""))).cell(fin).end_row();
    if (std::find(method_order.begin(), method_order.end(), method) == method_order.end()) {
      method_order.push_back(method);
    }
    finals[method][seed] = fin;
  }

  json paired = json::array();
  for (std::size_t i = 0; i < method_order.size(); ++i) {
    for (std::size_t j = i + 1; j < method_order.size(); ++j) {
      const auto& A = finals[method_order[i]];
      const auto& B = finals[method_order[j]];
      std::vector<double> a, b;
      for (const auto& [seed, v] : A) {
        if (auto it = B.find(seed); it != B.end()) a.push_back(v), b.push_back(it->second);
      }
      if (a.empty()) continue;
      const BootstrapCI ci = paired_bootstrap(a, b, opt.bootstrap_resamples, opt.level);
      int wins = 0;
      for (std::size_t k = 0; k < a.size(); ++k) wins += a[k] > b[k];
      paired.push_back({{"a", method_order[i]},
                        {"b", method_order[j]},
                        {"num_pairs", a.size()},
                        {"mean_difference", ci.mean},
                        {"ci_low", ci.low},
                        {"ci_high", ci.high},
                        {"level", ci.level},
                        {"a_wins", wins},
                        {"excludes_zero", ci.low > 0.0 || ci.high < 0.0}});
    }
  }
  res.summary = {{"num_runs", runs.size()}, {"paired", paired}, {"problems", res.problems}};
  fs::create_directories(out_dir);
  write_atomic(out_dir / "curves.csv", curves.str());
  write_atomic(out_dir / "endpoints.csv", ends.str());
  write_atomic(out_dir / "paired.json", res.summary.dump(2) + "\n");
  if (!res.problems.empty()) res.exit_code = kCheckFailure;
  return res;
}

// ================================================================== sample

struct SampleOptions {
  int num_samples = 10000;
  int num_steps = 50;
  double gamma = 1.0;
  std::uint64_t seed = 0;
};

struct SampleResult {
  std::vector<Vec> samples;
  Vec empirical_mean;
  Vec exact_mean;  // sum_k w_k m_k(y), the unguided target
  Vec standard_error;
  bool within_3se = false;
};

/// Deterministic DDIM from x_T drawn out of the exact noised marginal down to
/// t = 0, guided by the config's negative embedding at `gamma`.
inline SampleResult ddim_sample(const GmmScoreModel& model, const Embedding& y, const Embedding& neg,
                                const Schedule& sch, const SampleOptions& opt) {
  if (opt.num_samples < 2) throw ParameterError("ddim_sample: need at least 2 samples");
  Rng rng(opt.seed, "sampler");
  const int T = sch.num_steps;
  const double aT = sch.alpha_at(T), sT = sch.sigma_at(T);
  const Eigen::Index d = model.dim();
  std::vector<Eigen::LLT<Mat>> chol;
  for (const auto& S : model.covariances) chol.emplace_back(aT * aT * S + sT * sT * Mat::Identity(d, d));
  const auto ts = ddim_timesteps(T, opt.num_steps);

  SampleResult out;
  out.empirical_mean = Vec::Zero(d);
  Vec sq = Vec::Zero(d);
  for (int n = 0; n < opt.num_samples; ++n) {
    double u = rng.uniform(), acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < model.weights.size(); ++k) {
      acc += model.weights[k];
      if (u < acc) break;
    }
    NoisyState st{aT * model.component_mean(k, y.v) + Mat(chol[k].matrixL()) * rng.normal_vec(d), T};
    for (std::size_t i = 1; i < ts.size(); ++i) {
      st = ddim_step(st, cfg_eps(model, st, y, neg, opt.gamma, sch), ts[i], sch);
    }
    out.empirical_mean += st.x;
    sq += st.x.cwiseProduct(st.x);
    out.samples.push_back(std::move(st.x));
  }
  const double N = double(opt.num_samples);
  out.empirical_mean /= N;
  const Vec var = ((sq / N) - out.empirical_mean.cwiseProduct(out.empirical_mean)) * (N / (N - 1.0));
  out.standard_error = (var.cwiseMax(0.0) / N).cwiseSqrt();
  out.exact_mean = Vec::Zero(d);
  for (std::size_t k = 0; k < model.weights.size(); ++k) out.exact_mean += model.weights[k] * model.component_mean(k, y.v);
  out.within_3se = ((out.empirical_mean - out.exact_mean).cwiseAbs().array() <= 3.0 * out.standard_error.array()).all();
  return out;
}

}  // namespace psdlab::harness
