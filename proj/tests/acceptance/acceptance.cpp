// Acceptance checks.  Each criterion prints exactly one PASS/FAIL line with
// its measured values and elapsed time; the process exits non-zero if any
// selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "psdlab/harness/config.hpp"
#include "psdlab/harness/gradcheck.hpp"
#include "psdlab/harness/io.hpp"
#include "psdlab/harness/runner.hpp"
#include "psdlab/harness/stats.hpp"
#include "psdlab/oracle.hpp"
#include "psdlab/psdlab.hpp"

using namespace psdlab;
using namespace psdlab::harness;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  const char* id;
  const char* title;
  double time_limit_s;
  std::function<Verdict()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("psdlab_acceptance_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool bit_equal(const Vec& a, const Vec& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

// ------------------------------------------------------------------ criteria

constexpr double kGradTol = 1e-5;
constexpr int kGradInstances = 100;

Verdict gradient_exactness() {
  GradcheckOptions opt;
  opt.instances = kGradInstances;
  opt.fd.rel_tol = kGradTol;
  const GradcheckReport rep = gradcheck(opt);
  std::string worst;
  double worst_err = 0.0;
  int failures = 0;
  for (const auto& c : rep.checks) {
    failures += c.failures;
    if (c.max_rel_err >= worst_err) worst_err = c.max_rel_err, worst = c.name;
  }
  return {rep.pass(), fmt("%zu checks x %d instances, tol %.0e, failures %d, worst %s %.2e", rep.checks.size(),
                          kGradInstances, kGradTol, failures, worst.c_str(), worst_err)};
}

Verdict sampler_sanity() {
  GmmScoreModel model;
  model.weights = {1.0};
  model.cond_maps = {(Mat(2, 2) << 0.5, 0.1, -0.2, 0.4).finished()};
  model.offsets = {(Vec(2) << 1.0, -0.5).finished()};
  model.covariances = {(Mat(2, 2) << 0.3, 0.1, 0.1, 0.2).finished()};
  const Embedding y{(Vec(2) << 1.0, 0.5).finished()};
  SampleOptions opt;
  opt.num_samples = 10000;
  opt.num_steps = 50;
  opt.gamma = 1.0;
  const SampleResult s = ddim_sample(model, y, Embedding::unconditional(2), default_schedule(), opt);
  const Vec z = (s.empirical_mean - s.exact_mean).cwiseQuotient(s.standard_error);
  return {s.within_3se, fmt("10000 samples, 50 steps, |z| = (%.2f, %.2f), limit 3", std::abs(z[0]), std::abs(z[1]))};
}

Verdict tweedie_identity() {
  const Schedule sch = default_schedule();
  Rng rng(0, "acceptance-tweedie");
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const GmmScoreModel m = random_gmm(rng.uniform_int(1, 4), 2, 1, rng.engine()());
    const Embedding e{rng.normal_vec(2)};
    const int t = rng.uniform_int(1, sch.num_steps);
    const Vec x0 = m.component_mean(0, e.v) + rng.normal_vec(m.dim());
    const NoisyState st = add_noise(x0, t, rng.normal_vec(m.dim()), sch);
    const Vec got = tweedie_predict(st, eps_predict(m, st, e, sch), sch);
    const Vec want = oracle::gaussian_posterior_mean(m.component_mean(0, e.v), m.covariances[0], st.x, sch, t);
    worst = std::max(worst, oracle::relative_error(got, want));
  }
  return {worst <= 1e-8, fmt("1000 instances, max relative error %.2e, tol 1e-08", worst)};
}

Verdict exact_reductions() {
  const StandardTask task = standard_task();
  const Schedule sch = default_schedule();
  auto trajectory = [&](const DistillConfig& c, std::uint64_t seed) {
    RngStreams rng(seed);
    OptimState st = OptimState::start(make_default_multiview(2, rng.init.normal_vec(4)), task.negative_init);
    return distill_run(st, c, task.model, task.rewards, task.prompt, sch, rng);
  };
  auto same = [](const RunTrace& a, const RunTrace& b) {
    if (a.thetas.size() != b.thetas.size()) return false;
    for (std::size_t i = 0; i < a.thetas.size(); ++i) {
      if (!bit_equal(a.thetas[i], b.thetas[i]) || !bit_equal(a.negs[i], b.negs[i])) return false;
    }
    return true;
  };
  int a_ok = 0, b_ok = 0;
  const int seeds = 5;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    DistillConfig psd = standard_distill_config();
    psd.beta_r_override = 0.0;
    DistillConfig cfg = standard_distill_config();
    cfg.method = Method::NoPref;
    a_ok += same(trajectory(psd, seed), trajectory(cfg, seed));
    DistillConfig dr = standard_distill_config();
    dr.method = Method::DreamReward;
    dr.lambda_r = 0.0;
    DistillConfig sds = dr;
    sds.method = Method::SDS;
    b_ok += same(trajectory(dr, seed), trajectory(sds, seed));
  }

  Rng rng(0, "acceptance-bracket");
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const GmmScoreModel m = random_gmm(2, 2, rng.uniform_int(1, 3), rng.engine()());
    const Embedding y{rng.normal_vec(2)};
    const Embedding n{rng.normal_vec(2), EmbeddingLabel::Negative};
    const int t = rng.uniform_int(1, sch.num_steps);
    const WinLosePair p = make_pair_from_noises(rng.normal_vec(2), t, rng.normal_vec(2), rng.normal_vec(2), m,
                                                task.rewards.target, y, n, 1.0, sch);
    // Unit weight at gamma = 1, with the sampled noises restored as control
    // variates.
    const Vec ours = preference_guidance(p, m, y, n, 1.0, sch) - (p.eps_win - p.eps_lose);
    const Vec bracket = (eps_predict(m, {p.x_t_win, t}, y, sch) - p.eps_win) -
                        (eps_predict(m, {p.x_t_lose, t}, y, sch) - p.eps_lose);
    worst = std::max(worst, (ours - bracket).norm());
  }
  const bool pass = a_ok == seeds && b_ok == seeds && worst <= 1e-12;
  return {pass, fmt("(a) bit-identical %d/%d seeds x 500 iters, (b) %d/%d, (c) 1000 instances max |diff| %.2e "
                    "tol 1e-12",
                    a_ok, seeds, b_ok, seeds, worst)};
}

Verdict norm_balance() {
  const RunConfig c = from_json(json{{"mode", "distill"}, {"distill", {{"num_iters", 500}}}});
  const RunOutcome o = run_config(c, false);
  if (o.exit_code != kOk) return {false, o.message};
  double worst = 0.0;
  int steps = 0;
  for (const auto& r : o.trace->records) {
    const double lhs = r.beta_r * r.norm_pref;
    const double rhs = c.distill.gamma * logistic(-r.delta_r) * r.norm_cls;
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, rhs));
    ++steps;
  }
  return {steps == 500 && worst <= 1e-12, fmt("%d logged steps, max relative gap %.2e, tol 1e-12", steps, worst)};
}

Verdict preference_efficacy() {
  std::vector<double> with, without;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const char* method : {"psd", "no_pref"}) {
      const RunConfig c = from_json(json{{"mode", "image_gen"}, {"seed", seed}, {"distill", {{"method", method}}}});
      const RunOutcome o = run_config(c, false);
      if (o.exit_code != kOk) return {false, o.message};
      (std::strcmp(method, "psd") == 0 ? with : without).push_back(final_target(*o.trace));
    }
  }
  const BootstrapCI ci = paired_bootstrap(with, without, 10000, 0.95);
  int wins = 0;
  for (std::size_t i = 0; i < with.size(); ++i) wins += with[i] > without[i];
  const bool pass = ci.mean > 0.0 && ci.low > 0.0;
  return {pass, fmt("20 paired seeds, mean difference %.4f, 95%% CI [%.4f, %.4f], wins %d/20", ci.mean, ci.low,
                    ci.high, wins)};
}

Verdict negative_ascent() {
  constexpr int kSeeds = 20, kWindow = 10;
  auto run = [](double lr_neg, std::uint64_t seed) {
    const RunConfig c = from_json(json{{"mode", "distill"}, {"seed", seed}, {"distill", {{"lr_neg", lr_neg}}}});
    RunOutcome o = run_config(c, false);
    if (o.exit_code != kOk) throw Error(o.message);
    return *o.trace;
  };
  std::vector<double> mean_curve;
  int better = 0, pooled_up = 0, pooled_total = 0;
  double final_default = 0.0, final_x10 = 0.0;
  std::string heldout;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const RunTrace def = run(0.01, seed);
    const RunTrace off = run(0.0, seed);
    const RunTrace big = run(0.1, seed);
    std::vector<double> curve;
    for (const auto& r : def.records) curve.push_back(r.reward_target);
    if (mean_curve.empty()) mean_curve.assign(curve.size(), 0.0);
    for (std::size_t i = 0; i < curve.size(); ++i) mean_curve[i] += curve[i] / kSeeds;
    const TrendCount tc = count_non_decreasing(block_means(curve, kWindow));
    pooled_up += tc.non_decreasing, pooled_total += tc.total;
    better += final_target(def) > final_target(off);
    final_default += final_target(def) / kSeeds;
    final_x10 += final_target(big) / kSeeds;
    const auto hd = final_heldout(def), hb = final_heldout(big);
    heldout += fmt(" s%llu:[%.3f,%.3f|%.3f,%.3f]", static_cast<unsigned long long>(seed), hd[0], hd[1], hb[0], hb[1]);
  }
  const TrendCount tc = count_non_decreasing(block_means(mean_curve, kWindow));
  const double frac = double(tc.non_decreasing) / double(tc.total);
  const bool pass = frac >= 0.9 && better >= 18 && final_x10 >= final_default;
  std::printf("AC7 held-out rewards per seed [default lr_neg | x10 lr_neg]:%s\n", heldout.c_str());
  return {pass, fmt("seed-mean curve non-decreasing in %d/%d windows (%.3f, need 0.9; per-seed pooled %.3f), "
                    "beats lr_neg=0 in %d/20 (need 18), x10 mean %.4f vs default %.4f",
                    tc.non_decreasing, tc.total, frac, double(pooled_up) / pooled_total, better, final_x10,
                    final_default)};
}

Verdict weight_bound() {
  const fs::path out = scratch("ac8");
  const MatrixConfig m = matrix_from_json(json{
      {"base", {{"mode", "distill"}, {"distill", {{"anneal", {{"t_max_frac", 0.7}, {"t_min_frac", 0.02}}}}}}},
      {"grid", {{"method", {"psd", "no_pref", "dreamdpo", "pref_only"}}, {"noising", {"independent", "inversion_predicted"}}}},
      {"seeds", {{"from", 0}, {"count", 25}}},
      {"matrix_id", "weights"},
      {"output_dir", out.string()}});
  const MatrixResult r = run_matrix(m);
  if (r.exit_code != kOk) return {false, "matrix run failed"};
  long pairs = 0, violations = 0;
  double lo = 1.0, hi = 0.0;
  for (const auto& run : r.runs) {
    const CsvTable t = read_csv(out / "weights" / (run.cell + "__seed=" + std::to_string(run.seed)) / "metrics.csv");
    const int w = t.column("pref_weight"), dr = t.column("delta_r");
    for (const auto& row : t.rows) {
      const double p = std::stod(row[w]);
      const double d = std::stod(row[dr]);
      ++pairs;
      lo = std::min(lo, p), hi = std::max(hi, p);
      if (!(p > 0.0 && p <= 0.5) || !(d >= 0.0)) ++violations;
    }
  }
  fs::remove_all(out);
  return {pairs >= 100000 && violations == 0,
          fmt("%ld pairs over %zu runs, weight range [%.3e, %.3f], violations %ld", pairs, r.runs.size(), lo, hi,
              violations)};
}

Verdict determinism() {
  const fs::path a = scratch("ac9a"), b = scratch("ac9b");
  RunConfig c = from_json(json{{"mode", "distill"}, {"seed", 7}});
  c.output_dir = a.string();
  const int ea = run_config(c).exit_code;
  c.output_dir = b.string();
  const int eb = run_config(c).exit_code;
  const std::string ma = read_file(a / c.run_id / "metrics.csv");
  const std::string mb = read_file(b / c.run_id / "metrics.csv");
  fs::remove_all(a);
  fs::remove_all(b);
  return {ea == kOk && eb == kOk && ma == mb, fmt("metrics.csv %zu bytes, identical: %s", ma.size(),
                                                  ma == mb ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  ::unsetenv("PSDLAB_OUT");
  std::string only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = argv[++i];
    } else {
      std::fprintf(stderr, "usage: %s [--only ACn]\n", argv[0]);
      return 2;
    }
  }

  const std::vector<Criterion> criteria = {
      {"AC1", "gradient exactness", 60, gradient_exactness},
      {"AC2", "sampler sanity", 30, sampler_sanity},
      {"AC3", "Tweedie posterior identity", 5, tweedie_identity},
      {"AC4", "exact reductions", 30, exact_reductions},
      {"AC5", "adaptive scale norm balance", 10, norm_balance},
      {"AC6", "preference guidance efficacy", 120, preference_efficacy},
      {"AC7", "negative embedding ascent", 180, negative_ascent},
      {"AC8", "preference weight bound", 30, weight_bound},
      {"AC9", "determinism", 30, determinism},
  };

  int selected = 0, failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && only != c.id) continue;
    ++selected;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.time_limit_s;
    const bool pass = v.pass && in_time;
    failed += !pass;
    std::printf("%s %s %s: %s; %.2f s (limit %.0f s)\n", c.id, pass ? "PASS" : "FAIL", c.title, v.detail.c_str(),
                secs, c.time_limit_s);
    std::fflush(stdout);
  }
  if (selected == 0) {
    std::fprintf(stderr, "unknown criterion '%s'\n", only.c_str());
    return 2;
  }
  return failed == 0 ? 0 : 1;
}
