#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "psdlab/harness/config.hpp"
#include "psdlab/harness/gradcheck.hpp"
#include "psdlab/harness/io.hpp"
#include "psdlab/harness/runner.hpp"

namespace fs = std::filesystem;
using namespace psdlab;
using namespace psdlab::harness;

namespace {

int cmd_run(const std::string& config_path, const std::optional<std::string>& out,
            const std::optional<std::uint64_t>& seed) {
  RunConfig c;
  try {
    c = load_config(config_path);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  }
  if (out) c.output_dir = *out;
  if (seed) c.distill.seed = *seed;
  const RunOutcome o = run_config(c);
  if (o.exit_code != kOk) {
    std::cerr << o.message << "\n";
    return o.exit_code;
  }
  std::printf("run %s: %d iterations, reward_target %.6g -> %.6g\n", c.run_id.c_str(), c.distill.num_iters,
              o.trace->initial_reward_target, final_target(*o.trace));
  std::printf("outputs in %s\n", run_dir(c).string().c_str());
  return kOk;
}

int cmd_ablate(const std::string& config_path, const std::optional<std::string>& out, int jobs) {
  MatrixConfig m;
  try {
    m = matrix_from_json(read_json_file(config_path));
    if (out) m.output_dir = *out;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  }
  MatrixResult r;
  try {
    r = run_matrix(m, jobs, true, fs::path(config_path).parent_path());
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  }
  int failed = 0;
  for (const auto& run : r.runs) {
    if (run.exit_code != kOk) {
      ++failed;
      std::cerr << run.cell << " seed " << run.seed << ": " << run.message << "\n";
    }
  }
  std::printf("%zu runs, %d failed; summary in %s\n", r.runs.size(), failed,
              (fs::path(std::getenv("PSDLAB_OUT") && *std::getenv("PSDLAB_OUT") ? std::getenv("PSDLAB_OUT")
                                                                                 : m.output_dir) /
               m.matrix_id / "summary.csv")
                  .string()
                  .c_str());
  return r.exit_code;
}

int cmd_gradcheck(const GradcheckOptions& opt) {
  const GradcheckReport rep = gradcheck(opt);
  for (const auto& c : rep.checks) {
    std::printf("%-26s %s  instances=%d failures=%d max_rel_err=%.3e\n", c.name.c_str(), c.pass() ? "ok  " : "FAIL",
                c.instances, c.failures, c.max_rel_err);
  }
  std::printf("rel_tol=%.3g: %s\n", opt.fd.rel_tol, rep.pass() ? "all checks passed" : "some checks failed");
  return rep.pass() ? kOk : kCheckFailure;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out, const ReportOptions& opt) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const ReportResult r = report(paths, out, opt);
  for (const auto& p : r.problems) std::cerr << p << "\n";
  if (!r.summary.is_null()) {
    for (const auto& p : r.summary["paired"]) {
      std::printf("%s - %s: mean %.6g, %.0f%% CI [%.6g, %.6g], %s wins %d/%d\n",
                  p["a"].get<std::string>().c_str(), p["b"].get<std::string>().c_str(),
                  p["mean_difference"].get<double>(), 100.0 * p["level"].get<double>(), p["ci_low"].get<double>(),
                  p["ci_high"].get<double>(), p["a"].get<std::string>().c_str(), p["a_wins"].get<int>(),
                  p["num_pairs"].get<int>());
    }
    std::printf("report written to %s\n", out.c_str());
  }
  return r.exit_code;
}

int cmd_sample(const std::string& config_path, const std::optional<std::string>& out, SampleOptions opt) {
  try {
    const RunConfig c = load_config(config_path);
    const ResolvedRun r = resolve(c);
    const SampleResult s = ddim_sample(r.model, r.prompt, r.negative_init, r.schedule, opt);
    for (Eigen::Index i = 0; i < s.empirical_mean.size(); ++i) {
      std::printf("dim %ld: empirical mean %.6f  exact %.6f  stderr %.2e\n", static_cast<long>(i),
                  s.empirical_mean[i], s.exact_mean[i], s.standard_error[i]);
    }
    if (out) {
      std::vector<std::string> h;
      for (Eigen::Index i = 0; i < s.empirical_mean.size(); ++i) h.push_back("x" + std::to_string(i));
      CsvWriter w(h);
      for (const auto& x : s.samples) {
        for (Eigen::Index i = 0; i < x.size(); ++i) w.cell(x[i]);
        w.end_row();
      }
      write_atomic(fs::path(*out) / "samples.csv", w.str());
    }
    if (opt.gamma != 1.0) {
      std::printf("gamma != 1: the exact mean is the unguided one; no check applied\n");
      return kOk;
    }
    std::printf("%s\n", s.within_3se ? "mean within 3 standard errors" : "mean outside 3 standard errors");
    return s.within_3se ? kOk : kCheckFailure;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psdlab: preference-guided score distillation on analytic diffusion models"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  int jobs = 0;

  auto* run = app.add_subcommand("run", "Run one configured optimisation and write its outputs");
  run->add_option("--config", config, "Run config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory (overrides config and PSDLAB_OUT)");
  run->add_option("--seed", seed, "Seed override");

  auto* ablate = app.add_subcommand("ablate", "Run a method/hyper-parameter/seed matrix");
  ablate->add_option("--config", config, "Matrix config JSON")->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", out, "Output directory");
  ablate->add_option("--jobs", jobs, "Worker threads (default PSDLAB_JOBS or all cores)");

  GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic derivatives with finite differences");
  grad->add_option("--instances", gc.instances, "Random instances per check")->check(CLI::PositiveNumber);
  grad->add_option("--seed", gc.seed, "Instance seed");
  grad->add_option("--rel-tol", gc.fd.rel_tol, "Relative tolerance");
  grad->add_option("--step", gc.fd.h, "Finite-difference step");
  grad->add_flag("--flip-jacobian-sign", gc.flip_jacobian_sign, "Negate the embedding Jacobian (negative control)");

  std::vector<std::string> dirs;
  std::string report_out = "report";
  ReportOptions ropt;
  auto* rep = app.add_subcommand("report", "Aggregate run directories into curves and paired statistics");
  rep->add_option("runs", dirs, "Run directories");
  rep->add_option("--out", report_out, "Report directory");
  rep->add_option("--window", ropt.smooth_window, "Smoothing window")->check(CLI::PositiveNumber);
  rep->add_option("--resamples", ropt.bootstrap_resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);
  rep->add_flag("--force", ropt.force, "Aggregate runs with mismatched schedule or model hashes");

  SampleOptions sopt;
  auto* samp = app.add_subcommand("sample", "DDIM sanity sampler on the configured model");
  samp->add_option("--config", config, "Run config JSON")->required()->check(CLI::ExistingFile);
  samp->add_option("--out", out, "Directory for samples.csv");
  samp->add_option("--samples", sopt.num_samples, "Number of samples");
  samp->add_option("--steps", sopt.num_steps, "DDIM steps");
  samp->add_option("--gamma", sopt.gamma, "Guidance scale against the negative embedding");
  samp->add_option("--seed", sopt.seed, "Sampler seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(config, out, seed);
    if (*ablate) return cmd_ablate(config, out, jobs);
    if (*grad) return cmd_gradcheck(gc);
    if (*rep) return cmd_report(dirs, report_out, ropt);
    if (*samp) return cmd_sample(config, out, sopt);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
