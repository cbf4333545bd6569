// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
#include "arlab/diagnostics.hpp"
#include "arlab/presets.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

using namespace arlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::shared_ptr<const SequenceDistribution> shared(SequenceDistribution d) {
  return std::make_shared<const SequenceDistribution>(std::move(d));
}

// Flow matrix of the zero-mean bivariate law with correlation rho, per eigenmode.
Mat bivariate_flow(double rho, double t) {
  auto g = [&](double s2) { return std::sqrt(s2 / ((1 - t) * (1 - t) * s2 + t * t)); };
  const double a = g(1 + rho), b = g(1 - rho);
  Mat m(2, 2);
  m << (a + b) / 2, (a - b) / 2, (a - b) / 2, (a + b) / 2;
  return m;
}

Outcome velocity_oracle() {
  const auto dist = standard_normal_dist({1, 1, 1});
  double worst = 0.0;
  for (int i = 1; i <= 9; ++i) {
    const double t = 0.1 * i;
    Mat x(1, 9);
    for (int j = 0; j < 9; ++j) x(0, j) = -2.0 + 0.5 * j;
    const Mat v = velocity_bi(dist, x, t);
    const double k = (2 * t - 1) / (2 * t * t - 2 * t + 1);
    worst = std::max(worst, (v - k * x).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-10, fmt("max abs error %.3g", worst)};
}

Outcome solver_order() {
  const auto dist = bivariate_gaussian(0.8);
  Rng rng(1);
  const Mat x = standard_normal(2, 64, rng);
  const Mat exact = bivariate_flow(0.8, 1.0) * x;
  std::vector<double> err;
  for (int steps : {4, 8, 16, 32}) err.push_back((flow_map_bi(dist, x, 1.0, steps, Solver::heun) - exact).norm());
  bool ok = true;
  std::string detail = "error ratios";
  for (std::size_t k = 1; k < err.size(); ++k) {
    const double r = err[k - 1] / err[k];
    ok = ok && r >= 3.0 && r <= 5.0;
    detail += fmt(" %.3f", r);
  }
  return {ok, detail};
}

Outcome injectivity_audit() {
  const InjectivityResult r8 = injectivity_variance(bivariate_gaussian(0.8), 0, 0.5, 20, 10000, 64, 30);
  const InjectivityResult r0 = injectivity_variance(bivariate_gaussian(0.0), 0, 0.5, 20, 10000, 64, 31);
  const double v8 = r8.mean_variance.value, v0 = r0.anchor_variance.maxCoeff();
  const bool ok = std::abs(v8 - 0.0650) < 0.1 * 0.0650 && v0 < 1e-3;
  return {ok, fmt("rho=0.8 variance %.5f (target 0.0650), rho=0 max anchor variance %.3g", v8, v0)};
}

Outcome collapse() {
  const TimestepGrid grid = TimestepGrid::standard();
  TrainConfig cfg;
  cfg.ridge_lambda = 1e-3;
  CollapseOptions noisy;
  noisy.mode = PrefixMode::noisy;
  noisy.n_anchor = 200;
  noisy.n_resample = 2000;
  noisy.n_moment = 20000;
  noisy.seed = 3;
  bool ok = true;
  std::string detail;
  for (double rho : {0.8, 0.0}) {
    const auto dist = shared(bivariate_gaussian(rho));
    const auto oracle = std::make_shared<const OracleArTeacher>(dist);
    // 5000 trajectories give 2e4 (state, endpoint) pairs over the four grid times.
    const PairDataset bi = make_pairs_bi(*dist, grid, 5000, 64, 1);
    const StageResult asym =
        ode_distill(bi, ChunkwiseStudent(dist->spec, Role::generator, 1024, 0.5, 7), cfg, PrefixMode::noisy, 2);
    const CollapseResult c = collapse_gap(asym.model, *dist, *oracle, noisy);
    const Estimate& d = c.deficit;
    if (rho > 0) {
      ok = ok && c.rms < 0.05 && d.value > 5 * d.se;
      const PairDataset causal_pairs = make_pairs_causal(*dist, *oracle, grid, 5000, 64, 4);
      const StageResult causal = ode_distill(causal_pairs, ChunkwiseStudent(dist->spec, Role::generator, 1024, 0.5, 7),
                                             cfg, PrefixMode::clean, 5);
      const double ed_c = conditional_energy_distance(causal.model, *dist, grid, 20, 1000, 9).value;
      const double ed_a = conditional_energy_distance(asym.model, *dist, grid, 20, 1000, 9).value;
      ok = ok && ed_c < 0.05 && ed_c < 0.5 * ed_a;
      detail += fmt("rho=0.8: rms %.4f, deficit %.4f (%.1f SE); energy distance causal %.4f vs asymmetric %.4f", c.rms,
                    d.value, d.value / d.se, ed_c, ed_a);
    } else {
      const bool zero = std::abs(d.value) <= 3 * std::max(d.se, 1e-12);
      ok = ok && c.rms < 0.05 && zero;
      detail += fmt("; rho=0: rms %.4f, deficit %.2g (SE %.2g)", c.rms, d.value, d.se);
    }
  }
  return {ok, detail};
}

Outcome forcing_mismatch() {
  const auto dist = shared(bivariate_gaussian(0.8));
  const Estimate mc = df_mismatch(*dist, 1, 0.5, 2000, 1);
  const double exact = df_mismatch_exact(*dist, 1, 0.5);
  TrainConfig cfg;
  cfg.sample_count = 100000;
  const StageResult tf =
      train_ar_diffusion_tf(*dist, ChunkwiseStudent(dist->spec, Role::ar_velocity, 256, 1.0, 7), cfg, 2);
  const StageResult df =
      train_ar_diffusion_df(*dist, ChunkwiseStudent(dist->spec, Role::ar_velocity, 256, 1.0, 7), cfg, 2);
  const LearnedArTeacher tft(std::make_shared<const ChunkwiseStudent>(tf.model));
  const LearnedArTeacher dft(std::make_shared<const ChunkwiseStudent>(df.model));
  const double kl_tf = model_conditional_kl(tft, *dist, 1, 0.2, 0.8, 200, 3).value;
  const double kl_df = model_conditional_kl(dft, *dist, 1, 0.2, 0.8, 200, 3).value;
  // At t = 0.5 and rho = 0.8 the per-draw KL does not depend on the prefix, so
  // the sample SE is exactly 0; a 1e-12 floor leaves room for rounding only.
  const double gap = std::abs(mc.value - exact);
  // t = 0.25, where the per-draw KL varies with the prefix.
  const Estimate mc2 = df_mismatch(*dist, 1, 0.25, 2000, 2);
  const double exact2 = df_mismatch_exact(*dist, 1, 0.25);
  const bool ok = gap <= 3 * std::max(mc.se, 1e-12) && std::abs(mc2.value - exact2) < 3 * mc2.se && kl_df >= 5 * kl_tf;
  return {ok, fmt("MC %.6f (SE %.2g) vs exact %.6f, |difference| %.2g; at t=0.25 %.5f +- %.5f vs %.5f; "
                  "model KL DF %.4f vs TF %.4f (ratio %.1f)",
                  mc.value, mc.se, exact, gap, mc2.value, mc2.se, exact2, kl_df, kl_tf, kl_df / kl_tf)};
}

Outcome distribution_matching() {
  const auto dist = shared(two_mode_mixture(3.0, 0.25));
  const auto oracle = std::make_shared<const OracleArTeacher>(dist);
  const VelocityScore real(oracle);
  const TimestepGrid grid{{1.0}};
  TrainConfig cfg;
  cfg.optimizer = Optimizer::adam;
  cfg.learning_rate = 1e-2;
  cfg.step_count = 500;
  cfg.batch_size = 512;
  const ChunkwiseStudent gen(dist->spec, Role::generator, 256, 1.0, 11);
  const ChunkwiseStudent fake(dist->spec, Role::fake_score, 256, 1.0, 12);
  Rng rng(5);
  const Mat data = dist->mixture.sample(2000, rng);
  const Mat none(0, 2000);
  const double ed0 = energy_distance(few_step_sample(gen, 0, grid, none, 6), data);
  const StageResult r = dmd_train(gen, real, fake, *dist, grid, cfg, 7);
  const double ed1 = energy_distance(few_step_sample(r.model, 0, grid, none, 6), data);

  // Gradient through the final generator call against central differences of
  // the surrogate sum_b d_b x~_b(theta), which is linear in theta.
  const LinearStudent& head = r.model.head(0);
  const Mat empty(0, 64);
  const FewStepOutput out = few_step_sample_traced(r.model, 0, grid, empty, 8);
  const Mat d = real.score(0, empty, out.sample, 0.5);
  const Mat grad = dmd_generator_gradient(head, out.last_input, empty, out.last_time, d);
  auto surrogate = [&](const Mat& theta) {
    LinearStudent h = head;
    h.set_theta(theta);
    const Mat x = out.last_input - out.last_time * h.predict(out.last_input, empty, out.last_time);
    return (d.array() * x.array()).sum();
  };
  Mat fd(grad.rows(), grad.cols());
  const double h = 1e-5;
  for (Index k = 0; k < grad.size(); ++k) {
    Mat plus = head.theta(), minus = plus;
    plus(k) += h;
    minus(k) -= h;
    fd(k) = -(surrogate(plus) - surrogate(minus)) / (2 * h) / 64.0;
  }
  const double rel = (fd - grad).norm() / grad.norm();
  const Mat s = real.score(0, empty, out.sample, 0.5);
  const double fixed = dmd_generator_gradient(head, out.last_input, empty, out.last_time, s - s).norm();
  const bool ok = ed1 < 0.2 * ed0 && rel < 1e-6 && fixed < 1e-8;
  return {ok, fmt("energy distance %.4f -> %.4f (ratio %.3f); FD rel error %.2g; gradient with matched scores %.2g", ed0,
                  ed1, ed1 / ed0, rel, fixed)};
}

Outcome consistency_distillation() {
  const auto dist = shared(bivariate_gaussian(0.8));
  const OracleArTeacher oracle(dist);
  TrainConfig cfg;
  cfg.optimizer = Optimizer::adam;
  cfg.learning_rate = 1e-2;
  cfg.step_count = 20000;
  cfg.batch_size = 256;
  cfg.ema_rate = 0.99;
  CollapseOptions eval;
  eval.mode = PrefixMode::clean;
  eval.n_anchor = 2000;
  eval.n_moment = 2000;
  eval.steps = 200;
  eval.seed = 3;
  const ChunkwiseStudent fresh(dist->spec, Role::generator, 256, 1.0, 11);
  const StageResult causal = cd_train(*dist, oracle, fresh, cfg, TeacherKind::autoregressive, 5);
  const StageResult asym = cd_train(*dist, oracle, fresh, cfg, TeacherKind::bidirectional, 5);

  Rng rng(4);
  double boundary = 0.0;
  for (Index i = 0; i < 2; ++i) {
    const Mat x = standard_normal(1, 100, rng), y = standard_normal(i, 100, rng);
    boundary = std::max(boundary, (causal.model.generate(i, x, y, 0.0) - x).cwiseAbs().maxCoeff());
  }
  const double rms_c = collapse_gap(causal.model, *dist, oracle, eval).rms;
  const double rms_a = collapse_gap(asym.model, *dist, oracle, eval).rms;
  const double gap = consistency_gap(causal.model, oracle, *dist, cfg.cd_grid, 4800, 9).value;
  const bool ok = boundary == 0.0 && rms_c < 0.05 && rms_a > rms_c;
  return {ok, fmt("boundary deviation %.3g; RMS to 200-step flow causal %.4f vs asymmetric %.4f; self-consistency %.4f",
                  boundary, rms_c, rms_a, gap)};
}

Outcome infrastructure() {
  Rng rng(1);
  const FeatureSpec spec{64, 2, 3, 1.0, 5};
  LinearStudent model(spec, Role::ar_velocity);
  model.set_theta(standard_normal(64, 2, rng));
  double worst = 0.0;
  const double h = 1e-6;
  for (int p = 0; p < 100; ++p) {
    const Vec c = standard_normal(2, 1, rng), pre = standard_normal(3, 1, rng);
    const double t = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    const Mat jac = grad_output_wrt_params(model, c, pre, t);
    Mat fd(jac.rows(), jac.cols());
    for (Index k = 0; k < model.theta().size(); ++k) {
      LinearStudent plus = model, minus = model;
      plus.theta()(k) += h;
      minus.theta()(k) -= h;
      fd.col(k) = (plus.predict(c, pre, t) - minus.predict(c, pre, t)) / (2 * h);
    }
    worst = std::max(worst, (fd - jac).norm() / jac.norm());
  }

  const Mat phi = FeatureMap(FeatureSpec{32, 1, 0, 1.0, 6}).features(standard_normal(1, 500, rng), Mat(0, 500), 0.5);
  const Mat y = standard_normal(2, 500, rng);
  const double lambda = 1e-3;
  const Mat theta = fit_ridge(phi, y, lambda);
  auto objective = [&](const Mat& th) {
    return (th.transpose() * phi - y).squaredNorm() + lambda * th.squaredNorm();
  };
  const double best = objective(theta);
  bool strict = true;
  for (int k = 0; k < 200; ++k) {
    Mat dir = standard_normal(theta.rows(), theta.cols(), rng);
    dir *= 1e-3 / dir.norm();
    strict = strict && objective(theta + dir) > best;
  }
  for (Index k = 0; k < theta.size(); ++k)
    for (double s : {-1e-3, 1e-3}) {
      Mat th = theta;
      th(k) += s;
      strict = strict && objective(th) > best;
    }
  return {worst < 1e-6 && strict,
          fmt("max Jacobian rel error %.2g over 100 points; ridge optimum strict under 1e-3 perturbations: %s", worst,
              strict ? "yes" : "no")};
}

std::vector<std::pair<fs::path, std::string>> tree_bytes(const fs::path& root) {
  std::vector<std::pair<fs::path, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out.emplace_back(fs::relative(e.path(), root),
                     std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct SuiteRun {
  double seconds = 0.0;
  bool all_passed = true;
  std::string failures;
};

SuiteRun run_suite(const fs::path& dir) {
  SuiteRun s;
  const auto start = Clock::now();
  for (const auto& name : preset_names()) {
    PresetOptions opt;
    opt.output_dir = dir.string();
    const PresetOutcome out = run_preset(name, opt);
    if (const AssertionOutcome* f = out.first_failure()) {
      s.all_passed = false;
      s.failures += " " + name + ":" + f->name;
    }
  }
  s.seconds = seconds_since(start);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "arlab_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  struct Criterion {
    int id;
    std::string name;
    double budget;  // seconds; 0 for none
    std::function<Outcome()> run;
  };
  SuiteRun first, second;
  const std::vector<Criterion> criteria{
      {1, "velocity oracle", 1.0, velocity_oracle},
      {2, "solver order", 5.0, solver_order},
      {3, "injectivity audit", 30.0, injectivity_audit},
      {4, "collapse of the asymmetric student", 120.0, collapse},
      {5, "forcing mismatch", 120.0, forcing_mismatch},
      {6, "distribution matching", 120.0, distribution_matching},
      {7, "causal consistency distillation", 120.0, consistency_distillation},
      {8, "ridge and gradient infrastructure", 0.0, infrastructure},
      {9, "preset reproducibility", 0.0,
       [&] {
         first = run_suite(work / "a");
         second = run_suite(work / "b");
         const auto a = tree_bytes(work / "a"), b = tree_bytes(work / "b");
         std::string diff;
         if (a.size() != b.size()) diff = " file lists differ";
         for (std::size_t k = 0; k < std::min(a.size(), b.size()); ++k)
           if (a[k] != b[k]) diff += " " + a[k].first.string();
         return Outcome{diff.empty(), fmt("%zu files compared across two full runs%s", a.size(),
                                         diff.empty() ? ", all byte-identical" : (";" + diff).c_str())};
       }},
      {10, "preset suite budget", 0.0,
       [&] {
         const bool ok = first.all_passed && first.seconds < 600.0;
         return Outcome{ok, fmt("7 presets in %.1f s (limit 600 s), assertions %s%s", first.seconds,
                                first.all_passed ? "all passed" : "failed:", first.failures.c_str())};
       }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(start);
    if (c.budget > 0 && secs >= c.budget) {
      o.passed = false;
      o.detail += fmt("; over the %.0f s budget", c.budget);
    }
    if (!o.passed) ++failed;
    std::printf("%s criterion %d (%s): %s [%.2f s]\n", o.passed ? "PASS" : "FAIL", c.id, c.name.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
