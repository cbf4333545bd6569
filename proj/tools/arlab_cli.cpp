// SPDX-License-Identifier: Apache-2.0
//
// arlab: one verb per pipeline stage, plus presets and report conversion.
// Exit codes: 0 ok, 1 assertion failure, 2 usage or configuration error,
// 3 IO or format error.
#include "arlab/presets.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace arlab;

namespace {

constexpr int kAssertionFailed = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;

// Raised for bad configuration documents and flag combinations.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir, distribution, grid, solver, teacher, forcing;
  std::optional<double> rho, corr;
  std::optional<Index> chunk_size, n_frames, pair_count, m, ar_m;
  std::optional<int> solver_steps;

  void attach(CLI::App& app) {
    app.add_option("--config", config, "JSON configuration document")->check(CLI::ExistingFile);
    app.add_option("--set", sets, "Override a field: dotted.path=JSON value (repeatable)");
    app.add_option("--seed", seed, "Master seed");
    app.add_option("--output-dir", output_dir, "Output directory");
    app.add_option("--distribution", distribution, "bivariate | ar1 | two-mode | standard-normal | mixture");
    app.add_option("--rho", rho, "Correlation of the bivariate Gaussian");
    app.add_option("--corr", corr, "Successive-frame correlation of the AR(1) Gaussian");
    app.add_option("--n-frames", n_frames, "Frames of the AR(1) Gaussian");
    app.add_option("--chunk-size", chunk_size, "Frames per chunk of the AR(1) Gaussian");
    app.add_option("--grid", grid, "Sampling times, comma separated, descending from 1");
    app.add_option("--solver", solver, "euler | heun");
    app.add_option("--solver-steps", solver_steps, "PF-ODE steps over [0, 1]");
    app.add_option("--pair-count", pair_count, "Trajectories per pair dataset");
    app.add_option("--teacher", teacher, "learned | oracle");
    app.add_option("--forcing", forcing, "tf | df");
    app.add_option("--m", m, "Random features of the student");
    app.add_option("--ar-m", ar_m, "Random features of diffusion models");
  }

  Json patch() const {
    Json p = Json::object();
    if (seed) p["seed"] = *seed;
    if (output_dir) p["output_dir"] = *output_dir;
    if (distribution) p["distribution"]["kind"] = *distribution;
    if (rho) p["distribution"]["rho"] = *rho;
    if (corr) p["distribution"]["corr"] = *corr;
    if (n_frames) p["distribution"]["n_frames"] = *n_frames;
    if (chunk_size) p["distribution"]["chunk_size"] = *chunk_size;
    if (grid) {
      Json times = Json::array();
      std::stringstream ss(*grid);
      for (std::string item; std::getline(ss, item, ',');) {
        try {
          times.push_back(std::stod(item));
        } catch (const std::exception&) {
          throw UsageError("--grid expects comma-separated numbers, got '" + item + "'");
        }
      }
      p["grid"] = times;
    }
    if (solver) p["solver"] = *solver;
    if (solver_steps) p["solver_steps"] = *solver_steps;
    if (pair_count) p["pair_count"] = *pair_count;
    if (teacher) p["teacher"] = *teacher;
    if (forcing) p["pipeline"]["forcing"] = *forcing;
    if (m) p["student"]["m"] = *m;
    if (ar_m) p["ar_model"]["m"] = *ar_m;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects path=value, got '" + s + "'");
      Json value;
      try {
        value = Json::parse(s.substr(eq + 1));
      } catch (const Json::parse_error&) {
        value = s.substr(eq + 1);
      }
      Json* node = &p;
      std::stringstream path(s.substr(0, eq));
      std::vector<std::string> keys;
      for (std::string key; std::getline(path, key, '.');) keys.push_back(key);
      for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
        if (!(*node)[keys[i]].is_object()) (*node)[keys[i]] = Json::object();
        node = &(*node)[keys[i]];
      }
      (*node)[keys.back()] = value;
    }
    return p;
  }

  /// Defaults, then the config file, then flags.
  ExperimentConfig resolve(const ExperimentConfig& defaults) const {
    try {
      ExperimentConfig cfg = defaults;
      if (!config.empty()) cfg = apply_overrides(cfg, read_json(config));
      cfg = apply_overrides(cfg, patch());
      cfg.validate();
      return cfg;
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }

  Json file_patch() const {
    Json p = config.empty() ? Json::object() : read_json(config);
    p.merge_patch(patch());
    return p;
  }

  static Json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config '" + path + "'");
    try {
      return Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw UsageError("config '" + path + "' is not valid JSON: " + std::string(e.what()));
    }
  }
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_trace_if(const std::string& path, const std::vector<double>& trace) {
  if (!path.empty()) write_loss_trace(trace, path);
}

ChunkwiseStudent fresh_model(const ExperimentConfig& cfg, const SequenceSpec& spec, Role role, const ModelConfig& m) {
  return ChunkwiseStudent(spec, role, m.m, m.frequency_scale, feature_seed(cfg));
}

ChunkwiseStudent as_generator(ChunkwiseStudent model) {
  std::vector<LinearStudent> heads;
  for (Index c = 0; c < model.size(); ++c)
    heads.emplace_back(model.head(c).feature_map(), model.head(c).theta(), Role::generator);
  return ChunkwiseStudent(model.spec(), Role::generator, std::move(heads));
}

std::shared_ptr<const ArTeacher> teacher_for(const ExperimentConfig& cfg,
                                             const std::shared_ptr<const SequenceDistribution>& dist,
                                             const std::string& model_path) {
  if (cfg.teacher == "oracle") return std::make_shared<OracleArTeacher>(dist);
  if (model_path.empty()) throw UsageError("a learned teacher needs --teacher-model (or --teacher oracle)");
  return make_teacher(cfg, dist, load_model(model_path));
}

void finish_report(const DiagnosticsReport& report, const std::string& out, const std::string& format) {
  const ReportFormat f = report_format_from_string(format);
  if (out.empty())
    std::cout << format_report(report, f);
  else
    emit_report(report, f, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal autoregressive distillation lab"};
  app.require_subcommand(1);

  ConfigFlags flags;
  std::string out, data, init, teacher_model, trace, kind, format = "jsonl", model, input;
  std::string preset;

  auto* gen = app.add_subcommand("gen-data", "Generate an ODE pair dataset");
  flags.attach(*gen);
  gen->add_option("--arm", kind, "asymmetric (joint PF-ODE) | causal (AR teacher)")->required()->check(
      CLI::IsMember({"asymmetric", "causal"}));
  gen->add_option("--teacher-model", teacher_model, "Learned AR diffusion model for causal data");
  gen->add_option("--out", out, "Dataset path (.jsonl)")->required();

  auto* train = app.add_subcommand("train", "Train an AR diffusion model");
  flags.attach(*train);
  train->add_option("--out", out, "Model path (.json)")->required();
  train->add_option("--trace", trace, "Loss trace path (.csv)");

  auto* distill = app.add_subcommand("distill", "ODE distillation of a student on a pair dataset");
  flags.attach(*distill);
  distill->add_option("--data", data, "Pair dataset")->required()->check(CLI::ExistingFile);
  distill->add_option("--init", init, "Initial model (diffusion model or generator)")->check(CLI::ExistingFile);
  distill->add_option("--out", out, "Model path (.json)")->required();
  distill->add_option("--trace", trace, "Loss trace path (.csv)");

  auto* dmd = app.add_subcommand("dmd", "Distribution matching from an initial generator");
  flags.attach(*dmd);
  dmd->add_option("--init", init, "Initial generator or diffusion model; theta = 0 when absent")
      ->check(CLI::ExistingFile);
  dmd->add_option("--out", out, "Model path (.json)")->required();
  dmd->add_option("--trace", trace, "Loss trace path (.csv)");

  auto* cd = app.add_subcommand("cd", "Consistency distillation");
  flags.attach(*cd);
  cd->add_option("--kind", kind, "causal | asymmetric")->required()->check(CLI::IsMember({"causal", "asymmetric"}));
  cd->add_option("--teacher-model", teacher_model, "Learned AR diffusion model (teacher, initial student)");
  cd->add_option("--init", init, "Initial model; theta = 0 when absent")->check(CLI::ExistingFile);
  cd->add_option("--out", out, "Model path (.json)")->required();
  cd->add_option("--trace", trace, "Loss trace path (.csv)");

  auto* audit = app.add_subcommand("audit", "Diagnostics against exact oracles");
  flags.attach(*audit);
  audit->add_option("--kind", kind, "injectivity | df-mismatch | collapse | model-kl")->required()->check(
      CLI::IsMember({"injectivity", "df-mismatch", "collapse", "model-kl"}));
  audit->add_option("--model", model, "Generator (collapse) or diffusion model (model-kl)")->check(CLI::ExistingFile);
  audit->add_option("--out", out, "Report path; stdout when absent");
  audit->add_option("--format", format, "jsonl | csv")->check(CLI::IsMember({"jsonl", "csv"}));

  auto* run = app.add_subcommand("preset", "Run a named experiment");
  flags.attach(*run);
  run->add_option("name", preset, "Preset name")->required();

  std::string from = "jsonl";
  auto* report = app.add_subcommand("report", "Convert or print a report");
  report->add_option("--in", input, "Report file")->required()->check(CLI::ExistingFile);
  report->add_option("--from", from, "jsonl | csv")->check(CLI::IsMember({"jsonl", "csv"}));
  report->add_option("--format", format, "jsonl | csv")->check(CLI::IsMember({"jsonl", "csv"}));
  report->add_option("--out", out, "Output path; stdout when absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    const Stopwatch clock;
    if (run->parsed()) {
      if (!is_preset(preset)) {
        std::cerr << "error: unknown preset '" << preset << "'; available:";
        for (const auto& n : preset_names()) std::cerr << " " << n;
        std::cerr << "\n";
        return kUsage;
      }
      PresetOptions options;
      options.overrides = flags.file_patch();
      try {
        apply_overrides(preset_config(preset), options.overrides).validate();
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const PresetOutcome outcome = run_preset(preset, options);
      for (const auto& a : outcome.assertions)
        std::cout << (a.passed ? "ok    " : "FAIL  ") << a.name << ": " << a.detail << "\n";
      std::cout << "wrote " << outcome.files.size() << " files to " << outcome.directory.string() << " in "
                << clock.seconds() << " s\n";
      if (const AssertionOutcome* f = outcome.first_failure()) {
        std::cerr << "assertion failed: " << f->name << " (" << f->detail << ")\n";
        return kAssertionFailed;
      }
      return 0;
    }
    if (report->parsed()) {
      finish_report(read_report(input, report_format_from_string(from)), out, format);
      return 0;
    }

    const ExperimentConfig cfg = flags.resolve(ExperimentConfig{});
    auto dist = std::make_shared<const SequenceDistribution>(cfg.distribution.build());

    if (gen->parsed()) {
      const PairDataset pairs =
          kind == "asymmetric"
              ? make_pairs_bi(*dist, cfg.grid, cfg.pair_count, cfg.solver_steps, cfg.seed, cfg.solver)
              : make_pairs_causal(*dist, *teacher_for(cfg, dist, teacher_model), cfg.grid, cfg.pair_count,
                                  cfg.solver_steps, cfg.seed, cfg.solver);
      save_dataset(pairs, out);
      std::cout << "wrote " << pairs.records.size() << " records to " << out << " in " << clock.seconds() << " s\n";
    } else if (train->parsed()) {
      StageResult r = train_ar_diffusion(*dist, fresh_model(cfg, dist->spec, Role::ar_velocity, cfg.ar_model),
                                         cfg.ar_diffusion, cfg.pipeline.forcing, cfg.seed);
      save_model(r.model, out);
      write_trace_if(trace, r.loss_trace);
      std::cout << "trained in " << clock.seconds() << " s, final loss " << r.loss_trace.back() << "\n";
    } else if (distill->parsed()) {
      const PairDataset pairs = load_dataset(data);
      if (!(pairs.spec == dist->spec)) throw UsageError("dataset layout does not match the configured distribution");
      ChunkwiseStudent student = init.empty() ? fresh_model(cfg, dist->spec, Role::generator, cfg.student)
                                              : as_generator(load_model(init));
      const PrefixMode mode = is_autoregressive(pairs.provenance) ? PrefixMode::clean : PrefixMode::noisy;
      StageResult r = ode_distill(pairs, std::move(student), cfg.distill, mode, cfg.seed);
      save_model(r.model, out);
      write_trace_if(trace, r.loss_trace);
      std::cout << "distilled (" << to_string(mode) << " prefixes) in " << clock.seconds() << " s\n";
    } else if (dmd->parsed()) {
      ChunkwiseStudent g = init.empty() ? fresh_model(cfg, dist->spec, Role::generator, cfg.student)
                                        : as_generator(load_model(init));
      const VelocityScore real(std::make_shared<OracleArTeacher>(dist));
      StageResult r = dmd_train(std::move(g), real, fresh_model(cfg, dist->spec, Role::fake_score, cfg.ar_model), *dist,
                                cfg.grid, cfg.dmd, cfg.seed, DmdOptions{cfg.pipeline.dmd_prefix_source, 8});
      save_model(r.model, out);
      write_trace_if(trace, r.loss_trace);
      std::cout << "DMD finished in " << clock.seconds() << " s\n";
    } else if (cd->parsed()) {
      auto teacher = teacher_for(cfg, dist, teacher_model);
      ChunkwiseStudent g = init.empty() ? fresh_model(cfg, dist->spec, Role::generator, cfg.student)
                                        : as_generator(load_model(init));
      StageResult r = cd_train(*dist, *teacher, std::move(g), cfg.cd,
                               kind == "causal" ? TeacherKind::autoregressive : TeacherKind::bidirectional, cfg.seed);
      save_model(r.model, out);
      write_trace_if(trace, r.loss_trace);
      std::cout << "CD finished in " << clock.seconds() << " s\n";
    } else if (audit->parsed()) {
      DiagnosticsReport rep;
      const std::string digest = config_digest(cfg);
      const EvalConfig& e = cfg.evaluation;
      const Index last = dist->spec.n_chunks() - 1;
      if (kind == "injectivity") {
        const InjectivityResult r = injectivity_variance(*dist, 0, e.injectivity_t, e.injectivity_anchors,
                                                         e.injectivity_resamples, e.oracle_steps, cfg.seed);
        rep.add("injectivity_variance", r.mean_variance, digest, "variance of the chunk-0 endpoint given its noisy value");
        rep.add("positive_fraction", Metric{r.positive_fraction, 0.0, r.anchor_variance.size(), digest, ""});
        if (dist->mixture.size() == 1)
          rep.add("injectivity_variance.exact",
                  Metric{injectivity_variance_exact(*dist, 0, e.injectivity_t), 0.0, 0, digest, "closed form"});
      } else if (kind == "df-mismatch") {
        for (double t : {0.25, 0.5, 0.75}) {
          char name[32];
          std::snprintf(name, sizeof name, "df_mismatch.t%g", t);
          rep.add(name, df_mismatch(*dist, last, t, 4000, split_seed(cfg.seed, static_cast<std::uint64_t>(t * 100))),
                  digest, "");
          if (dist->mixture.size() == 1)
            rep.add(std::string(name) + ".exact", Metric{df_mismatch_exact(*dist, last, t), 0.0, 0, digest, "closed form"});
        }
      } else if (kind == "collapse") {
        if (model.empty()) throw UsageError("--kind collapse needs --model");
        evaluate_generator(as_generator(load_model(model)), *dist, OracleArTeacher(dist), cfg, "generator", rep);
      } else {
        if (model.empty()) throw UsageError("--kind model-kl needs --model");
        const LearnedArTeacher learned(std::make_shared<const ChunkwiseStudent>(load_model(model)));
        rep.add("model_kl", model_conditional_kl(learned, *dist, last, 0.2, 0.8, e.kl_samples, cfg.seed), digest,
                "KL of the implied clean-prefix conditional to the data conditional");
      }
      finish_report(rep, out, format);
      std::cerr << "audit finished in " << clock.seconds() << " s\n";
    }
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const DomainError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
}
