// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration, file formats (pair datasets, model checkpoints,
// reports, loss traces) and the end-to-end pipeline the presets and the CLI
// are built from.
#pragma once

#include "arlab/diagnostics.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace arlab {

using Json = nlohmann::json;

struct ComponentTable {
  double weight = 1.0;
  std::vector<double> mean;
  std::vector<std::vector<double>> cov;

  bool operator==(const ComponentTable&) const = default;
};

struct DistributionConfig {
  /// bivariate | ar1 | two-mode | standard-normal | mixture
  std::string kind = "bivariate";
  double rho = 0.8;
  Index n_frames = 6;
  double corr = 0.8;
  Index chunk_size = 1;
  double offset = 3.0;
  double variance = 0.25;
  /// Layout for standard-normal and mixture.
  SequenceSpec spec{2, 1, 1};
  std::vector<ComponentTable> components;

  SequenceDistribution build() const;
  bool operator==(const DistributionConfig&) const = default;
};

struct ModelConfig {
  Index m = 256;
  double frequency_scale = 1.0;

  bool operator==(const ModelConfig&) const = default;
};

enum class OdeArm { none, asymmetric, causal };
enum class CdArm { none, causal, asymmetric };
std::string to_string(OdeArm a);
std::string to_string(CdArm a);
OdeArm ode_arm_from_string(const std::string& s);
CdArm cd_arm_from_string(const std::string& s);

struct PipelineConfig {
  Forcing forcing = Forcing::teacher;
  OdeArm ode = OdeArm::causal;
  CdArm cd = CdArm::none;
  bool dmd = false;
  /// DMD starts from the AR diffusion model instead of a distilled student.
  bool ar_diffusion_init = false;
  /// The ODE student starts from the bidirectional model instead of the AR one.
  bool bidirectional_init = false;
  /// The first gradient-trained student (ODE distillation, else DMD) starts from theta = 0.
  bool fresh_init = false;
  PrefixSource dmd_prefix_source = PrefixSource::data;

  bool operator==(const PipelineConfig&) const = default;
};

struct EvalConfig {
  Index n_anchor = 200;
  Index n_resample = 1000;
  Index n_moment = 20000;
  Index n_prefix = 20;
  Index n_sample = 1000;
  int oracle_steps = 64;
  double injectivity_t = 0.5;
  Index injectivity_anchors = 20;
  Index injectivity_resamples = 10000;
  Index kl_samples = 200;
  /// Also measure the noisy-prefix collapse of asymmetric ODE students.
  bool noisy_collapse = false;

  bool operator==(const EvalConfig&) const = default;
};

struct ExperimentConfig {
  DistributionConfig distribution;
  TimestepGrid grid = TimestepGrid::standard();
  Solver solver = Solver::heun;
  int solver_steps = 64;
  Index pair_count = 5000;
  /// Teacher for causal data and CD: "learned" (the AR diffusion model) or "oracle".
  std::string teacher = "learned";
  ModelConfig ar_model;
  ModelConfig student;
  TrainConfig ar_diffusion;
  TrainConfig distill;
  TrainConfig dmd;
  TrainConfig cd;
  PipelineConfig pipeline;
  EvalConfig evaluation;
  std::vector<double> rho_sweep{0.0, 0.4, 0.8};
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  ExperimentConfig();
  /// Throws DomainError for out-of-range values or an incoherent pipeline.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

Json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys and wrong types raise FormatError.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Applies `patch` (RFC 7386 merge patch) to the JSON form of `base`.
ExperimentConfig apply_overrides(const ExperimentConfig& base, const Json& patch);

/// Seed of the random features shared by every model of a pipeline, so that
/// parameters can be copied between stages.
std::uint64_t feature_seed(const ExperimentConfig& cfg);

/// 64-bit FNV-1a of a byte string, as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);
/// fnv1a_hex of the canonical JSON form without output_dir.
std::string config_digest(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Files. Every writer produces the same bytes for the same input.

/// JSON lines: a header line, then one record per line. Vectors stored per
/// grid time are keyed by the time printed with six decimals.
void save_dataset(const PairDataset& data, const std::filesystem::path& path);
/// VersionError for a newer format version; FormatError carries the 1-based line.
PairDataset load_dataset(const std::filesystem::path& path);

void save_model(const ChunkwiseStudent& model, const std::filesystem::path& path);
ChunkwiseStudent load_model(const std::filesystem::path& path);

enum class ReportFormat { csv, jsonl };
ReportFormat report_format_from_string(const std::string& s);
/// Metrics in lexicographic name order, numbers with 17 significant digits.
std::string format_report(const DiagnosticsReport& report, ReportFormat format);
void emit_report(const DiagnosticsReport& report, ReportFormat format, const std::filesystem::path& path);
DiagnosticsReport parse_report(const std::string& text, ReportFormat format);
DiagnosticsReport read_report(const std::filesystem::path& path, ReportFormat format);

/// Two-column CSV: step,loss.
void write_loss_trace(const std::vector<double>& trace, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pipeline.

struct PipelineResult {
  std::optional<ChunkwiseStudent> ar_model;
  std::optional<PairDataset> pairs;
  std::optional<ChunkwiseStudent> generator;
  /// (stage name, loss trace) in execution order.
  std::vector<std::pair<std::string, std::vector<double>>> traces;
  DiagnosticsReport report;
};

/// The teacher used for causal pairs and consistency distillation.
std::shared_ptr<const ArTeacher> make_teacher(const ExperimentConfig& cfg,
                                              const std::shared_ptr<const SequenceDistribution>& dist,
                                              const std::optional<ChunkwiseStudent>& ar_model);

/// Runs the configured stages in order (AR diffusion, ODE distillation,
/// consistency distillation, DMD) and evaluates the final generator. Metric
/// names are prefixed with `tag`; the generator DMD starts from is evaluated
/// under `tag`.init.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& tag);

/// Conditional energy distance, collapse statistics and rollout motion of a
/// generator, added to `report` under `tag`.
void evaluate_generator(const ChunkGenerator& generator, const SequenceDistribution& dist, const ArTeacher& oracle,
                        const ExperimentConfig& cfg, const std::string& tag, DiagnosticsReport& report);

}  // namespace arlab
