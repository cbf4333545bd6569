// SPDX-License-Identifier: Apache-2.0
//
// Training stages: autoregressive diffusion (teacher / diffusion forcing),
// ODE distillation, distribution matching, consistency distillation, and the
// samplers that run a trained chunk generator.
#pragma once

#include "arlab/models.hpp"
#include "arlab/pairs.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace arlab {

enum class Optimizer { ridge, sgd, adam };
std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 1e-3;
  int step_count = 1;
  Index batch_size = 256;
  double ridge_lambda = 1e-6;
  /// Decay of the EMA target theta^- in consistency distillation.
  double ema_rate = 0.99;
  /// Constant loss weight w(t).
  double loss_weight = 1.0;
  /// Fake-score refits per generator update in distribution matching.
  int fake_update_ratio = 5;
  /// Forgetting factor of the fake-score sufficient statistics per refit.
  double fake_memory = 0.8;
  Optimizer optimizer = Optimizer::ridge;
  /// Regression samples per chunk for closed-form diffusion training.
  Index sample_count = 20000;
  /// Noise levels drawn for distribution matching.
  double t_min = 0.02;
  double t_max = 0.98;
  /// Consistency-distillation discretization t_n = n / cd_grid.
  int cd_grid = 48;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct StageResult {
  ChunkwiseStudent model;
  std::optional<ChunkwiseStudent> auxiliary;
  std::vector<double> loss_trace;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  TrainConfig config;
};

enum class Forcing { teacher, diffusion };
enum class PrefixMode { noisy, clean };
std::string to_string(PrefixMode m);
PrefixMode prefix_mode_from_string(const std::string& s);

/// Flow-matching regression of an ar-velocity model onto eps - x_0^i with
/// t ~ U(0, 1]. Teacher forcing feeds the clean prefix; diffusion forcing feeds
/// the prefix noised at the same t with independent noise.
StageResult train_ar_diffusion(const SequenceDistribution& dist, ChunkwiseStudent model, const TrainConfig& cfg,
                               Forcing forcing, std::uint64_t seed);
StageResult train_ar_diffusion_tf(const SequenceDistribution& dist, ChunkwiseStudent model, const TrainConfig& cfg,
                                  std::uint64_t seed);
StageResult train_ar_diffusion_df(const SequenceDistribution& dist, ChunkwiseStudent model, const TrainConfig& cfg,
                                  std::uint64_t seed);

/// Regresses G(x_t^i, prefix, t) onto x_0^i over every record and grid time.
/// PrefixMode::noisy conditions on x_t^{<i} from the same trajectory and needs
/// a bidirectional dataset.
StageResult ode_distill(const PairDataset& data, ChunkwiseStudent student, const TrainConfig& cfg, PrefixMode mode,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Samplers.

struct FewStepOutput {
  Mat sample;
  /// Input and time of the final generator call.
  Mat last_input;
  double last_time = 0.0;
};

/// Re-noising sampler over the grid: x ~ N(0, I); x0 = G(x, prefix, t_k);
/// x = (1 - t_{k+1}) x0 + t_{k+1} eps. One sample per prefix column.
FewStepOutput few_step_sample_traced(const ChunkGenerator& generator, Index chunk, const TimestepGrid& grid,
                                     const Mat& prefixes, std::uint64_t seed);
Mat few_step_sample(const ChunkGenerator& generator, Index chunk, const TimestepGrid& grid, const Mat& prefixes,
                    std::uint64_t seed);

/// `count` full sequences generated chunk by chunk, each chunk conditioned on
/// the chunks generated before it.
Mat rollout(const ChunkGenerator& generator, const TimestepGrid& grid, Index count, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Distribution matching.

/// Score of the noisy conditional law of a chunk given a clean prefix.
class ScoreSource {
 public:
  virtual ~ScoreSource() = default;
  virtual Mat score(Index chunk, const Mat& prefixes, const Mat& x, double t) const = 0;
};

/// Score from a conditional velocity field: s = -(x + (1 - t) v) / t.
class VelocityScore final : public ScoreSource {
 public:
  explicit VelocityScore(std::shared_ptr<const ArTeacher> teacher) : teacher_(std::move(teacher)) {}
  Mat score(Index chunk, const Mat& prefixes, const Mat& x, double t) const override;

 private:
  std::shared_ptr<const ArTeacher> teacher_;
};

/// Score of a velocity-regressing model (ar-velocity or fake-score role).
class ModelScore final : public ScoreSource {
 public:
  explicit ModelScore(const ChunkwiseStudent& model) : model_(&model) {}
  Mat score(Index chunk, const Mat& prefixes, const Mat& x, double t) const override;

 private:
  const ChunkwiseStudent* model_;
};

/// Parameter gradient of the score-difference objective through the final
/// generator call G = x - t theta^T phi:
///   grad = -mean_b (s_real - s_fake)_b d x~_b / d theta.
Mat dmd_generator_gradient(const LinearStudent& head, const Mat& last_input, const Mat& prefixes, double last_time,
                           const Mat& score_difference);

enum class PrefixSource { data, rollout };

struct DmdOptions {
  PrefixSource prefix_source = PrefixSource::data;
  /// Number of independent noise levels per batch.
  Index time_groups = 8;
};

/// Alternates fake-score refits on fresh generator samples with generator
/// updates along the score difference. Returns the generator as `model` and
/// the fake-score model as `auxiliary`.
StageResult dmd_train(ChunkwiseStudent generator, const ScoreSource& real_score, ChunkwiseStudent fake_score,
                      const SequenceDistribution& dist, const TimestepGrid& grid, const TrainConfig& cfg,
                      std::uint64_t seed, const DmdOptions& options = {});

// ---------------------------------------------------------------------------
// Consistency distillation.

enum class TeacherKind { autoregressive, bidirectional };
std::string to_string(TeacherKind k);
TeacherKind teacher_kind_from_string(const std::string& s);

/// Trains G_theta(x_{t_{n+1}}, prefix, t_{n+1}) to match G_{theta^-}(x^_{t_n}, prefix, t_n)
/// where x^ is one Heun step of the teacher, prefix is the clean data prefix
/// and theta^- is the EMA of theta. The autoregressive kind steps the
/// conditional field of `ar_teacher`; the bidirectional kind steps the joint
/// field of `dist` on the whole sequence and supervises the chunk component.
StageResult cd_train(const SequenceDistribution& dist, const ArTeacher& ar_teacher, ChunkwiseStudent student,
                     const TrainConfig& cfg, TeacherKind kind, std::uint64_t seed);

}  // namespace arlab
