// SPDX-License-Identifier: Apache-2.0
//
// Random-Fourier-feature regressors with a linear head. Every output is
// linear in the parameters, so ridge fits are closed form and parameter
// Jacobians are exact.
#pragma once

#include "arlab/pfode.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace arlab {

/// (t, 1 - t, sin 2 pi t, cos 2 pi t).
constexpr Index kTimeEmbeddingDim = 4;
Vec time_embedding(double t);

struct FeatureSpec {
  Index m = 256;
  Index chunk_dim = 1;
  Index prefix_dim = 0;
  double frequency_scale = 1.0;
  std::uint64_t seed = 0;

  Index input_dim() const { return chunk_dim + prefix_dim + kTimeEmbeddingDim; }
  void validate() const;
  bool operator==(const FeatureSpec&) const = default;
};

/// phi_j(z) = sqrt(2/m) cos(<omega_j, z> + b_j), z = (chunk, prefix, time embedding).
class FeatureMap {
 public:
  /// omega_j ~ N(0, frequency_scale^2 I), b_j ~ U[0, 2 pi), drawn from spec.seed.
  explicit FeatureMap(const FeatureSpec& spec);
  /// Explicit frequencies (m x input_dim) and phases (m).
  FeatureMap(const FeatureSpec& spec, Mat frequencies, Vec phases);

  const FeatureSpec& spec() const { return spec_; }
  const Mat& frequencies() const { return omega_; }
  const Vec& phases() const { return phase_; }

  /// m x n features for n columns sharing one time.
  Mat features(const Mat& chunk, const Mat& prefix, double t) const;
  /// m x n features with a time per column.
  Mat features(const Mat& chunk, const Mat& prefix, const Vec& t) const;
  Vec featurize(const Vec& chunk, const Vec& prefix, double t) const;

 private:
  Mat finish(Mat pre) const;

  FeatureSpec spec_;
  Mat omega_;
  Vec phase_;
};

enum class Role { generator, ar_velocity, fake_score };
std::string to_string(Role r);
Role role_from_string(const std::string& s);

/// output = theta^T phi(chunk, prefix, t); theta is m x chunk_dim.
class LinearStudent {
 public:
  LinearStudent(const FeatureSpec& spec, Role role);
  LinearStudent(FeatureMap map, Mat theta, Role role);

  const FeatureMap& feature_map() const { return map_; }
  const FeatureSpec& spec() const { return map_.spec(); }
  const Mat& theta() const { return theta_; }
  Mat& theta() { return theta_; }
  void set_theta(const Mat& theta);
  Role role() const { return role_; }
  Index output_dim() const { return spec().chunk_dim; }

  Vec predict(const Vec& chunk, const Vec& prefix, double t) const;
  Mat predict(const Mat& chunk, const Mat& prefix, double t) const;
  Mat predict(const Mat& chunk, const Mat& prefix, const Vec& t) const;

 private:
  FeatureMap map_;
  Mat theta_;
  Role role_;
};

/// Jacobian of predict() with respect to vec(theta) (column-major), one row
/// per output coordinate: row k is phi in the block of theta column k.
Mat grad_output_wrt_params(const LinearStudent& model, const Vec& chunk, const Vec& prefix, double t);

/// theta = (Phi W Phi^T + lambda I)^{-1} Phi W Y^T with Phi m x n features,
/// Y outputs x n targets and optional per-sample weights.
Mat fit_ridge(const Mat& features, const Mat& targets, double lambda, const Vec& weights = Vec());

/// Running normal equations for ridge fits over many batches.
class RidgeAccumulator {
 public:
  RidgeAccumulator(Index m, Index outputs);

  void add(const Mat& features, const Mat& targets, const Vec& weights = Vec());
  /// Multiplies the accumulated statistics by `factor` (exponential forgetting).
  void decay(double factor);
  Mat solve(double lambda) const;
  /// Weighted mean squared residual of theta over everything accumulated.
  double mean_residual(const Mat& theta) const;
  double total_weight() const { return weight_; }

 private:
  Mat gram_;
  Mat cross_;
  double energy_ = 0.0;
  double weight_ = 0.0;
};

void sgd_step(Mat& theta, const Mat& gradient, double learning_rate);
void ema_update(Mat& theta_minus, const Mat& theta, double rate);

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(Mat& theta, const Mat& gradient, double learning_rate);

 private:
  double b1_, b2_, eps_;
  Mat m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------

/// Anything that maps a noisy chunk (and the prefix it conditions on) to a
/// clean chunk estimate.
class ChunkGenerator {
 public:
  virtual ~ChunkGenerator() = default;
  virtual SequenceSpec spec() const = 0;
  virtual Mat generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const = 0;
};

/// One LinearStudent per chunk; chunk i sees only chunks < i. In the generator
/// role the output is G(x, prefix, t) = x - t theta^T phi, so G(x, prefix, 0) = x
/// and theta = 0 is the identity map.
class ChunkwiseStudent final : public ChunkGenerator {
 public:
  ChunkwiseStudent(const SequenceSpec& spec, Role role, Index m, double frequency_scale, std::uint64_t seed);
  ChunkwiseStudent(const SequenceSpec& spec, Role role, std::vector<LinearStudent> heads);

  SequenceSpec spec() const override { return spec_; }
  Role role() const { return role_; }
  Index size() const { return static_cast<Index>(heads_.size()); }
  const LinearStudent& head(Index chunk) const { return heads_.at(static_cast<std::size_t>(chunk)); }
  LinearStudent& head(Index chunk) { return heads_.at(static_cast<std::size_t>(chunk)); }

  Mat predict(Index chunk, const Mat& x, const Mat& prefixes, double t) const;
  Mat generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const override;
  Mat generate(Index chunk, const Mat& x, const Mat& prefixes, const Vec& t) const;

  /// Copies theta from `other` (same spec, m and feature seeds); the role is kept.
  void copy_parameters_from(const ChunkwiseStudent& other);
  bool same_features(const ChunkwiseStudent& other) const;

 private:
  SequenceSpec spec_;
  Role role_;
  std::vector<LinearStudent> heads_;
};

/// A trained ar-velocity model used as an autoregressive PF-ODE teacher.
class LearnedArTeacher final : public ArTeacher {
 public:
  explicit LearnedArTeacher(std::shared_ptr<const ChunkwiseStudent> model);
  BatchField bind(Index chunk, const Mat& prefixes) const override;
  SequenceSpec spec() const override { return model_->spec(); }
  std::string describe() const override { return "learned"; }

 private:
  std::shared_ptr<const ChunkwiseStudent> model_;
};

/// G = phi^AR computed by integrating the teacher's conditional field.
class OracleFlowGenerator final : public ChunkGenerator {
 public:
  OracleFlowGenerator(std::shared_ptr<const ArTeacher> teacher, int steps) : teacher_(std::move(teacher)), steps_(steps) {}
  SequenceSpec spec() const override { return teacher_->spec(); }
  Mat generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const override;

 private:
  std::shared_ptr<const ArTeacher> teacher_;
  int steps_;
};

/// G = E[x_0^i | x_t^i, prefix]: the MSE-optimal one-step denoiser, the map a
/// student collapses to when it cannot identify the trajectory.
class ConditionalMeanGenerator final : public ChunkGenerator {
 public:
  explicit ConditionalMeanGenerator(std::shared_ptr<const ArTeacher> teacher) : teacher_(std::move(teacher)) {}
  SequenceSpec spec() const override { return teacher_->spec(); }
  Mat generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const override;

 private:
  std::shared_ptr<const ArTeacher> teacher_;
};

}  // namespace arlab
