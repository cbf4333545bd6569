// SPDX-License-Identifier: Apache-2.0
//
// Estimators that turn injectivity, collapse and forcing-mismatch claims into
// numbers with standard errors, plus the distances they are reported in.
#pragma once

#include "arlab/stages.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace arlab {

struct Estimate {
  double value = 0.0;
  double se = 0.0;
  Index n = 0;
};

/// Mean and standard error of the sample values.
Estimate mean_estimate(const Vec& values);

// ---------------------------------------------------------------------------
// Distances.

/// 2 E|A - B| - E|A - A'| - E|B - B'| over all ordered pairs of the two
/// empirical samples (columns). Exactly 0 for identical sets, symmetric in its
/// arguments and never negative.
double energy_distance(const Mat& a, const Mat& b);

/// KL(N(mp, cp) || N(mq, cq)); throws SingularError unless both covariances
/// are positive definite.
double gaussian_kl(const Vec& mp, const Mat& cp, const Vec& mq, const Mat& cq);

/// Mean squared difference between successive frames, averaged over the
/// sequences (columns). Needs at least two frames.
Estimate motion_variability(const Mat& sequences, const SequenceSpec& spec);

// ---------------------------------------------------------------------------
// Injectivity of the joint flow map at chunk level.

struct InjectivityResult {
  /// Variance (trace) of the chunk-u endpoint per anchor.
  Vec anchor_variance;
  Vec anchor_se;
  Estimate mean_variance;
  /// Fraction of anchors whose variance exceeds threshold_factor standard errors.
  double positive_fraction = 0.0;
  double threshold_factor = 10.0;
};

/// For anchors x_t ~ p_t, holds chunk u fixed, redraws every other coordinate
/// from the exact conditional p_t(z | u), integrates the joint PF-ODE to 0 and
/// measures the spread of the chunk-u endpoint.
InjectivityResult injectivity_variance(const SequenceDistribution& dist, Index chunk_u, double t, Index n_anchor,
                                       Index n_resample, int steps, std::uint64_t seed);

/// Exact value of the same variance for a single-Gaussian distribution:
/// tr(M_uz Cov(z | u) M_uz^T) with M the linear flow map at t.
double injectivity_variance_exact(const SequenceDistribution& dist, Index chunk_u, double t);

/// Closed-form flow map x_0 = M x_t (+ offset) of a single Gaussian.
Mat gaussian_flow_matrix(const Mat& covariance, double t);

// ---------------------------------------------------------------------------
// Collapse of a chunk generator.

struct CollapseOptions {
  /// noisy: the generator sees x_t^{<i} and the oracle is E[phi^Bi(x_t)^i | x_t^{<=i}]
  /// by Monte Carlo over the later chunks. clean: the generator sees the clean
  /// data prefix and the oracle is phi^AR.
  PrefixMode mode = PrefixMode::clean;
  std::vector<double> times{1.0, 0.9375, 0.8333, 0.625};
  Index n_anchor = 200;
  Index n_resample = 1000;
  Index n_moment = 100000;
  int steps = 64;
  std::uint64_t seed = 0;
};

struct CollapseResult {
  /// RMS per coordinate between generator outputs and the oracle.
  double rms = 0.0;
  Index rms_samples = 0;
  /// E||x_0^i||^2 - E||G||^2 summed over chunks, averaged over times.
  Estimate deficit;
  double data_moment = 0.0;
  double generator_moment = 0.0;
  /// Per-chunk deficits in chunk order.
  std::vector<Estimate> chunk_deficit;
};

CollapseResult collapse_gap(const ChunkGenerator& generator, const SequenceDistribution& dist,
                            const ArTeacher& oracle, const CollapseOptions& options);

/// Closed-form E Var(phi^Bi(x_t)^i | x_t^{<=i}) summed over chunks and
/// averaged over times, for a single-Gaussian distribution: the second-moment
/// deficit of the MSE-optimal noisy-prefix student.
double collapse_deficit_exact(const SequenceDistribution& dist, const std::vector<double>& times);

// ---------------------------------------------------------------------------
// Forcing mismatch.

/// E_y KL(p(x_0^i | x_t^{<i} = y) || p(x_0^i | x_0^{<i} = y)) with y drawn from
/// the data prefix marginal. Per draw the KL is the Gaussian closed form when
/// both conditionals are single Gaussians, otherwise a Monte Carlo estimate.
Estimate df_mismatch(const SequenceDistribution& dist, Index chunk, double t, Index n, std::uint64_t seed);

/// Analytic value of df_mismatch for a single-Gaussian distribution.
double df_mismatch_exact(const SequenceDistribution& dist, Index chunk, double t);

struct GaussianLaw {
  Vec mean;
  Mat cov;
};

/// The Gaussian clean law a velocity model implies for chunk `chunk` given
/// prefix `prefix` at time t: fits the denoiser x - t v(x) by an affine map
/// a + B x on probe points and inverts D(x) = mu + (1-t) C ((1-t)^2 C + t^2)^{-1} (x - (1-t) mu).
GaussianLaw implied_conditional(const ArTeacher& model, Index chunk, const Vec& prefix, double t, const Vec& center,
                                double spread, Index n_probe, std::uint64_t seed);

/// Average KL(implied || p_data(x_0^i | x_0^{<i} = y)) over t ~ U[t_lo, t_hi]
/// and y from the data prefix law, keeping only draws whose standardized
/// coordinates all lie within `prefix_radius` (the affine probe cannot say
/// anything useful where the model never saw a prefix).
Estimate model_conditional_kl(const ArTeacher& model, const SequenceDistribution& dist, Index chunk, double t_lo,
                              double t_hi, Index n, std::uint64_t seed, double prefix_radius = 2.5);

// ---------------------------------------------------------------------------
// Generator quality.

/// Average over chunks and `n_prefix` data prefixes of the energy distance
/// between `n_sample` few-step samples and exact conditional draws.
Estimate conditional_energy_distance(const ChunkGenerator& generator, const SequenceDistribution& dist,
                                     const TimestepGrid& grid, Index n_prefix, Index n_sample, std::uint64_t seed);

/// RMS of G(x_{t_{n+1}}) - G(x^_{t_n}) over one-step teacher transitions on
/// the grid t_n = n / M, with clean data prefixes.
Estimate consistency_gap(const ChunkwiseStudent& student, const ArTeacher& teacher, const SequenceDistribution& dist,
                         int grid_size, Index n, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct Metric {
  double value = 0.0;
  double uncertainty = 0.0;
  Index sample_count = 0;
  std::string config_digest;
  std::string note;

  bool operator==(const Metric&) const = default;
};

class DiagnosticsReport {
 public:
  /// Throws NumericalError for a non-finite value or uncertainty.
  void add(const std::string& name, Metric metric);
  void add(const std::string& name, const Estimate& e, const std::string& digest, const std::string& note);
  const std::map<std::string, Metric>& metrics() const { return metrics_; }
  const Metric& at(const std::string& name) const;
  bool empty() const { return metrics_.empty(); }
  bool operator==(const DiagnosticsReport&) const = default;

 private:
  std::map<std::string, Metric> metrics_;
};

}  // namespace arlab
