// SPDX-License-Identifier: Apache-2.0
//
// Synthetic sequence distributions (finite Gaussian mixtures over N frames of
// dimension d) and the exact probabilistic oracles built on them: noisy
// marginals under the rectified-flow kernel, posterior means, scores, and
// clean / noisy-prefix conditionals of a chunk.
#pragma once

#include "arlab/common.hpp"

#include <cstdint>
#include <vector>

namespace arlab {

/// Rectified-flow schedule: x_t = (1 - t) x_0 + t eps on t in [0, 1].
struct NoiseSchedule {
  static constexpr double horizon = 1.0;
  static constexpr double alpha(double t) { return 1.0 - t; }
  static constexpr double sigma(double t) { return t; }
};

/// N frames of dimension d, generated autoregressively in chunks of c frames.
/// Chunks are addressed 0-based throughout the library.
struct SequenceSpec {
  Index n_frames = 1;
  Index frame_dim = 1;
  Index chunk_size = 1;

  /// Throws DomainError unless N >= 1, d >= 1, 1 <= c <= N and c | N.
  void validate() const;

  Index dim() const { return n_frames * frame_dim; }
  Index n_chunks() const { return n_frames / chunk_size; }
  Index chunk_dim() const { return chunk_size * frame_dim; }
  Index chunk_offset(Index chunk) const { return chunk * chunk_dim(); }
  Index prefix_dim(Index chunk) const { return chunk * chunk_dim(); }

  bool operator==(const SequenceSpec&) const = default;
};

/// Coordinates of `chunk` inside a flattened sequence.
std::vector<Index> chunk_indices(const SequenceSpec& spec, Index chunk);
/// Coordinates of chunks 0..chunk-1.
std::vector<Index> prefix_indices(const SequenceSpec& spec, Index chunk);

class GaussianComponent {
 public:
  /// Symmetric within 1e-12, eigenvalues >= -1e-12 (negative ones clamped to 0).
  GaussianComponent(double weight, Vec mean, const Mat& covariance);

  /// Builds from an eigendecomposition; eigenvalues must already be >= 0.
  static GaussianComponent from_eigen(double weight, Vec mean, Mat eigenvectors, Vec eigenvalues);

  double weight() const { return weight_; }
  const Vec& mean() const { return mean_; }
  const Mat& covariance() const { return covariance_; }
  const Mat& eigenvectors() const { return eigenvectors_; }
  const Vec& eigenvalues() const { return eigenvalues_; }
  Index dim() const { return mean_.size(); }

 private:
  GaussianComponent() = default;

  double weight_ = 1.0;
  Vec mean_;
  Mat covariance_;
  Mat eigenvectors_;
  Vec eigenvalues_;
};

class GaussianMixture {
 public:
  /// Nonempty, equal dimensions, weights summing to 1 within 1e-12.
  explicit GaussianMixture(std::vector<GaussianComponent> components);

  Index dim() const { return dim_; }
  Index size() const { return static_cast<Index>(components_.size()); }
  const std::vector<GaussianComponent>& components() const { return components_; }
  const GaussianComponent& component(Index k) const { return components_[static_cast<std::size_t>(k)]; }

  Vec mean() const;
  Mat covariance() const;
  /// E||x||^2.
  double second_moment() const;

  /// `count` i.i.d. draws as columns.
  Mat sample(Index count, Rng& rng) const;

  /// Log density; throws SingularError if a component is degenerate.
  double log_density(const Vec& x) const;
  /// Gradient of the log density for every column of `x`.
  Mat score(const Mat& x) const;

  /// Law of x_t = (1 - t) x_0 + t eps with x_0 drawn from this mixture.
  GaussianMixture noised(double t) const;
  GaussianMixture marginal(const std::vector<Index>& coords) const;
  /// Exact conditional of the complementary coordinates (ascending order)
  /// given x[observed] = value.
  GaussianMixture condition(const std::vector<Index>& observed, const Vec& value) const;

  /// E[x_0 | x_t] for every column of `xt`.
  Mat posterior_mean(const Mat& xt, double t) const;

 private:
  std::vector<GaussianComponent> components_;
  Index dim_ = 0;
};

struct SequenceDistribution {
  SequenceSpec spec;
  GaussianMixture mixture;

  SequenceDistribution(SequenceSpec s, GaussianMixture m);
};

/// A sequence (or chunk) paired with its diffusion time.
struct NoisyState {
  Vec values;
  double time = 0.0;
};

// ---------------------------------------------------------------------------
// Linear-Gaussian conditioning.
//
// For a mixture prior over x, observe y = scale * x[observed] + noise_sd * e
// with e ~ N(0, I). Every component stays Gaussian; the conditional of
// x[target] has an affine mean in y, a y-independent covariance, and
// component weights reweighted by the observation likelihood. The factors are
// computed once so that many observations can be bound cheaply.
class LinearConditioner {
 public:
  LinearConditioner(const GaussianMixture& prior, std::vector<Index> target, std::vector<Index> observed,
                    double scale, double noise_sd);

  Index target_dim() const { return static_cast<Index>(target_.size()); }
  Index observed_dim() const { return static_cast<Index>(observed_.size()); }
  Index size() const { return static_cast<Index>(parts_.size()); }

  /// Exact conditional law of x[target] given a single observation.
  GaussianMixture bind(const Vec& observation) const;

  /// Conditional means of component k for each observation column.
  Mat component_means(Index k, const Mat& observations) const;
  /// Normalized log posterior component weights, size() x n.
  Mat log_weights(const Mat& observations) const;
  const Mat& conditional_eigenvectors(Index k) const { return parts_[static_cast<std::size_t>(k)].cond_vectors; }
  const Vec& conditional_eigenvalues(Index k) const { return parts_[static_cast<std::size_t>(k)].cond_values; }

 private:
  struct Part {
    double log_weight;
    Vec target_mean;
    Vec obs_mean;
    Mat gain;
    Mat obs_vectors;
    Vec obs_values;
    Mat cond_vectors;
    Vec cond_values;
  };
  std::vector<Index> target_;
  std::vector<Index> observed_;
  std::vector<Part> parts_;
};

/// Posterior mean E[x_0 | x_t] for a mixture whose component k has covariance
/// V_k diag(lambda_k) V_k^T, column-specific means `means[k]` and column-specific
/// log prior weights (rows = components). Shared by the joint and the
/// autoregressive oracles.
Mat mixture_posterior_mean(const std::vector<const Mat*>& eigenvectors, const std::vector<const Vec*>& eigenvalues,
                           const std::vector<Mat>& means, const Mat& log_prior, const Mat& xt, double t);

// ---------------------------------------------------------------------------
// Spec-level operations.

/// i.i.d. clean sequences as columns; deterministic in `seed`.
Mat sample_clean(const SequenceDistribution& dist, Index count, std::uint64_t seed);

NoisyState forward_noise(const Vec& x0, double t, const Vec& eps);

Vec joint_posterior_mean(const SequenceDistribution& dist, const NoisyState& xt);
Mat joint_posterior_mean(const SequenceDistribution& dist, const Mat& xt, double t);

Vec exact_score(const SequenceDistribution& dist, const NoisyState& xt);
Mat exact_score(const SequenceDistribution& dist, const Mat& xt, double t);

/// p_data(x_0^chunk | x_0^{<chunk} = prefix) as a one-chunk distribution.
SequenceDistribution conditional_clean_dist(const SequenceDistribution& dist, Index chunk, const Vec& prefix);

/// p_data(x_0^chunk | x_t^{<chunk} = noisy_prefix.values), prefix noised at noisy_prefix.time.
SequenceDistribution df_conditional_dist(const SequenceDistribution& dist, Index chunk, const NoisyState& noisy_prefix);

/// One-chunk spec (c frames, chunk size c) used for conditional laws.
SequenceSpec chunk_spec(const SequenceSpec& spec);

// ---------------------------------------------------------------------------
// Lab distributions.

/// N(0, I) over N frames of dimension d.
SequenceDistribution standard_normal_dist(const SequenceSpec& spec);
/// Two unit-variance frames with correlation rho (N = 2, d = 1, c = 1).
SequenceDistribution bivariate_gaussian(double rho);
/// Zero-mean stationary AR(1) frames, Cov(x_i, x_j) = corr^|i - j| (d = 1).
SequenceDistribution ar1_gaussian(Index n_frames, double corr, Index chunk_size);
/// Equal-weight scalar mixture of N(-offset, variance) and N(+offset, variance).
SequenceDistribution two_mode_mixture(double offset, double variance);

}  // namespace arlab
