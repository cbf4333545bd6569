// SPDX-License-Identifier: Apache-2.0
#include "arlab/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace arlab {

namespace {

constexpr double kSymmetryTol = 1e-12;
constexpr double kEigenClamp = 1e-12;
constexpr double kLog2Pi = 1.8378770664093454836;

Mat submatrix(const Mat& m, const std::vector<Index>& rows, const std::vector<Index>& cols) {
  Mat out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(static_cast<Index>(i), static_cast<Index>(j)) = m(rows[i], cols[j]);
  return out;
}

Vec subvector(const Vec& v, const std::vector<Index>& idx) {
  Vec out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = v(idx[i]);
  return out;
}

// Eigendecomposition of a symmetric PSD matrix with small eigenvalues clamped to 0.
void symmetric_eigen(const Mat& m, Mat& vectors, Vec& values) {
  if (m.rows() == 0) {
    vectors.resize(0, 0);
    values.resize(0);
    return;
  }
  Eigen::SelfAdjointEigenSolver<Mat> solver(0.5 * (m + m.transpose()));
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  vectors = solver.eigenvectors();
  values = solver.eigenvalues();
  for (Index i = 0; i < values.size(); ++i)
    if (values(i) < kEigenClamp) values(i) = 0.0;
}

// Column-wise log-sum-exp normalization of a K x n matrix of log weights.
void normalize_log_columns(Mat& logw) {
  for (Index j = 0; j < logw.cols(); ++j) {
    const double mx = logw.col(j).maxCoeff();
    const double lse = mx + std::log((logw.col(j).array() - mx).exp().sum());
    logw.col(j).array() -= lse;
  }
}

const Mat& broadcast(const Mat& m, Index n, Mat& scratch) {
  if (m.cols() == n) return m;
  scratch = m.col(0).replicate(1, n);
  return scratch;
}

std::vector<Index> complement(Index dim, const std::vector<Index>& idx) {
  std::vector<bool> taken(static_cast<std::size_t>(dim), false);
  for (Index i : idx) {
    if (i < 0 || i >= dim) throw ShapeError("coordinate index out of range");
    taken[static_cast<std::size_t>(i)] = true;
  }
  std::vector<Index> out;
  for (Index i = 0; i < dim; ++i)
    if (!taken[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time must lie in [0, 1]");
}

}  // namespace

// ---------------------------------------------------------------------------

void SequenceSpec::validate() const {
  if (n_frames < 1 || frame_dim < 1 || chunk_size < 1 || chunk_size > n_frames || n_frames % chunk_size != 0)
    throw DomainError("invalid sequence spec: need N >= 1, d >= 1, 1 <= c <= N, c | N");
}

std::vector<Index> chunk_indices(const SequenceSpec& spec, Index chunk) {
  if (chunk < 0 || chunk >= spec.n_chunks()) throw DomainError("chunk index out of range");
  std::vector<Index> out(static_cast<std::size_t>(spec.chunk_dim()));
  std::iota(out.begin(), out.end(), spec.chunk_offset(chunk));
  return out;
}

std::vector<Index> prefix_indices(const SequenceSpec& spec, Index chunk) {
  if (chunk < 0 || chunk >= spec.n_chunks()) throw DomainError("chunk index out of range");
  std::vector<Index> out(static_cast<std::size_t>(spec.prefix_dim(chunk)));
  std::iota(out.begin(), out.end(), Index{0});
  return out;
}

SequenceSpec chunk_spec(const SequenceSpec& spec) {
  return SequenceSpec{spec.chunk_size, spec.frame_dim, spec.chunk_size};
}

// ---------------------------------------------------------------------------

GaussianComponent::GaussianComponent(double weight, Vec mean, const Mat& covariance) {
  if (!(weight > 0.0 && weight <= 1.0)) throw DomainError("component weight must lie in (0, 1]");
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size())
    throw ShapeError("covariance must be square with the mean's dimension");
  if (!mean.allFinite() || !covariance.allFinite()) throw NumericalError("non-finite component parameters");
  if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol)
    throw DomainError("covariance is not symmetric within 1e-12");
  weight_ = weight;
  mean_ = std::move(mean);
  covariance_ = 0.5 * (covariance + covariance.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> solver(covariance_);
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  if (solver.eigenvalues().minCoeff() < -kEigenClamp)
    throw DomainError("covariance has an eigenvalue below -1e-12");
  eigenvectors_ = solver.eigenvectors();
  eigenvalues_ = solver.eigenvalues();
  for (Index i = 0; i < eigenvalues_.size(); ++i)
    if (eigenvalues_(i) < kEigenClamp) eigenvalues_(i) = 0.0;
}

GaussianComponent GaussianComponent::from_eigen(double weight, Vec mean, Mat eigenvectors, Vec eigenvalues) {
  GaussianComponent c;
  c.weight_ = weight;
  c.mean_ = std::move(mean);
  c.eigenvectors_ = std::move(eigenvectors);
  c.eigenvalues_ = std::move(eigenvalues);
  c.covariance_ = c.eigenvectors_ * c.eigenvalues_.asDiagonal() * c.eigenvectors_.transpose();
  return c;
}

// ---------------------------------------------------------------------------

GaussianMixture::GaussianMixture(std::vector<GaussianComponent> components) : components_(std::move(components)) {
  if (components_.empty()) throw DomainError("mixture needs at least one component");
  dim_ = components_.front().dim();
  double total = 0.0;
  for (const auto& c : components_) {
    if (c.dim() != dim_) throw ShapeError("mixture components disagree in dimension");
    total += c.weight();
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("mixture weights must sum to 1 within 1e-12");
}

Vec GaussianMixture::mean() const {
  Vec m = Vec::Zero(dim_);
  for (const auto& c : components_) m += c.weight() * c.mean();
  return m;
}

Mat GaussianMixture::covariance() const {
  const Vec m = mean();
  Mat cov = Mat::Zero(dim_, dim_);
  for (const auto& c : components_) {
    const Vec d = c.mean() - m;
    cov += c.weight() * (c.covariance() + d * d.transpose());
  }
  return cov;
}

double GaussianMixture::second_moment() const {
  double s = 0.0;
  for (const auto& c : components_) s += c.weight() * (c.eigenvalues().sum() + c.mean().squaredNorm());
  return s;
}

Mat GaussianMixture::sample(Index count, Rng& rng) const {
  if (count < 0) throw DomainError("sample count must be nonnegative");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Mat> factors;
  factors.reserve(components_.size());
  for (const auto& c : components_) factors.push_back(c.eigenvectors() * c.eigenvalues().cwiseSqrt().asDiagonal());
  Mat out(dim_, count);
  Vec z(dim_);
  for (Index j = 0; j < count; ++j) {
    std::size_t k = 0;
    if (components_.size() > 1) {
      const double u = uniform(rng);
      double acc = 0.0;
      for (k = 0; k + 1 < components_.size(); ++k) {
        acc += components_[k].weight();
        if (u < acc) break;
      }
    }
    for (Index i = 0; i < dim_; ++i) z(i) = normal(rng);
    out.col(j) = components_[k].mean() + factors[k] * z;
  }
  return out;
}

double GaussianMixture::log_density(const Vec& x) const {
  require_shape(x.size() == dim_, "log_density: dimension mismatch");
  Vec logs(size());
  for (Index k = 0; k < size(); ++k) {
    const auto& c = component(k);
    if ((c.eigenvalues().array() <= 0.0).any()) throw SingularError("log_density of a degenerate component");
    const Vec y = c.eigenvectors().transpose() * (x - c.mean());
    logs(k) = std::log(c.weight()) - 0.5 * (y.array().square() / c.eigenvalues().array()).sum() -
              0.5 * c.eigenvalues().array().log().sum() - 0.5 * static_cast<double>(dim_) * kLog2Pi;
  }
  const double mx = logs.maxCoeff();
  return mx + std::log((logs.array() - mx).exp().sum());
}

Mat GaussianMixture::score(const Mat& x) const {
  require_shape(x.rows() == dim_, "score: dimension mismatch");
  const Index n = x.cols();
  Mat logp(size(), n);
  std::vector<Mat> grads(static_cast<std::size_t>(size()));
  for (Index k = 0; k < size(); ++k) {
    const auto& c = component(k);
    if ((c.eigenvalues().array() <= 0.0).any()) throw SingularError("score of a degenerate component");
    const Mat y = c.eigenvectors().transpose() * (x.colwise() - c.mean());
    const Vec inv = c.eigenvalues().cwiseInverse();
    grads[static_cast<std::size_t>(k)] = -(c.eigenvectors() * (inv.asDiagonal() * y));
    logp.row(k) = (std::log(c.weight()) - 0.5 * c.eigenvalues().array().log().sum()) -
                  0.5 * (y.array().square().colwise() * inv.array()).colwise().sum();
  }
  if (size() == 1) return grads.front();
  normalize_log_columns(logp);
  Mat out = Mat::Zero(dim_, n);
  for (Index k = 0; k < size(); ++k)
    out += grads[static_cast<std::size_t>(k)] * logp.row(k).array().exp().matrix().asDiagonal();
  return out;
}

GaussianMixture GaussianMixture::noised(double t) const {
  check_time(t);
  const double a = NoiseSchedule::alpha(t);
  const double s = NoiseSchedule::sigma(t);
  std::vector<GaussianComponent> out;
  out.reserve(components_.size());
  for (const auto& c : components_) {
    Vec values = (a * a * c.eigenvalues().array() + s * s).matrix();
    out.push_back(GaussianComponent::from_eigen(c.weight(), a * c.mean(), c.eigenvectors(), std::move(values)));
  }
  return GaussianMixture(std::move(out));
}

GaussianMixture GaussianMixture::marginal(const std::vector<Index>& coords) const {
  if (coords.empty()) throw DomainError("marginal over zero coordinates");
  std::vector<GaussianComponent> out;
  out.reserve(components_.size());
  for (const auto& c : components_) {
    Mat vectors;
    Vec values;
    symmetric_eigen(submatrix(c.covariance(), coords, coords), vectors, values);
    out.push_back(GaussianComponent::from_eigen(c.weight(), subvector(c.mean(), coords), std::move(vectors),
                                                std::move(values)));
  }
  return GaussianMixture(std::move(out));
}

GaussianMixture GaussianMixture::condition(const std::vector<Index>& observed, const Vec& value) const {
  std::vector<Index> target = complement(dim_, observed);
  if (target.empty()) throw DomainError("conditioning on every coordinate leaves nothing to condition");
  if (observed.empty()) return marginal(target);
  return LinearConditioner(*this, std::move(target), observed, 1.0, 0.0).bind(value);
}

Mat GaussianMixture::posterior_mean(const Mat& xt, double t) const {
  require_shape(xt.rows() == dim_, "posterior_mean: dimension mismatch");
  std::vector<const Mat*> vectors;
  std::vector<const Vec*> values;
  std::vector<Mat> means;
  Mat log_prior(size(), 1);
  for (Index k = 0; k < size(); ++k) {
    const auto& c = component(k);
    vectors.push_back(&c.eigenvectors());
    values.push_back(&c.eigenvalues());
    means.emplace_back(c.mean());
    log_prior(k, 0) = std::log(c.weight());
  }
  return mixture_posterior_mean(vectors, values, means, log_prior, xt, t);
}

SequenceDistribution::SequenceDistribution(SequenceSpec s, GaussianMixture m) : spec(s), mixture(std::move(m)) {
  spec.validate();
  if (mixture.dim() != spec.dim()) throw ShapeError("mixture dimension must equal N * d");
}

// ---------------------------------------------------------------------------

LinearConditioner::LinearConditioner(const GaussianMixture& prior, std::vector<Index> target,
                                     std::vector<Index> observed, double scale, double noise_sd)
    : target_(std::move(target)), observed_(std::move(observed)) {
  if (target_.empty()) throw DomainError("conditioner needs target coordinates");
  const Index a = observed_dim();
  parts_.reserve(static_cast<std::size_t>(prior.size()));
  for (const auto& c : prior.components()) {
    Part p;
    p.log_weight = std::log(c.weight());
    p.target_mean = subvector(c.mean(), target_);
    const Mat& sigma = c.covariance();
    const Mat s_bb = submatrix(sigma, target_, target_);
    if (a == 0) {
      p.obs_mean.resize(0);
      p.gain.resize(target_dim(), 0);
      symmetric_eigen(s_bb, p.cond_vectors, p.cond_values);
      parts_.push_back(std::move(p));
      continue;
    }
    const Mat s_aa = submatrix(sigma, observed_, observed_);
    const Mat s_ba = submatrix(sigma, target_, observed_);
    const Mat obs_cov = scale * scale * s_aa + noise_sd * noise_sd * Mat::Identity(a, a);
    Eigen::SelfAdjointEigenSolver<Mat> solver(0.5 * (obs_cov + obs_cov.transpose()));
    if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    const double top = std::max(1.0, solver.eigenvalues().maxCoeff());
    if (solver.eigenvalues().minCoeff() <= kEigenClamp * top)
      throw SingularError("observation covariance is singular; cannot condition");
    p.obs_vectors = solver.eigenvectors();
    p.obs_values = solver.eigenvalues();
    const Mat obs_inv = p.obs_vectors * p.obs_values.cwiseInverse().asDiagonal() * p.obs_vectors.transpose();
    p.obs_mean = scale * subvector(c.mean(), observed_);
    p.gain = scale * s_ba * obs_inv;
    const Mat cond = s_bb - p.gain * (scale * s_ba.transpose());
    symmetric_eigen(cond, p.cond_vectors, p.cond_values);
    parts_.push_back(std::move(p));
  }
}

Mat LinearConditioner::component_means(Index k, const Mat& observations) const {
  const Part& p = parts_[static_cast<std::size_t>(k)];
  if (observed_dim() == 0) return p.target_mean.replicate(1, std::max<Index>(observations.cols(), 1));
  require_shape(observations.rows() == observed_dim(), "conditioner: observation dimension mismatch");
  return (p.gain * (observations.colwise() - p.obs_mean)).colwise() + p.target_mean;
}

Mat LinearConditioner::log_weights(const Mat& observations) const {
  const Index n = std::max<Index>(observations.cols(), 1);
  Mat logw(size(), n);
  for (Index k = 0; k < size(); ++k) {
    const Part& p = parts_[static_cast<std::size_t>(k)];
    if (observed_dim() == 0) {
      logw.row(k).setConstant(p.log_weight);
      continue;
    }
    const Mat y = p.obs_vectors.transpose() * (observations.colwise() - p.obs_mean);
    const double base = p.log_weight - 0.5 * p.obs_values.array().log().sum() -
                        0.5 * static_cast<double>(observed_dim()) * kLog2Pi;
    logw.row(k) = base - 0.5 * (y.array().square().colwise() / p.obs_values.array()).colwise().sum();
  }
  normalize_log_columns(logw);
  return logw;
}

GaussianMixture LinearConditioner::bind(const Vec& observation) const {
  require_shape(observation.size() == observed_dim(), "conditioner: observation dimension mismatch");
  const Mat obs = observation;
  const Mat logw = log_weights(obs);
  std::vector<GaussianComponent> out;
  double total = 0.0;
  for (Index k = 0; k < size(); ++k) total += std::exp(logw(k, 0));
  for (Index k = 0; k < size(); ++k) {
    const double w = std::exp(logw(k, 0)) / total;
    if (w <= 0.0) continue;
    const Part& p = parts_[static_cast<std::size_t>(k)];
    out.push_back(GaussianComponent::from_eigen(std::min(w, 1.0), component_means(k, obs).col(0), p.cond_vectors,
                                                p.cond_values));
  }
  return GaussianMixture(std::move(out));
}

// ---------------------------------------------------------------------------

Mat mixture_posterior_mean(const std::vector<const Mat*>& eigenvectors, const std::vector<const Vec*>& eigenvalues,
                           const std::vector<Mat>& means, const Mat& log_prior, const Mat& xt, double t) {
  check_time(t);
  const Index K = static_cast<Index>(means.size());
  const Index n = xt.cols();
  const double a = NoiseSchedule::alpha(t);
  const double s = NoiseSchedule::sigma(t);
  std::vector<Mat> post(static_cast<std::size_t>(K));
  Mat logp(K, n);
  Mat scratch;
  for (Index k = 0; k < K; ++k) {
    const Mat& V = *eigenvectors[static_cast<std::size_t>(k)];
    const Vec& lam = *eigenvalues[static_cast<std::size_t>(k)];
    const Vec var = (a * a * lam.array() + s * s).matrix();
    if ((var.array() <= 0.0).any()) throw SingularError("noisy covariance is singular (t = 0 with a degenerate component)");
    const Mat& mu = broadcast(means[static_cast<std::size_t>(k)], n, scratch);
    const Mat y = V.transpose() * (xt - a * mu);
    const Vec gain = (a * lam.array() / var.array()).matrix();
    post[static_cast<std::size_t>(k)] = mu + V * (gain.asDiagonal() * y);
    if (K > 1) {
      const Mat lp = log_prior.cols() == n ? Mat(log_prior.row(k)) : Mat::Constant(1, n, log_prior(k, 0));
      logp.row(k) = lp.array() - 0.5 * var.array().log().sum() -
                    0.5 * (y.array().square().colwise() / var.array()).colwise().sum();
    }
  }
  if (K == 1) return std::move(post.front());
  normalize_log_columns(logp);
  Mat out = Mat::Zero(xt.rows(), n);
  for (Index k = 0; k < K; ++k)
    out += post[static_cast<std::size_t>(k)] * logp.row(k).array().exp().matrix().asDiagonal();
  return out;
}

// ---------------------------------------------------------------------------

Mat sample_clean(const SequenceDistribution& dist, Index count, std::uint64_t seed) {
  if (count < 1) throw DomainError("sample_clean: count must be >= 1");
  Rng rng(seed);
  return dist.mixture.sample(count, rng);
}

NoisyState forward_noise(const Vec& x0, double t, const Vec& eps) {
  check_time(t);
  require_shape(x0.size() == eps.size(), "forward_noise: x0 and eps differ in size");
  return NoisyState{NoiseSchedule::alpha(t) * x0 + NoiseSchedule::sigma(t) * eps, t};
}

Vec joint_posterior_mean(const SequenceDistribution& dist, const NoisyState& xt) {
  return joint_posterior_mean(dist, Mat(xt.values), xt.time).col(0);
}

Mat joint_posterior_mean(const SequenceDistribution& dist, const Mat& xt, double t) {
  return dist.mixture.posterior_mean(xt, t);
}

Vec exact_score(const SequenceDistribution& dist, const NoisyState& xt) {
  return exact_score(dist, Mat(xt.values), xt.time).col(0);
}

Mat exact_score(const SequenceDistribution& dist, const Mat& xt, double t) {
  check_time(t);
  require_shape(xt.rows() == dist.spec.dim(), "exact_score: dimension mismatch");
  return dist.mixture.noised(t).score(xt);
}

SequenceDistribution conditional_clean_dist(const SequenceDistribution& dist, Index chunk, const Vec& prefix) {
  const auto target = chunk_indices(dist.spec, chunk);
  require_shape(prefix.size() == dist.spec.prefix_dim(chunk), "conditional_clean_dist: prefix length mismatch");
  if (chunk == 0) return SequenceDistribution(chunk_spec(dist.spec), dist.mixture.marginal(target));
  LinearConditioner cond(dist.mixture, target, prefix_indices(dist.spec, chunk), 1.0, 0.0);
  return SequenceDistribution(chunk_spec(dist.spec), cond.bind(prefix));
}

SequenceDistribution df_conditional_dist(const SequenceDistribution& dist, Index chunk, const NoisyState& noisy_prefix) {
  check_time(noisy_prefix.time);
  const auto target = chunk_indices(dist.spec, chunk);
  require_shape(noisy_prefix.values.size() == dist.spec.prefix_dim(chunk),
                "df_conditional_dist: prefix length mismatch");
  if (chunk == 0) return SequenceDistribution(chunk_spec(dist.spec), dist.mixture.marginal(target));
  const double t = noisy_prefix.time;
  LinearConditioner cond(dist.mixture, target, prefix_indices(dist.spec, chunk), NoiseSchedule::alpha(t),
                         NoiseSchedule::sigma(t));
  return SequenceDistribution(chunk_spec(dist.spec), cond.bind(noisy_prefix.values));
}

// ---------------------------------------------------------------------------

SequenceDistribution standard_normal_dist(const SequenceSpec& spec) {
  spec.validate();
  return SequenceDistribution(spec, GaussianMixture({GaussianComponent(1.0, Vec::Zero(spec.dim()),
                                                                       Mat::Identity(spec.dim(), spec.dim()))}));
}

SequenceDistribution bivariate_gaussian(double rho) { return ar1_gaussian(2, rho, 1); }

SequenceDistribution ar1_gaussian(Index n_frames, double corr, Index chunk_size) {
  if (!(std::abs(corr) < 1.0)) throw DomainError("AR(1) correlation must lie in (-1, 1)");
  const SequenceSpec spec{n_frames, 1, chunk_size};
  spec.validate();
  Mat cov(n_frames, n_frames);
  for (Index i = 0; i < n_frames; ++i)
    for (Index j = 0; j < n_frames; ++j) cov(i, j) = std::pow(corr, static_cast<double>(std::abs(i - j)));
  return SequenceDistribution(spec, GaussianMixture({GaussianComponent(1.0, Vec::Zero(n_frames), cov)}));
}

SequenceDistribution two_mode_mixture(double offset, double variance) {
  const Mat cov = Mat::Constant(1, 1, variance);
  return SequenceDistribution(SequenceSpec{1, 1, 1},
                              GaussianMixture({GaussianComponent(0.5, Vec::Constant(1, -offset), cov),
                                               GaussianComponent(0.5, Vec::Constant(1, offset), cov)}));
}

}  // namespace arlab
