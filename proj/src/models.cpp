// SPDX-License-Identifier: Apache-2.0
#include "arlab/models.hpp"

#include "vector_math.hpp"

#include <cmath>
#include <numbers>

namespace arlab {

Vec time_embedding(double t) {
  Vec e(kTimeEmbeddingDim);
  e << t, 1.0 - t, std::sin(2.0 * std::numbers::pi * t), std::cos(2.0 * std::numbers::pi * t);
  return e;
}

void FeatureSpec::validate() const {
  if (m < 1) throw DomainError("feature count must be >= 1");
  if (chunk_dim < 1 || prefix_dim < 0) throw DomainError("invalid feature input dimensions");
  if (!(frequency_scale > 0.0)) throw DomainError("frequency_scale must be positive");
}

FeatureMap::FeatureMap(const FeatureSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec.seed);
  omega_ = spec.frequency_scale * standard_normal(spec.m, spec.input_dim(), rng);
  std::uniform_real_distribution<double> unif(0.0, 2.0 * std::numbers::pi);
  phase_.resize(spec.m);
  for (Index j = 0; j < spec.m; ++j) phase_(j) = unif(rng);
}

FeatureMap::FeatureMap(const FeatureSpec& spec, Mat frequencies, Vec phases)
    : spec_(spec), omega_(std::move(frequencies)), phase_(std::move(phases)) {
  spec_.validate();
  require_shape(omega_.rows() == spec.m && omega_.cols() == spec.input_dim(), "feature frequencies shape");
  require_shape(phase_.size() == spec.m, "feature phases shape");
}

Mat FeatureMap::finish(Mat pre) const {
  pre.colwise() += phase_;
  detail::cos_inplace(pre.data(), pre.size());
  pre *= std::sqrt(2.0 / static_cast<double>(spec_.m));
  return pre;
}

Mat FeatureMap::features(const Mat& chunk, const Mat& prefix, const Vec& t) const {
  require_shape(chunk.rows() == spec_.chunk_dim, "featurize: chunk dimension mismatch");
  require_shape(prefix.rows() == spec_.prefix_dim, "featurize: prefix dimension mismatch");
  require_shape(prefix.cols() == chunk.cols() || spec_.prefix_dim == 0, "featurize: prefix column count mismatch");
  require_shape(t.size() == chunk.cols(), "featurize: one time per column required");
  const Index n = chunk.cols();
  Mat emb(kTimeEmbeddingDim, n);
  for (Index j = 0; j < n; ++j) emb.col(j) = time_embedding(t(j));
  Mat pre = omega_.leftCols(spec_.chunk_dim) * chunk + omega_.rightCols(kTimeEmbeddingDim) * emb;
  if (spec_.prefix_dim > 0) pre.noalias() += omega_.middleCols(spec_.chunk_dim, spec_.prefix_dim) * prefix;
  return finish(std::move(pre));
}

Mat FeatureMap::features(const Mat& chunk, const Mat& prefix, double t) const {
  require_shape(chunk.rows() == spec_.chunk_dim, "featurize: chunk dimension mismatch");
  require_shape(prefix.rows() == spec_.prefix_dim, "featurize: prefix dimension mismatch");
  require_shape(prefix.cols() == chunk.cols() || spec_.prefix_dim == 0, "featurize: prefix column count mismatch");
  Mat pre = omega_.leftCols(spec_.chunk_dim) * chunk;
  if (spec_.prefix_dim > 0) pre.noalias() += omega_.middleCols(spec_.chunk_dim, spec_.prefix_dim) * prefix;
  pre.colwise() += omega_.rightCols(kTimeEmbeddingDim) * time_embedding(t);
  return finish(std::move(pre));
}

Vec FeatureMap::featurize(const Vec& chunk, const Vec& prefix, double t) const {
  return features(Mat(chunk), Mat(prefix), t).col(0);
}

std::string to_string(Role r) {
  switch (r) {
    case Role::generator: return "generator";
    case Role::ar_velocity: return "ar-velocity";
    case Role::fake_score: return "fake-score";
  }
  return "unknown";
}

Role role_from_string(const std::string& s) {
  if (s == "generator") return Role::generator;
  if (s == "ar-velocity") return Role::ar_velocity;
  if (s == "fake-score") return Role::fake_score;
  throw FormatError("unknown role '" + s + "'");
}

LinearStudent::LinearStudent(const FeatureSpec& spec, Role role)
    : map_(spec), theta_(Mat::Zero(spec.m, spec.chunk_dim)), role_(role) {}

LinearStudent::LinearStudent(FeatureMap map, Mat theta, Role role)
    : map_(std::move(map)), theta_(std::move(theta)), role_(role) {
  require_shape(theta_.rows() == spec().m && theta_.cols() == spec().chunk_dim, "theta shape");
}

void LinearStudent::set_theta(const Mat& theta) {
  require_shape(theta.rows() == theta_.rows() && theta.cols() == theta_.cols(), "theta shape");
  theta_ = theta;
}

Vec LinearStudent::predict(const Vec& chunk, const Vec& prefix, double t) const {
  return theta_.transpose() * map_.featurize(chunk, prefix, t);
}

Mat LinearStudent::predict(const Mat& chunk, const Mat& prefix, double t) const {
  return theta_.transpose() * map_.features(chunk, prefix, t);
}

Mat LinearStudent::predict(const Mat& chunk, const Mat& prefix, const Vec& t) const {
  return theta_.transpose() * map_.features(chunk, prefix, t);
}

Mat grad_output_wrt_params(const LinearStudent& model, const Vec& chunk, const Vec& prefix, double t) {
  const Vec phi = model.feature_map().featurize(chunk, prefix, t);
  const Index m = model.spec().m;
  const Index k = model.output_dim();
  Mat jac = Mat::Zero(k, m * k);
  for (Index r = 0; r < k; ++r) jac.block(r, r * m, 1, m) = phi.transpose();
  return jac;
}

namespace {

Mat solve_normal_equations(Mat gram, const Mat& cross, double lambda) {
  if (lambda < 0.0) throw DomainError("ridge lambda must be >= 0");
  gram.diagonal().array() += lambda;
  Eigen::LLT<Mat> llt(gram);
  const double scale = std::max(1.0, gram.diagonal().maxCoeff());
  if (llt.info() != Eigen::Success || llt.matrixLLT().diagonal().minCoeff() <= 1e-14 * std::sqrt(scale))
    throw SingularError("ridge normal equations are singular; increase lambda");
  Mat theta = llt.solve(cross);
  require_finite(theta, "ridge solution");
  return theta;
}

}  // namespace

Mat fit_ridge(const Mat& features, const Mat& targets, double lambda, const Vec& weights) {
  if (features.cols() < 1) throw DomainError("fit_ridge: need at least one sample");
  RidgeAccumulator acc(features.rows(), targets.rows());
  acc.add(features, targets, weights);
  return acc.solve(lambda);
}

RidgeAccumulator::RidgeAccumulator(Index m, Index outputs) : gram_(Mat::Zero(m, m)), cross_(Mat::Zero(m, outputs)) {}

void RidgeAccumulator::add(const Mat& features, const Mat& targets, const Vec& weights) {
  require_shape(features.rows() == gram_.rows(), "ridge: feature count mismatch");
  require_shape(targets.rows() == cross_.cols() && targets.cols() == features.cols(), "ridge: target shape mismatch");
  require_shape(weights.size() == 0 || weights.size() == features.cols(), "ridge: weight count mismatch");
  require_finite(targets, "ridge targets");
  if (weights.size() == 0) {
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(features);
    cross_.noalias() += features * targets.transpose();
    energy_ += targets.squaredNorm();
    weight_ += static_cast<double>(features.cols());
  } else {
    if ((weights.array() < 0.0).any()) throw DomainError("ridge: negative sample weight");
    const Mat scaled = features * weights.cwiseSqrt().asDiagonal();
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(scaled);
    cross_.noalias() += features * weights.asDiagonal() * targets.transpose();
    energy_ += (targets.colwise().squaredNorm().transpose().array() * weights.array()).sum();
    weight_ += weights.sum();
  }
}

void RidgeAccumulator::decay(double factor) {
  gram_ *= factor;
  cross_ *= factor;
  energy_ *= factor;
  weight_ *= factor;
}

Mat RidgeAccumulator::solve(double lambda) const {
  Mat full = gram_.selfadjointView<Eigen::Lower>();
  return solve_normal_equations(std::move(full), cross_, lambda);
}

double RidgeAccumulator::mean_residual(const Mat& theta) const {
  if (weight_ <= 0.0) return 0.0;
  const Mat full = gram_.selfadjointView<Eigen::Lower>();
  const double quad = (theta.transpose() * full * theta).trace();
  return std::max(0.0, energy_ - 2.0 * (theta.transpose() * cross_).trace() + quad) / weight_;
}

void sgd_step(Mat& theta, const Mat& gradient, double learning_rate) {
  require_shape(theta.rows() == gradient.rows() && theta.cols() == gradient.cols(), "sgd_step: shape mismatch");
  require_finite(gradient, "gradient");
  theta -= learning_rate * gradient;
}

void ema_update(Mat& theta_minus, const Mat& theta, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("ema rate must lie in [0, 1)");
  require_shape(theta.rows() == theta_minus.rows() && theta.cols() == theta_minus.cols(), "ema_update: shape mismatch");
  theta_minus = rate * theta_minus + (1.0 - rate) * theta;
}

void Adam::step(Mat& theta, const Mat& gradient, double learning_rate) {
  require_shape(theta.rows() == gradient.rows() && theta.cols() == gradient.cols(), "adam: shape mismatch");
  require_finite(gradient, "gradient");
  if (m_.size() == 0) {
    m_ = Mat::Zero(theta.rows(), theta.cols());
    v_ = Mat::Zero(theta.rows(), theta.cols());
  }
  ++t_;
  m_ = b1_ * m_ + (1.0 - b1_) * gradient;
  v_ = b2_ * v_ + (1.0 - b2_) * gradient.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  theta.array() -= learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

// ---------------------------------------------------------------------------

ChunkwiseStudent::ChunkwiseStudent(const SequenceSpec& spec, Role role, Index m, double frequency_scale,
                                   std::uint64_t seed)
    : spec_(spec), role_(role) {
  spec.validate();
  for (Index c = 0; c < spec.n_chunks(); ++c) {
    FeatureSpec fs{m, spec.chunk_dim(), spec.prefix_dim(c), frequency_scale, split_seed(seed, static_cast<std::uint64_t>(c))};
    heads_.emplace_back(fs, role);
  }
}

ChunkwiseStudent::ChunkwiseStudent(const SequenceSpec& spec, Role role, std::vector<LinearStudent> heads)
    : spec_(spec), role_(role), heads_(std::move(heads)) {
  spec.validate();
  require_shape(static_cast<Index>(heads_.size()) == spec.n_chunks(), "one head per chunk required");
  for (Index c = 0; c < spec.n_chunks(); ++c) {
    const FeatureSpec& fs = heads_[static_cast<std::size_t>(c)].spec();
    require_shape(fs.chunk_dim == spec.chunk_dim() && fs.prefix_dim == spec.prefix_dim(c),
                  "head input dimensions do not match the sequence spec");
  }
}

Mat ChunkwiseStudent::predict(Index chunk, const Mat& x, const Mat& prefixes, double t) const {
  return head(chunk).predict(x, prefixes, t);
}

Mat ChunkwiseStudent::generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const {
  if (t == 0.0) return x;
  return x - t * predict(chunk, x, prefixes, t);
}

Mat ChunkwiseStudent::generate(Index chunk, const Mat& x, const Mat& prefixes, const Vec& t) const {
  return x - head(chunk).predict(x, prefixes, t) * t.asDiagonal();
}

bool ChunkwiseStudent::same_features(const ChunkwiseStudent& other) const {
  if (!(spec_ == other.spec_) || heads_.size() != other.heads_.size()) return false;
  for (std::size_t c = 0; c < heads_.size(); ++c)
    if (!(heads_[c].spec() == other.heads_[c].spec())) return false;
  return true;
}

void ChunkwiseStudent::copy_parameters_from(const ChunkwiseStudent& other) {
  if (!same_features(other)) throw ShapeError("parameter copy requires identical feature specs");
  for (std::size_t c = 0; c < heads_.size(); ++c) heads_[c].set_theta(other.heads_[c].theta());
}

LearnedArTeacher::LearnedArTeacher(std::shared_ptr<const ChunkwiseStudent> model) : model_(std::move(model)) {
  if (model_->role() != Role::ar_velocity) throw DomainError("learned teacher needs an ar-velocity model");
}

BatchField LearnedArTeacher::bind(Index chunk, const Mat& prefixes) const {
  auto model = model_;
  Mat p = prefixes;
  return [model, chunk, p](const Mat& x, double t) -> Mat {
    if (!(t > 0.0)) throw DomainError("velocity_ar: t must be > 0");
    return model->predict(chunk, x, p, t);
  };
}

Mat OracleFlowGenerator::generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const {
  if (t == 0.0) return x;
  return flow_map_ar(*teacher_, chunk, prefixes, x, t, steps_);
}

Mat ConditionalMeanGenerator::generate(Index chunk, const Mat& x, const Mat& prefixes, double t) const {
  if (t == 0.0) return x;
  return x - t * teacher_->bind(chunk, prefixes)(x, t);
}

}  // namespace arlab
