// SPDX-License-Identifier: Apache-2.0
#include "arlab/stages.hpp"

#include <chrono>
#include <cmath>
#include <functional>

namespace arlab {

namespace {

constexpr Index kBlock = 2048;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Regression rows for one head: predict `target` from (x, prefix, t) with
// per-row weights.
struct Design {
  Mat x;
  Mat prefix;
  Vec t;
  Mat target;
  Vec weight;
};

double ridge_head(LinearStudent& head, Index blocks, const std::function<Design(Index)>& make, double lambda) {
  RidgeAccumulator acc(head.spec().m, head.output_dim());
  for (Index b = 0; b < blocks; ++b) {
    const Design d = make(b);
    acc.add(head.feature_map().features(d.x, d.prefix, d.t), d.target, d.weight);
  }
  head.set_theta(acc.solve(lambda));
  return acc.mean_residual(head.theta());
}

// One weighted least-squares gradient step; returns the batch loss before the step.
double gradient_head(LinearStudent& head, const Design& d, const TrainConfig& cfg, Adam& adam) {
  const Mat phi = head.feature_map().features(d.x, d.prefix, d.t);
  const Mat resid = head.theta().transpose() * phi - d.target;
  const double wsum = d.weight.sum();
  const double loss = (resid.colwise().squaredNorm().transpose().array() * d.weight.array()).sum() / wsum;
  const Mat grad = (2.0 / wsum) * phi * (d.weight.asDiagonal() * resid.transpose());
  if (cfg.optimizer == Optimizer::adam)
    adam.step(head.theta(), grad, cfg.learning_rate);
  else
    sgd_step(head.theta(), grad, cfg.learning_rate);
  return loss;
}

void check_loss(double loss) {
  if (!std::isfinite(loss)) throw NumericalError("non-finite training loss");
  if (loss > 1e6) throw NumericalError("training diverged (loss > 1e6)");
}

Vec uniform_times(Index n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec t(n);
  for (Index j = 0; j < n; ++j) t(j) = hi - (hi - lo) * u(rng);
  return t;
}

// Fits every head of `model` either in closed form over `blocks` x kBlock
// rows or by cfg.step_count gradient steps on batches of cfg.batch_size.
std::vector<double> fit_heads(ChunkwiseStudent& model, const TrainConfig& cfg, std::uint64_t seed,
                              const std::function<Design(Index chunk, Index n, Rng& rng)>& make, Index rows_per_chunk) {
  std::vector<double> trace;
  const Index chunks = model.size();
  if (cfg.optimizer == Optimizer::ridge) {
    double total = 0.0;
    for (Index c = 0; c < chunks; ++c) {
      const Index blocks = (rows_per_chunk + kBlock - 1) / kBlock;
      total += ridge_head(model.head(c), blocks, [&](Index b) {
        Rng rng(split_seed(split_seed(seed, static_cast<std::uint64_t>(c)), static_cast<std::uint64_t>(b)));
        return make(c, std::min(kBlock, rows_per_chunk - b * kBlock), rng);
      }, cfg.ridge_lambda);
    }
    trace.push_back(total / static_cast<double>(chunks));
    check_loss(trace.back());
    return trace;
  }
  std::vector<Adam> adams(static_cast<std::size_t>(chunks));
  for (int s = 0; s < cfg.step_count; ++s) {
    double total = 0.0;
    for (Index c = 0; c < chunks; ++c) {
      Rng rng(split_seed(split_seed(seed, static_cast<std::uint64_t>(c)), static_cast<std::uint64_t>(s)));
      total += gradient_head(model.head(c), make(c, cfg.batch_size, rng), cfg, adams[static_cast<std::size_t>(c)]);
    }
    trace.push_back(total / static_cast<double>(chunks));
    check_loss(trace.back());
  }
  return trace;
}

}  // namespace

std::string to_string(Optimizer o) {
  switch (o) {
    case Optimizer::ridge: return "ridge";
    case Optimizer::sgd: return "sgd";
    case Optimizer::adam: return "adam";
  }
  return "unknown";
}

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "ridge") return Optimizer::ridge;
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw DomainError("unknown optimizer '" + s + "'");
}

std::string to_string(PrefixMode m) { return m == PrefixMode::noisy ? "noisy" : "clean"; }

PrefixMode prefix_mode_from_string(const std::string& s) {
  if (s == "noisy") return PrefixMode::noisy;
  if (s == "clean") return PrefixMode::clean;
  throw DomainError("unknown prefix mode '" + s + "'");
}

std::string to_string(TeacherKind k) { return k == TeacherKind::autoregressive ? "autoregressive" : "bidirectional"; }

TeacherKind teacher_kind_from_string(const std::string& s) {
  if (s == "autoregressive") return TeacherKind::autoregressive;
  if (s == "bidirectional") return TeacherKind::bidirectional;
  throw DomainError("unknown teacher kind '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be positive");
  if (step_count < 1) throw DomainError("step_count must be >= 1");
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  if (!(ridge_lambda >= 0.0)) throw DomainError("ridge_lambda must be >= 0");
  if (!(ema_rate >= 0.0 && ema_rate < 1.0)) throw DomainError("ema_rate must lie in [0, 1)");
  if (!(loss_weight > 0.0)) throw DomainError("loss_weight must be positive");
  if (fake_update_ratio < 1) throw DomainError("fake_update_ratio must be >= 1");
  if (!(fake_memory >= 0.0 && fake_memory <= 1.0)) throw DomainError("fake_memory must lie in [0, 1]");
  if (sample_count < 1) throw DomainError("sample_count must be >= 1");
  if (!(t_min > 0.0 && t_min < t_max && t_max <= 1.0)) throw DomainError("need 0 < t_min < t_max <= 1");
  if (cd_grid < 2) throw DomainError("cd_grid must be >= 2");
}

// ---------------------------------------------------------------------------

StageResult train_ar_diffusion(const SequenceDistribution& dist, ChunkwiseStudent model, const TrainConfig& cfg,
                               Forcing forcing, std::uint64_t seed) {
  cfg.validate();
  if (model.role() != Role::ar_velocity) throw DomainError("diffusion training needs an ar-velocity model");
  if (!(model.spec() == dist.spec)) throw ShapeError("model and distribution specs differ");
  const auto start = Clock::now();
  const SequenceSpec& spec = dist.spec;
  auto make = [&](Index c, Index n, Rng& rng) {
    const Mat x0 = dist.mixture.sample(n, rng);
    const Mat eps = standard_normal(spec.dim(), n, rng);
    const Vec t = uniform_times(n, 0.0, 1.0, rng);
    const Mat xt = x0 * (1.0 - t.array()).matrix().asDiagonal() + eps * t.asDiagonal();
    const Index off = spec.chunk_offset(c), cd = spec.chunk_dim(), pd = spec.prefix_dim(c);
    Design d;
    d.x = xt.middleRows(off, cd);
    d.prefix = forcing == Forcing::teacher ? x0.topRows(pd) : xt.topRows(pd);
    d.t = t;
    d.target = eps.middleRows(off, cd) - x0.middleRows(off, cd);
    d.weight = Vec::Constant(n, cfg.loss_weight);
    return d;
  };
  std::vector<double> trace = fit_heads(model, cfg, seed, make, cfg.sample_count);
  return StageResult{std::move(model), std::nullopt, std::move(trace), seconds_since(start), seed, cfg};
}

StageResult train_ar_diffusion_tf(const SequenceDistribution& dist, ChunkwiseStudent model, const TrainConfig& cfg,
                                  std::uint64_t seed) {
  return train_ar_diffusion(dist, std::move(model), cfg, Forcing::teacher, seed);
}

StageResult train_ar_diffusion_df(const SequenceDistribution& dist, ChunkwiseStudent model, const TrainConfig& cfg,
                                  std::uint64_t seed) {
  return train_ar_diffusion(dist, std::move(model), cfg, Forcing::diffusion, seed);
}

StageResult ode_distill(const PairDataset& data, ChunkwiseStudent student, const TrainConfig& cfg, PrefixMode mode,
                        std::uint64_t seed) {
  cfg.validate();
  if (data.records.empty()) throw DomainError("ode_distill: empty dataset");
  if (student.role() != Role::generator) throw DomainError("ode_distill needs a generator");
  if (!(student.spec() == data.spec)) throw ShapeError("student and dataset specs differ");
  if (mode == PrefixMode::noisy && is_autoregressive(data.provenance))
    throw DomainError("noisy prefixes exist only in bidirectional datasets");
  const auto start = Clock::now();
  const SequenceSpec& spec = data.spec;
  const Index times = static_cast<Index>(data.grid.size());

  std::vector<std::vector<const ODEPairRecord*>> by_chunk(static_cast<std::size_t>(spec.n_chunks()));
  for (const auto& r : data.records) {
    if (r.chunk_index < 0 || r.chunk_index >= spec.n_chunks()) throw FormatError("record chunk index out of range");
    if (mode == PrefixMode::noisy && static_cast<Index>(r.noisy_prefix.size()) != times)
      throw FormatError("record lacks noisy prefixes");
    by_chunk[static_cast<std::size_t>(r.chunk_index)].push_back(&r);
  }

  auto fill = [&](Design& d, Index col, const ODEPairRecord& r, Index g) {
    const double t = data.grid.times[static_cast<std::size_t>(g)];
    d.x.col(col) = r.snapshots[static_cast<std::size_t>(g)];
    if (d.prefix.rows() > 0)
      d.prefix.col(col) = mode == PrefixMode::noisy ? r.noisy_prefix[static_cast<std::size_t>(g)] : r.prefix;
    d.t(col) = t;
    // ||x - t h - x0||^2 = t^2 ||h - (x - x0) / t||^2
    d.target.col(col) = (r.snapshots[static_cast<std::size_t>(g)] - r.endpoint) / t;
    d.weight(col) = cfg.loss_weight * t * t;
  };
  auto blank = [&](Index c, Index n) {
    Design d;
    d.x.resize(spec.chunk_dim(), n);
    d.prefix.resize(spec.prefix_dim(c), n);
    d.t.resize(n);
    d.target.resize(spec.chunk_dim(), n);
    d.weight.resize(n);
    return d;
  };

  std::vector<double> trace;
  if (cfg.optimizer == Optimizer::ridge) {
    double total = 0.0;
    Index used = 0;
    for (Index c = 0; c < spec.n_chunks(); ++c) {
      const auto& recs = by_chunk[static_cast<std::size_t>(c)];
      if (recs.empty()) continue;
      const Index rows = static_cast<Index>(recs.size()) * times;
      const Index blocks = (rows + kBlock - 1) / kBlock;
      total += ridge_head(student.head(c), blocks, [&](Index b) {
        const Index first = b * kBlock;
        const Index n = std::min(kBlock, rows - first);
        Design d = blank(c, n);
        for (Index j = 0; j < n; ++j) fill(d, j, *recs[static_cast<std::size_t>((first + j) / times)], (first + j) % times);
        return d;
      }, cfg.ridge_lambda);
      ++used;
    }
    trace.push_back(total / static_cast<double>(used));
    check_loss(trace.back());
  } else {
    std::vector<Adam> adams(static_cast<std::size_t>(spec.n_chunks()));
    for (int s = 0; s < cfg.step_count; ++s) {
      double total = 0.0;
      Index used = 0;
      for (Index c = 0; c < spec.n_chunks(); ++c) {
        const auto& recs = by_chunk[static_cast<std::size_t>(c)];
        if (recs.empty()) continue;
        Rng rng(split_seed(split_seed(seed, static_cast<std::uint64_t>(c)), static_cast<std::uint64_t>(s)));
        std::uniform_int_distribution<std::size_t> pick(0, recs.size() - 1);
        std::uniform_int_distribution<Index> pick_t(0, times - 1);
        Design d = blank(c, cfg.batch_size);
        for (Index j = 0; j < cfg.batch_size; ++j) fill(d, j, *recs[pick(rng)], pick_t(rng));
        total += gradient_head(student.head(c), d, cfg, adams[static_cast<std::size_t>(c)]);
        ++used;
      }
      trace.push_back(total / static_cast<double>(used));
      check_loss(trace.back());
    }
  }
  return StageResult{std::move(student), std::nullopt, std::move(trace), seconds_since(start), seed, cfg};
}

// ---------------------------------------------------------------------------

FewStepOutput few_step_sample_traced(const ChunkGenerator& generator, Index chunk, const TimestepGrid& grid,
                                     const Mat& prefixes, std::uint64_t seed) {
  grid.validate();
  const SequenceSpec spec = generator.spec();
  require_shape(prefixes.rows() == spec.prefix_dim(chunk), "few_step_sample: prefix dimension mismatch");
  const Index n = prefixes.cols();
  Rng rng(seed);
  FewStepOutput out;
  Mat x = standard_normal(spec.chunk_dim(), n, rng);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double t = grid.times[k];
    Mat x0 = generator.generate(chunk, x, prefixes, t);
    require_finite(x0, "few-step sample");
    if (k + 1 == grid.size()) {
      out.last_input = std::move(x);
      out.last_time = t;
      out.sample = std::move(x0);
      break;
    }
    const double next = grid.times[k + 1];
    x = (1.0 - next) * x0 + next * standard_normal(spec.chunk_dim(), n, rng);
  }
  return out;
}

Mat few_step_sample(const ChunkGenerator& generator, Index chunk, const TimestepGrid& grid, const Mat& prefixes,
                    std::uint64_t seed) {
  return few_step_sample_traced(generator, chunk, grid, prefixes, seed).sample;
}

Mat rollout(const ChunkGenerator& generator, const TimestepGrid& grid, Index count, std::uint64_t seed) {
  const SequenceSpec spec = generator.spec();
  Mat seq(spec.dim(), count);
  for (Index c = 0; c < spec.n_chunks(); ++c) {
    const Mat prefixes = seq.topRows(spec.prefix_dim(c));
    seq.middleRows(spec.chunk_offset(c), spec.chunk_dim()) =
        few_step_sample(generator, c, grid, prefixes, split_seed(seed, static_cast<std::uint64_t>(c)));
  }
  return seq;
}

// ---------------------------------------------------------------------------

Mat VelocityScore::score(Index chunk, const Mat& prefixes, const Mat& x, double t) const {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("score: t must lie in (0, 1]");
  return -(x + (1.0 - t) * teacher_->bind(chunk, prefixes)(x, t)) / t;
}

Mat ModelScore::score(Index chunk, const Mat& prefixes, const Mat& x, double t) const {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("score: t must lie in (0, 1]");
  return -(x + (1.0 - t) * model_->predict(chunk, x, prefixes, t)) / t;
}

Mat dmd_generator_gradient(const LinearStudent& head, const Mat& last_input, const Mat& prefixes, double last_time,
                           const Mat& score_difference) {
  require_shape(score_difference.rows() == head.output_dim() && score_difference.cols() == last_input.cols(),
                "score difference shape");
  const Mat phi = head.feature_map().features(last_input, prefixes, last_time);
  // d x~_k / d theta_{jk} = -t phi_j
  Mat grad = (last_time / static_cast<double>(last_input.cols())) * phi * score_difference.transpose();
  require_finite(grad, "generator gradient");
  return grad;
}

StageResult dmd_train(ChunkwiseStudent generator, const ScoreSource& real_score, ChunkwiseStudent fake_score,
                      const SequenceDistribution& dist, const TimestepGrid& grid, const TrainConfig& cfg,
                      std::uint64_t seed, const DmdOptions& options) {
  cfg.validate();
  grid.validate();
  if (generator.role() != Role::generator) throw DomainError("dmd_train: generator role required");
  if (fake_score.role() != Role::fake_score) throw DomainError("dmd_train: fake-score role required");
  if (!(generator.spec() == dist.spec) || !(fake_score.spec() == dist.spec))
    throw ShapeError("dmd_train: model and distribution specs differ");
  if (cfg.optimizer == Optimizer::ridge) throw DomainError("dmd_train needs an iterative optimizer");
  if (options.time_groups < 1 || options.time_groups > cfg.batch_size) throw DomainError("invalid time group count");
  const auto start = Clock::now();
  const SequenceSpec& spec = dist.spec;
  const Index chunks = spec.n_chunks();
  const Index B = cfg.batch_size;
  const Index G = options.time_groups;
  const ModelScore fake_src(fake_score);

  std::vector<RidgeAccumulator> fake_acc;
  for (Index c = 0; c < chunks; ++c) fake_acc.emplace_back(fake_score.head(c).spec().m, spec.chunk_dim());
  std::vector<Adam> adams(static_cast<std::size_t>(chunks));

  auto group_cols = [&](Index g) {
    const Index first = g * B / G;
    return std::pair<Index, Index>{first, (g + 1) * B / G - first};
  };

  std::vector<double> trace;
  for (int s = 0; s < cfg.step_count; ++s) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(s)));
    const Mat context = options.prefix_source == PrefixSource::data ? dist.mixture.sample(B, rng)
                                                                    : rollout(generator, grid, B, rng());
    double total = 0.0;
    for (Index c = 0; c < chunks; ++c) {
      const Mat prefixes = context.topRows(spec.prefix_dim(c));
      for (int r = 0; r < cfg.fake_update_ratio; ++r) {
        const Mat sample = few_step_sample(generator, c, grid, prefixes, rng());
        const Mat eps = standard_normal(spec.chunk_dim(), B, rng);
        const Vec t = uniform_times(B, cfg.t_min, cfg.t_max, rng);
        const Mat xt = sample * (1.0 - t.array()).matrix().asDiagonal() + eps * t.asDiagonal();
        auto& acc = fake_acc[static_cast<std::size_t>(c)];
        acc.decay(cfg.fake_memory);
        acc.add(fake_score.head(c).feature_map().features(xt, prefixes, t), eps - sample);
        fake_score.head(c).set_theta(acc.solve(cfg.ridge_lambda));
      }
      const FewStepOutput out = few_step_sample_traced(generator, c, grid, prefixes, rng());
      Mat diff(spec.chunk_dim(), B);
      for (Index g = 0; g < G; ++g) {
        const auto [first, n] = group_cols(g);
        const double t = uniform_times(1, cfg.t_min, cfg.t_max, rng)(0);
        const Mat xt = (1.0 - t) * out.sample.middleCols(first, n) + t * standard_normal(spec.chunk_dim(), n, rng);
        const Mat p = prefixes.middleCols(first, n);
        diff.middleCols(first, n) = real_score.score(c, p, xt, t) - fake_src.score(c, p, xt, t);
      }
      total += diff.squaredNorm() / static_cast<double>(B);
      const Mat grad = dmd_generator_gradient(generator.head(c), out.last_input, prefixes, out.last_time, diff);
      if (cfg.optimizer == Optimizer::adam)
        adams[static_cast<std::size_t>(c)].step(generator.head(c).theta(), grad, cfg.learning_rate);
      else
        sgd_step(generator.head(c).theta(), grad, cfg.learning_rate);
    }
    trace.push_back(total / static_cast<double>(chunks));
    check_loss(trace.back());
  }
  return StageResult{std::move(generator), std::move(fake_score), std::move(trace), seconds_since(start), seed, cfg};
}

// ---------------------------------------------------------------------------

StageResult cd_train(const SequenceDistribution& dist, const ArTeacher& ar_teacher, ChunkwiseStudent student,
                     const TrainConfig& cfg, TeacherKind kind, std::uint64_t seed) {
  cfg.validate();
  if (student.role() != Role::generator) throw DomainError("cd_train: generator role required");
  if (!(student.spec() == dist.spec)) throw ShapeError("cd_train: student and distribution specs differ");
  if (kind == TeacherKind::autoregressive && !(ar_teacher.spec() == dist.spec))
    throw ShapeError("cd_train: teacher and distribution specs differ");
  if (cfg.optimizer == Optimizer::ridge) throw DomainError("cd_train needs an iterative optimizer");
  const auto start = Clock::now();
  const SequenceSpec& spec = dist.spec;
  const Index chunks = spec.n_chunks();
  const Index B = cfg.batch_size;
  const Index G = std::min<Index>(8, B);
  const int M = cfg.cd_grid;

  ChunkwiseStudent target = student;
  std::vector<Adam> adams(static_cast<std::size_t>(chunks));
  const BatchField joint = [&dist](const Mat& x, double t) { return velocity_bi(dist, x, t); };

  std::vector<double> trace;
  for (int s = 0; s < cfg.step_count; ++s) {
    double total = 0.0;
    for (Index c = 0; c < chunks; ++c) {
      Rng rng(split_seed(split_seed(seed, static_cast<std::uint64_t>(s)), static_cast<std::uint64_t>(c)));
      const Mat x0 = dist.mixture.sample(B, rng);
      const Mat eps = standard_normal(spec.dim(), B, rng);
      const Index off = spec.chunk_offset(c), cd = spec.chunk_dim(), pd = spec.prefix_dim(c);
      std::uniform_int_distribution<int> pick(0, M - 1);
      const LinearStudent& head = student.head(c);
      Mat grad = Mat::Zero(head.spec().m, cd);
      double loss = 0.0;
      for (Index g = 0; g < G; ++g) {
        const Index first = g * B / G;
        const Index n = (g + 1) * B / G - first;
        const int k = pick(rng);
        const double hi = static_cast<double>(k + 1) / M;
        const double lo = static_cast<double>(k) / M;
        const Mat y = x0.block(0, first, pd, n);
        Mat x_hi, x_lo;
        if (kind == TeacherKind::autoregressive) {
          x_hi = (1.0 - hi) * x0.block(off, first, cd, n) + hi * eps.block(off, first, cd, n);
          x_lo = integrate(ar_teacher.bind(c, y), x_hi, hi, lo, 1, Solver::heun).endpoint;
        } else {
          const Mat full = (1.0 - hi) * x0.middleCols(first, n) + hi * eps.middleCols(first, n);
          x_hi = full.middleRows(off, cd);
          x_lo = integrate(joint, full, hi, lo, 1, Solver::heun).endpoint.middleRows(off, cd);
        }
        const Mat goal = target.generate(c, x_lo, y, lo);
        const Mat phi = head.feature_map().features(x_hi, y, hi);
        const Mat resid = x_hi - hi * (head.theta().transpose() * phi) - goal;
        loss += resid.squaredNorm();
        grad.noalias() -= (2.0 * hi) * phi * resid.transpose();
      }
      grad /= static_cast<double>(B);
      total += loss / static_cast<double>(B);
      if (cfg.optimizer == Optimizer::adam)
        adams[static_cast<std::size_t>(c)].step(student.head(c).theta(), grad, cfg.learning_rate);
      else
        sgd_step(student.head(c).theta(), grad, cfg.learning_rate);
      ema_update(target.head(c).theta(), student.head(c).theta(), cfg.ema_rate);
    }
    trace.push_back(total / static_cast<double>(chunks));
    check_loss(trace.back());
  }
  return StageResult{std::move(student), std::move(target), std::move(trace), seconds_since(start), seed, cfg};
}

}  // namespace arlab
