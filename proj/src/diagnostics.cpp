// SPDX-License-Identifier: Apache-2.0
#include "arlab/diagnostics.hpp"

#include "arlab/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace arlab {

namespace {

constexpr Index kMomentBlock = 4096;

std::vector<Index> range_indices(Index first, Index count) {
  std::vector<Index> out(static_cast<std::size_t>(count));
  std::iota(out.begin(), out.end(), first);
  return out;
}

Mat select_rows(const Mat& m, const std::vector<Index>& idx) {
  Mat out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = m.row(idx[i]);
  return out;
}

Mat select_block(const Mat& m, const std::vector<Index>& rows, const std::vector<Index>& cols) {
  Mat out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(static_cast<Index>(i), static_cast<Index>(j)) = m(rows[i], cols[j]);
  return out;
}

std::vector<Index> complement(Index dim, const std::vector<Index>& idx) {
  std::vector<bool> used(static_cast<std::size_t>(dim), false);
  for (Index i : idx) used[static_cast<std::size_t>(i)] = true;
  std::vector<Index> out;
  for (Index i = 0; i < dim; ++i)
    if (!used[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

const GaussianComponent& single_component(const SequenceDistribution& dist, const char* who) {
  if (dist.mixture.size() != 1) throw DomainError(std::string(who) + " needs a single-Gaussian distribution");
  return dist.mixture.component(0);
}

Mat noisy_covariance(const Mat& sigma, double t) {
  return (1.0 - t) * (1.0 - t) * sigma + t * t * Mat::Identity(sigma.rows(), sigma.cols());
}

Mat spd_inverse(const Mat& m, const char* what) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw SingularError(std::string(what) + " is not positive definite");
  return llt.solve(Mat::Identity(m.rows(), m.cols()));
}

// Sum over all ordered pairs (i, j) of |a_i - b_j| for scalar samples.
double pair_sum_1d(const Vec& a, const Vec& b) {
  std::vector<double> sb(b.data(), b.data() + b.size());
  std::sort(sb.begin(), sb.end());
  std::vector<double> prefix(sb.size() + 1, 0.0);
  for (std::size_t j = 0; j < sb.size(); ++j) prefix[j + 1] = prefix[j] + sb[j];
  const double total = prefix.back();
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double x = a(i);
    const auto k = static_cast<std::size_t>(std::lower_bound(sb.begin(), sb.end(), x) - sb.begin());
    const double below = static_cast<double>(k) * x - prefix[k];
    const double above = (total - prefix[k]) - static_cast<double>(sb.size() - k) * x;
    s += below + above;
  }
  return s;
}

double pair_sum(const Mat& a, const Mat& b) {
  if (a.rows() == 1) return pair_sum_1d(a.row(0).transpose(), b.row(0).transpose());
  double s = 0.0;
  for (Index i = 0; i < a.cols(); ++i) s += (b.colwise() - a.col(i)).colwise().norm().sum();
  return s;
}

bool lexicographically_less(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) return a.cols() < b.cols();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

}  // namespace

Estimate mean_estimate(const Vec& values) {
  Estimate e;
  e.n = values.size();
  if (e.n == 0) return e;
  e.value = values.mean();
  if (e.n > 1) {
    const double var = (values.array() - e.value).square().sum() / static_cast<double>(e.n - 1);
    e.se = std::sqrt(var / static_cast<double>(e.n));
  }
  return e;
}

// ---------------------------------------------------------------------------

double energy_distance(const Mat& a, const Mat& b) {
  require_shape(a.rows() == b.rows(), "energy_distance: dimension mismatch");
  if (a.cols() == 0 || b.cols() == 0) throw DomainError("energy_distance: empty sample");
  const Mat& x = lexicographically_less(b, a) ? b : a;
  const Mat& y = &x == &a ? b : a;
  const double nx = static_cast<double>(x.cols());
  const double ny = static_cast<double>(y.cols());
  const double cross = pair_sum(x, y) / (nx * ny);
  const double within_x = pair_sum(x, x) / (nx * nx);
  const double within_y = pair_sum(y, y) / (ny * ny);
  return std::max(0.0, 2.0 * cross - within_x - within_y);
}

double gaussian_kl(const Vec& mp, const Mat& cp, const Vec& mq, const Mat& cq) {
  const Index k = mp.size();
  require_shape(mq.size() == k && cp.rows() == k && cp.cols() == k && cq.rows() == k && cq.cols() == k,
                "gaussian_kl: dimension mismatch");
  Eigen::LLT<Mat> lp(cp), lq(cq);
  if (lp.info() != Eigen::Success || lq.info() != Eigen::Success)
    throw SingularError("gaussian_kl: covariance is not positive definite");
  const Vec d = mq - mp;
  const double logdet_p = 2.0 * Mat(lp.matrixL()).diagonal().array().log().sum();
  const double logdet_q = 2.0 * Mat(lq.matrixL()).diagonal().array().log().sum();
  const double trace = lq.solve(cp).trace();
  const double quad = d.dot(lq.solve(d));
  return 0.5 * (trace + quad - static_cast<double>(k) + logdet_q - logdet_p);
}

Estimate motion_variability(const Mat& sequences, const SequenceSpec& spec) {
  if (spec.n_frames < 2) throw DomainError("motion_variability needs at least two frames");
  require_shape(sequences.rows() == spec.dim(), "motion_variability: dimension mismatch");
  const Index d = spec.frame_dim;
  Vec per(sequences.cols());
  for (Index j = 0; j < sequences.cols(); ++j) {
    double s = 0.0;
    for (Index f = 0; f + 1 < spec.n_frames; ++f)
      s += (sequences.col(j).segment((f + 1) * d, d) - sequences.col(j).segment(f * d, d)).squaredNorm();
    per(j) = s / static_cast<double>(spec.n_frames - 1);
  }
  return mean_estimate(per);
}

// ---------------------------------------------------------------------------

Mat gaussian_flow_matrix(const Mat& covariance, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("flow matrix: t must lie in (0, 1]");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (covariance + covariance.transpose()));
  Vec g(covariance.rows());
  for (Index i = 0; i < g.size(); ++i) {
    const double lam = std::max(0.0, es.eigenvalues()(i));
    g(i) = std::sqrt(lam) / std::sqrt((1.0 - t) * (1.0 - t) * lam + t * t);
  }
  return es.eigenvectors() * g.asDiagonal() * es.eigenvectors().transpose();
}

InjectivityResult injectivity_variance(const SequenceDistribution& dist, Index chunk_u, double t, Index n_anchor,
                                       Index n_resample, int steps, std::uint64_t seed) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("injectivity_variance: t must lie in (0, 1]");
  if (n_anchor < 2 || n_resample < 2) throw DomainError("injectivity_variance: need >= 2 anchors and resamples");
  const std::vector<Index> u = chunk_indices(dist.spec, chunk_u);
  const std::vector<Index> z = complement(dist.spec.dim(), u);
  if (z.empty()) throw DomainError("injectivity_variance: no complementary coordinates to resample");

  const GaussianMixture noisy = dist.mixture.noised(t);
  const LinearConditioner cond(noisy, z, u, 1.0, 0.0);
  Rng rng(seed);
  const Mat anchors = noisy.sample(n_anchor, rng);

  InjectivityResult out;
  out.anchor_variance.resize(n_anchor);
  out.anchor_se.resize(n_anchor);
  parallel_for(static_cast<std::size_t>(n_anchor), [&](std::size_t a) {
    const Index ai = static_cast<Index>(a);
    Rng local(split_seed(seed, a + 1));
    const Vec fixed = select_rows(anchors.col(ai), u).col(0);
    const Mat draws = cond.bind(fixed).sample(n_resample, local);
    Mat x(dist.spec.dim(), n_resample);
    for (std::size_t i = 0; i < u.size(); ++i) x.row(u[i]).setConstant(fixed(static_cast<Index>(i)));
    for (std::size_t i = 0; i < z.size(); ++i) x.row(z[i]) = draws.row(static_cast<Index>(i));
    const Mat end = select_rows(flow_map_bi(dist, x, t, steps), u);
    const Vec mean = end.rowwise().mean();
    const Vec dev = (end.colwise() - mean).colwise().squaredNorm().transpose();
    const double n = static_cast<double>(n_resample);
    const double var = dev.sum() / (n - 1.0);
    const double sd_dev = std::sqrt((dev.array() - dev.mean()).square().sum() / (n - 1.0));
    out.anchor_variance(ai) = var;
    out.anchor_se(ai) = sd_dev / std::sqrt(n);
  });
  out.mean_variance = mean_estimate(out.anchor_variance);
  Index positive = 0;
  for (Index a = 0; a < n_anchor; ++a)
    if (out.anchor_variance(a) > std::max(out.threshold_factor * out.anchor_se(a), 1e-12)) ++positive;
  out.positive_fraction = static_cast<double>(positive) / static_cast<double>(n_anchor);
  return out;
}

double injectivity_variance_exact(const SequenceDistribution& dist, Index chunk_u, double t) {
  const GaussianComponent& c = single_component(dist, "injectivity_variance_exact");
  const std::vector<Index> u = chunk_indices(dist.spec, chunk_u);
  const std::vector<Index> z = complement(dist.spec.dim(), u);
  if (z.empty()) throw DomainError("injectivity_variance_exact: no complementary coordinates");
  const Mat m = gaussian_flow_matrix(c.covariance(), t);
  const Mat ct = noisy_covariance(c.covariance(), t);
  const Mat czz = select_block(ct, z, z), czu = select_block(ct, z, u), cuu = select_block(ct, u, u);
  const Mat cond = czz - czu * spd_inverse(cuu, "noisy observed covariance") * czu.transpose();
  const Mat muz = select_block(m, u, z);
  return (muz * cond * muz.transpose()).trace();
}

// ---------------------------------------------------------------------------

CollapseResult collapse_gap(const ChunkGenerator& generator, const SequenceDistribution& dist,
                            const ArTeacher& oracle, const CollapseOptions& options) {
  const SequenceSpec& spec = dist.spec;
  if (!(generator.spec() == spec)) throw ShapeError("collapse_gap: generator spec differs from the distribution");
  if (options.times.empty() || options.n_anchor < 1 || options.n_moment < 2 || options.n_resample < 1)
    throw DomainError("collapse_gap: empty evaluation design");
  const Index chunks = spec.n_chunks();
  const Index T = static_cast<Index>(options.times.size());
  const Index cd = spec.chunk_dim();

  CollapseResult out;
  double sq = 0.0;
  Index sq_count = 0;
  std::vector<double> chunk_sum(static_cast<std::size_t>(chunks), 0.0), chunk_var(static_cast<std::size_t>(chunks), 0.0);
  double gen_moment = 0.0;

  for (Index c = 0; c < chunks; ++c) {
    const Index off = spec.chunk_offset(c), pd = spec.prefix_dim(c);
    const double data_c = dist.mixture.marginal(chunk_indices(spec, c)).second_moment();
    out.data_moment += data_c;
    for (Index ti = 0; ti < T; ++ti) {
      const double t = options.times[static_cast<std::size_t>(ti)];
      if (!(t > 0.0 && t <= 1.0)) throw DomainError("collapse_gap: times must lie in (0, 1]");
      Rng rng(split_seed(options.seed, static_cast<std::uint64_t>(c * T + ti)));

      // Generator inputs x^i and its conditioning prefix for n fresh draws.
      auto inputs = [&](Index n, Mat& x, Mat& prefix, Mat& xt_full, Mat& x0) {
        x0 = dist.mixture.sample(n, rng);
        const Mat eps = standard_normal(spec.dim(), n, rng);
        xt_full = (1.0 - t) * x0 + t * eps;
        x = xt_full.middleRows(off, cd);
        prefix = options.mode == PrefixMode::noisy ? Mat(xt_full.topRows(pd)) : Mat(x0.topRows(pd));
      };

      Mat x, prefix, xt_full, x0;
      inputs(options.n_anchor, x, prefix, xt_full, x0);
      const Mat produced = generator.generate(c, x, prefix, t);
      Mat target(cd, options.n_anchor);
      if (options.mode == PrefixMode::clean) {
        target = flow_map_ar(oracle, c, prefix, x, t, options.steps);
      } else {
        const std::vector<Index> seen = range_indices(0, off + cd);
        const std::vector<Index> hidden = complement(spec.dim(), seen);
        if (hidden.empty()) {
          target = flow_map_bi(dist, xt_full, t, options.steps).middleRows(off, cd);
        } else {
          const LinearConditioner cond(dist.mixture.noised(t), hidden, seen, 1.0, 0.0);
          const std::uint64_t base = rng();
          parallel_for(static_cast<std::size_t>(options.n_anchor), [&](std::size_t a) {
            const Index ai = static_cast<Index>(a);
            Rng local(split_seed(base, a));
            const Vec fixed = xt_full.col(ai).head(off + cd);
            const Mat draws = cond.bind(fixed).sample(options.n_resample, local);
            Mat full(spec.dim(), options.n_resample);
            full.topRows(off + cd) = fixed.replicate(1, options.n_resample);
            full.bottomRows(static_cast<Index>(hidden.size())) = draws;
            target.col(ai) = flow_map_bi(dist, full, t, options.steps).middleRows(off, cd).rowwise().mean();
          });
        }
      }
      sq += (produced - target).squaredNorm();
      sq_count += produced.size();

      Vec norms(options.n_moment);
      for (Index first = 0; first < options.n_moment; first += kMomentBlock) {
        const Index n = std::min(kMomentBlock, options.n_moment - first);
        inputs(n, x, prefix, xt_full, x0);
        norms.segment(first, n) = generator.generate(c, x, prefix, t).colwise().squaredNorm().transpose();
      }
      const Estimate e = mean_estimate(norms);
      chunk_sum[static_cast<std::size_t>(c)] += data_c - e.value;
      chunk_var[static_cast<std::size_t>(c)] += e.se * e.se;
      gen_moment += e.value;
    }
  }
  out.rms = std::sqrt(sq / static_cast<double>(sq_count));
  out.rms_samples = sq_count;
  const double Td = static_cast<double>(T);
  double total = 0.0, total_var = 0.0;
  for (Index c = 0; c < chunks; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    out.chunk_deficit.push_back(Estimate{chunk_sum[ci] / Td, std::sqrt(chunk_var[ci]) / Td, options.n_moment * T});
    total += chunk_sum[ci];
    total_var += chunk_var[ci];
  }
  out.deficit = Estimate{total / Td, std::sqrt(total_var) / Td, options.n_moment * T * chunks};
  out.generator_moment = gen_moment / Td;
  return out;
}

double collapse_deficit_exact(const SequenceDistribution& dist, const std::vector<double>& times) {
  const GaussianComponent& comp = single_component(dist, "collapse_deficit_exact");
  const SequenceSpec& spec = dist.spec;
  double total = 0.0;
  for (double t : times) {
    const Mat m = gaussian_flow_matrix(comp.covariance(), t);
    const Mat ct = noisy_covariance(comp.covariance(), t);
    for (Index c = 0; c < spec.n_chunks(); ++c) {
      const std::vector<Index> seen = range_indices(0, spec.chunk_offset(c) + spec.chunk_dim());
      const std::vector<Index> hidden = complement(spec.dim(), seen);
      if (hidden.empty()) continue;
      const Mat chh = select_block(ct, hidden, hidden), chs = select_block(ct, hidden, seen);
      const Mat cond = chh - chs * spd_inverse(select_block(ct, seen, seen), "noisy observed covariance") * chs.transpose();
      const Mat mch = select_block(m, chunk_indices(spec, c), hidden);
      total += (mch * cond * mch.transpose()).trace();
    }
  }
  return total / static_cast<double>(times.size());
}

// ---------------------------------------------------------------------------

Estimate df_mismatch(const SequenceDistribution& dist, Index chunk, double t, Index n, std::uint64_t seed) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("df_mismatch: t must lie in [0, 1]");
  if (n < 1) throw DomainError("df_mismatch: n must be >= 1");
  const SequenceSpec& spec = dist.spec;
  if (chunk == 0) return Estimate{0.0, 0.0, n};
  const auto target = chunk_indices(spec, chunk);
  const auto prefix = prefix_indices(spec, chunk);
  const LinearConditioner noisy(dist.mixture, target, prefix, 1.0 - t, t);
  const LinearConditioner clean(dist.mixture, target, prefix, 1.0, 0.0);
  Rng rng(seed);
  const Mat ys = dist.mixture.sample(n, rng).topRows(spec.prefix_dim(chunk));
  Vec kl(n);
  for (Index j = 0; j < n; ++j) {
    const Vec y = ys.col(j);
    const GaussianMixture p = noisy.bind(y);
    const GaussianMixture q = clean.bind(y);
    if (p.size() == 1 && q.size() == 1) {
      kl(j) = gaussian_kl(p.component(0).mean(), p.component(0).covariance(), q.component(0).mean(),
                          q.component(0).covariance());
    } else {
      const Mat xs = p.sample(256, rng);
      double s = 0.0;
      for (Index k = 0; k < xs.cols(); ++k) s += p.log_density(xs.col(k)) - q.log_density(xs.col(k));
      kl(j) = s / static_cast<double>(xs.cols());
    }
  }
  return mean_estimate(kl);
}

double df_mismatch_exact(const SequenceDistribution& dist, Index chunk, double t) {
  const GaussianComponent& comp = single_component(dist, "df_mismatch_exact");
  if (chunk == 0) return 0.0;
  const auto b = chunk_indices(dist.spec, chunk);
  const auto a = prefix_indices(dist.spec, chunk);
  const Mat& s = comp.covariance();
  const Mat saa = select_block(s, a, a), sba = select_block(s, b, a), sbb = select_block(s, b, b);
  const Vec mu_a = select_rows(comp.mean(), a).col(0);
  const double al = 1.0 - t;
  const Mat k1 = al * sba * spd_inverse(al * al * saa + t * t * Mat::Identity(saa.rows(), saa.cols()), "noisy prefix covariance");
  const Mat s1 = sbb - al * k1 * sba.transpose();
  const Mat k2 = sba * spd_inverse(saa, "prefix covariance");
  const Mat s2 = sbb - k2 * sba.transpose();
  const Mat s2inv = spd_inverse(s2, "clean conditional covariance");
  const Mat diff = k2 - k1;
  const Vec mean_gap = -t * k1 * mu_a;
  const double k = static_cast<double>(b.size());
  const double logdet = std::log(s2.determinant()) - std::log(s1.determinant());
  return 0.5 * ((s2inv * s1).trace() + (s2inv * diff * saa * diff.transpose()).trace() +
                mean_gap.dot(s2inv * mean_gap) - k + logdet);
}

GaussianLaw implied_conditional(const ArTeacher& model, Index chunk, const Vec& prefix, double t, const Vec& center,
                                double spread, Index n_probe, std::uint64_t seed) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("implied_conditional: t must lie in (0, 1)");
  const Index cd = model.spec().chunk_dim();
  require_shape(center.size() == cd, "implied_conditional: center dimension mismatch");
  if (n_probe < cd + 1) throw DomainError("implied_conditional: too few probes for an affine fit");
  Rng rng(seed);
  const Mat x = (spread * standard_normal(cd, n_probe, rng)).colwise() + center;
  const Mat prefixes = prefix.replicate(1, n_probe);
  const Mat den = x - t * model.bind(chunk, prefixes)(x, t);
  Mat design(cd + 1, n_probe);
  design.row(0).setOnes();
  design.bottomRows(cd) = x;
  const Mat coef = (design * design.transpose()).ldlt().solve(design * den.transpose()).transpose();
  const Vec a = coef.col(0);
  const Mat B = coef.rightCols(cd);
  const Mat r = Mat::Identity(cd, cd) - (1.0 - t) * B;
  const Eigen::FullPivLU<Mat> lu(r);
  if (!lu.isInvertible()) throw SingularError("implied_conditional: denoiser slope is degenerate");
  GaussianLaw law;
  law.mean = lu.solve(a);
  const Mat c = lu.solve(B) * (t * t / (1.0 - t));
  law.cov = 0.5 * (c + c.transpose());
  return law;
}

Estimate model_conditional_kl(const ArTeacher& model, const SequenceDistribution& dist, Index chunk, double t_lo,
                              double t_hi, Index n, std::uint64_t seed, double prefix_radius) {
  if (!(0.0 < t_lo && t_lo <= t_hi && t_hi < 1.0)) throw DomainError("model_conditional_kl: need 0 < t_lo <= t_hi < 1");
  if (!(prefix_radius > 1.0)) throw DomainError("model_conditional_kl: prefix_radius must exceed 1");
  if (n < 1) throw DomainError("model_conditional_kl: n must be >= 1");
  const SequenceSpec& spec = dist.spec;
  const Index pd = spec.prefix_dim(chunk);
  const Vec center = dist.mixture.mean().head(pd);
  const Vec sd = dist.mixture.covariance().diagonal().head(pd).cwiseSqrt();
  Rng rng(seed);
  std::uniform_real_distribution<double> u(t_lo, t_hi);
  Vec kl(n);
  for (Index j = 0; j < n; ++j) {
    Vec y;
    do {
      y = dist.mixture.sample(1, rng).col(0).head(pd);
    } while (pd > 0 && ((y - center).array() / sd.array()).abs().maxCoeff() > prefix_radius);
    const double t = u(rng);
    const SequenceDistribution truth = conditional_clean_dist(dist, chunk, y);
    const Vec mean = truth.mixture.mean();
    const Mat cov = truth.mixture.covariance();
    const double spread =
        std::sqrt((1.0 - t) * (1.0 - t) * cov.trace() / static_cast<double>(cov.rows()) + t * t);
    const GaussianLaw law = implied_conditional(model, chunk, y, t, (1.0 - t) * mean, spread, 64, rng());
    kl(j) = gaussian_kl(law.mean, law.cov, mean, cov);
  }
  return mean_estimate(kl);
}

// ---------------------------------------------------------------------------

Estimate conditional_energy_distance(const ChunkGenerator& generator, const SequenceDistribution& dist,
                                     const TimestepGrid& grid, Index n_prefix, Index n_sample, std::uint64_t seed) {
  if (n_prefix < 1 || n_sample < 1) throw DomainError("conditional_energy_distance: empty design");
  const SequenceSpec& spec = dist.spec;
  const Index chunks = spec.n_chunks();
  Vec values(chunks * n_prefix);
  parallel_for(static_cast<std::size_t>(values.size()), [&](std::size_t item) {
    const Index c = static_cast<Index>(item) / n_prefix;
    Rng rng(split_seed(seed, item));
    const Vec y = dist.mixture.sample(1, rng).col(0).head(spec.prefix_dim(c));
    const Mat produced = few_step_sample(generator, c, grid, y.replicate(1, n_sample), rng());
    const Mat reference = conditional_clean_dist(dist, c, y).mixture.sample(n_sample, rng);
    values(static_cast<Index>(item)) = energy_distance(produced, reference);
  });
  return mean_estimate(values);
}

Estimate consistency_gap(const ChunkwiseStudent& student, const ArTeacher& teacher, const SequenceDistribution& dist,
                         int grid_size, Index n, std::uint64_t seed) {
  if (grid_size < 2 || n < 1) throw DomainError("consistency_gap: invalid design");
  const SequenceSpec& spec = dist.spec;
  const Index per = std::max<Index>(1, n / grid_size);
  std::vector<double> values;
  Rng rng(seed);
  for (Index c = 0; c < spec.n_chunks(); ++c) {
    const Index off = spec.chunk_offset(c), cd = spec.chunk_dim(), pd = spec.prefix_dim(c);
    for (int k = 0; k < grid_size; ++k) {
      const double hi = static_cast<double>(k + 1) / grid_size, lo = static_cast<double>(k) / grid_size;
      const Mat x0 = dist.mixture.sample(per, rng);
      const Mat eps = standard_normal(cd, per, rng);
      const Mat y = x0.topRows(pd);
      const Mat x_hi = (1.0 - hi) * x0.middleRows(off, cd) + hi * eps;
      const Mat x_lo = integrate(teacher.bind(c, y), x_hi, hi, lo, 1, Solver::heun).endpoint;
      const Mat gap = student.generate(c, x_hi, y, hi) - student.generate(c, x_lo, y, lo);
      for (Index j = 0; j < per; ++j) values.push_back(gap.col(j).squaredNorm() / static_cast<double>(cd));
    }
  }
  const Estimate ms = mean_estimate(Eigen::Map<const Vec>(values.data(), static_cast<Index>(values.size())));
  const double rms = std::sqrt(ms.value);
  return Estimate{rms, rms > 0.0 ? ms.se / (2.0 * rms) : 0.0, ms.n};
}

// ---------------------------------------------------------------------------

void DiagnosticsReport::add(const std::string& name, Metric metric) {
  if (!std::isfinite(metric.value) || !std::isfinite(metric.uncertainty))
    throw NumericalError("metric '" + name + "' is not finite");
  metrics_[name] = std::move(metric);
}

void DiagnosticsReport::add(const std::string& name, const Estimate& e, const std::string& digest,
                            const std::string& note) {
  add(name, Metric{e.value, e.se, e.n, digest, note});
}

const Metric& DiagnosticsReport::at(const std::string& name) const {
  const auto it = metrics_.find(name);
  if (it == metrics_.end()) throw DomainError("no metric named '" + name + "'");
  return it->second;
}

}  // namespace arlab
