// SPDX-License-Identifier: Apache-2.0
#include "arlab/distribution.hpp"

#include <doctest.h>

#include <cmath>

using namespace arlab;

namespace {

SequenceDistribution scalar_normal() { return standard_normal_dist(SequenceSpec{1, 1, 1}); }

// Symmetric mixture of narrow components at -1 and +1.
SequenceDistribution two_points(double var) {
  const Mat cov = Mat::Constant(1, 1, var);
  return SequenceDistribution(SequenceSpec{1, 1, 1},
                              GaussianMixture({GaussianComponent(0.5, Vec::Constant(1, -1.0), cov),
                                               GaussianComponent(0.5, Vec::Constant(1, 1.0), cov)}));
}

// Three-component mixture over two frames with unequal weights and correlation.
SequenceDistribution skewed_mixture() {
  Mat c1(2, 2), c2(2, 2), c3(2, 2);
  c1 << 1.0, 0.5, 0.5, 0.8;
  c2 << 0.3, -0.1, -0.1, 0.6;
  c3 << 0.5, 0.0, 0.0, 0.2;
  Vec m1(2), m2(2), m3(2);
  m1 << 1.0, -0.5;
  m2 << -1.5, 1.0;
  m3 << 0.2, 2.0;
  return SequenceDistribution(SequenceSpec{2, 1, 1},
                              GaussianMixture({GaussianComponent(0.5, m1, c1), GaussianComponent(0.3, m2, c2),
                                               GaussianComponent(0.2, m3, c3)}));
}

double gaussian_logpdf(const Vec& x, const Vec& mu, const Mat& cov) {
  const Eigen::LLT<Mat> llt(cov);
  const Vec r = llt.matrixL().solve(x - mu);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * r.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * M_PI);
}

}  // namespace

TEST_CASE("schedule endpoints") {
  CHECK(NoiseSchedule::alpha(0.0) == 1.0);
  CHECK(NoiseSchedule::sigma(0.0) == 0.0);
  CHECK(NoiseSchedule::alpha(1.0) == 0.0);
  CHECK(NoiseSchedule::sigma(1.0) == 1.0);
  for (double t = 0.0; t <= 1.0; t += 0.125) CHECK(NoiseSchedule::alpha(t) + NoiseSchedule::sigma(t) == 1.0);
}

TEST_CASE("sequence spec validation") {
  CHECK_NOTHROW((SequenceSpec{6, 2, 3}.validate()));
  CHECK_THROWS_AS((SequenceSpec{6, 1, 4}.validate()), DomainError);
  CHECK_THROWS_AS((SequenceSpec{0, 1, 1}.validate()), DomainError);
  CHECK_THROWS_AS((SequenceSpec{2, 0, 1}.validate()), DomainError);
  const SequenceSpec s{6, 2, 3};
  CHECK(s.n_chunks() == 2);
  CHECK(s.chunk_dim() == 6);
  CHECK(chunk_indices(s, 1) == std::vector<Index>{6, 7, 8, 9, 10, 11});
  CHECK(prefix_indices(s, 1).size() == 6);
  CHECK(prefix_indices(s, 0).empty());
}

TEST_CASE("component construction checks") {
  Mat asym(2, 2);
  asym << 1.0, 0.5, 0.4, 1.0;
  CHECK_THROWS_AS(GaussianComponent(1.0, Vec::Zero(2), asym), DomainError);
  Mat neg(2, 2);
  neg << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_AS(GaussianComponent(1.0, Vec::Zero(2), neg), DomainError);
  Mat tiny = Mat::Zero(2, 2);
  tiny(0, 0) = 1.0;
  tiny(1, 1) = -1e-13;
  GaussianComponent c(1.0, Vec::Zero(2), tiny);
  CHECK(c.eigenvalues().minCoeff() == 0.0);
  CHECK_THROWS_AS(GaussianMixture({GaussianComponent(0.5, Vec::Zero(1), Mat::Identity(1, 1))}), DomainError);
}

TEST_CASE("sample_clean") {
  SUBCASE("standard normal mean") {
    const Mat x = sample_clean(standard_normal_dist(SequenceSpec{3, 1, 1}), 10000, 7);
    for (Index i = 0; i < 3; ++i) CHECK(std::abs(x.row(i).mean()) < 4.0 / std::sqrt(10000.0));
  }
  SUBCASE("zero covariance returns the mean") {
    Vec mu(2);
    mu << 0.25, -1.5;
    SequenceDistribution d(SequenceSpec{2, 1, 1}, GaussianMixture({GaussianComponent(1.0, mu, Mat::Zero(2, 2))}));
    const Mat x = sample_clean(d, 50, 3);
    for (Index j = 0; j < x.cols(); ++j) CHECK((x.col(j) - mu).norm() == 0.0);
  }
  SUBCASE("two modes at +-3 are equally populated") {
    const Index n = 10000;
    const Mat x = sample_clean(two_mode_mixture(3.0, 0.25), n, 11);
    const double frac = static_cast<double>((x.array() > 0.0).count()) / static_cast<double>(n);
    const double se = std::sqrt(0.25 / static_cast<double>(n));
    CHECK(std::abs(frac - 0.5) < 0.02);
    CHECK(std::abs(frac - 0.5) < 4.0 * se);
  }
  SUBCASE("deterministic in the seed") {
    const auto d = skewed_mixture();
    CHECK(sample_clean(d, 20, 5) == sample_clean(d, 20, 5));
    CHECK(sample_clean(d, 20, 5) != sample_clean(d, 20, 6));
  }
}

TEST_CASE("forward_noise") {
  Vec x0(2), eps(2);
  x0 << 2.0, -1.0;
  eps << 0.3, 0.7;
  CHECK(forward_noise(x0, 0.0, eps).values == x0);
  CHECK(forward_noise(x0, 1.0, eps).values == eps);
  CHECK(forward_noise(Vec::Constant(1, 2.0), 0.25, Vec::Zero(1)).values(0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK_THROWS_AS(forward_noise(x0, 0.5, Vec::Zero(3)), ShapeError);
  CHECK_THROWS_AS(forward_noise(x0, 1.5, eps), DomainError);
}

TEST_CASE("joint posterior mean") {
  const auto d = scalar_normal();
  auto coef = [](double t) { return (1.0 - t) / ((1.0 - t) * (1.0 - t) + t * t); };
  CHECK(joint_posterior_mean(d, NoisyState{Vec::Constant(1, 1.0), 0.5})(0) == doctest::Approx(coef(0.5)));
  CHECK(joint_posterior_mean(d, NoisyState{Vec::Constant(1, 1.0), 0.25})(0) == doctest::Approx(coef(0.25)));
  CHECK(coef(0.25) == doctest::Approx(1.2));
  for (double t : {0.1, 0.5, 0.9}) CHECK(std::abs(joint_posterior_mean(two_points(1e-6), NoisyState{Vec::Zero(1), t})(0)) < 1e-14);
  SequenceDistribution point(SequenceSpec{1, 1, 1}, GaussianMixture({GaussianComponent(1.0, Vec::Zero(1), Mat::Zero(1, 1))}));
  CHECK_THROWS_AS(joint_posterior_mean(point, NoisyState{Vec::Zero(1), 0.0}), SingularError);
}

TEST_CASE("exact score") {
  const auto d = scalar_normal();
  CHECK(exact_score(d, NoisyState{Vec::Constant(1, 1.0), 1.0})(0) == doctest::Approx(-1.0));
  CHECK(std::abs(exact_score(two_points(0.1), NoisyState{Vec::Zero(1), 0.4})(0)) < 1e-14);

  SUBCASE("finite-difference agreement") {
    const auto m = skewed_mixture();
    for (double t : {0.2, 0.5, 0.8}) {
      const GaussianMixture pt = m.mixture.noised(t);
      Rng rng(3);
      for (int rep = 0; rep < 10; ++rep) {
        const Vec x = standard_normal(2, 1, rng);
        const Vec s = exact_score(m, NoisyState{x, t});
        Vec fd(2);
        for (Index i = 0; i < 2; ++i) {
          Vec xp = x, xm = x;
          xp(i) += 1e-5;
          xm(i) -= 1e-5;
          fd(i) = (pt.log_density(xp) - pt.log_density(xm)) / 2e-5;
        }
        CHECK((s - fd).norm() <= 1e-6 * s.norm());
      }
    }
  }

  SUBCASE("Tweedie identity") {
    const auto m = skewed_mixture();
    Rng rng(9);
    for (double t : {0.1, 0.3, 0.6, 0.95}) {
      const Mat x = 2.0 * standard_normal(2, 20, rng);
      const Mat s = exact_score(m, x, t);
      const Mat tw = ((1.0 - t) * joint_posterior_mean(m, x, t) - x) / (t * t);
      for (Index j = 0; j < x.cols(); ++j) CHECK((s.col(j) - tw.col(j)).norm() <= 1e-10 * s.col(j).norm() + 1e-14);
    }
  }

  SUBCASE("log density matches a direct evaluation") {
    const auto m = skewed_mixture();
    Vec x(2);
    x << 0.3, 0.9;
    double p = 0.0;
    for (const auto& c : m.mixture.components()) p += c.weight() * std::exp(gaussian_logpdf(x, c.mean(), c.covariance()));
    CHECK(m.mixture.log_density(x) == doctest::Approx(std::log(p)).epsilon(1e-12));
  }
}

TEST_CASE("clean conditional") {
  SUBCASE("bivariate rho = 0.8") {
    const auto c = conditional_clean_dist(bivariate_gaussian(0.8), 1, Vec::Constant(1, 1.0));
    CHECK(c.mixture.mean()(0) == doctest::Approx(0.8 * 1.0));
    CHECK(c.mixture.covariance()(0, 0) == doctest::Approx(1.0 - 0.8 * 0.8));
  }
  SUBCASE("independent frames ignore the prefix") {
    const auto d = standard_normal_dist(SequenceSpec{4, 2, 2});
    const auto c = conditional_clean_dist(d, 1, Vec::Constant(4, 3.0));
    CHECK(c.mixture.mean().norm() < 1e-15);
    CHECK((c.mixture.covariance() - Mat::Identity(4, 4)).norm() < 1e-15);
  }
  SUBCASE("first chunk is the marginal") {
    const auto m = skewed_mixture();
    const auto c = conditional_clean_dist(m, 0, Vec());
    CHECK(c.mixture.mean()(0) == doctest::Approx(m.mixture.mean()(0)));
    CHECK(c.mixture.covariance()(0, 0) == doctest::Approx(m.mixture.covariance()(0, 0)));
  }
  SUBCASE("singular prefix covariance is reported") {
    Mat cov(2, 2);
    cov << 0.0, 0.0, 0.0, 1.0;
    SequenceDistribution d(SequenceSpec{2, 1, 1}, GaussianMixture({GaussianComponent(1.0, Vec::Zero(2), cov)}));
    CHECK_THROWS_AS(conditional_clean_dist(d, 1, Vec::Zero(1)), SingularError);
  }
  SUBCASE("averaging over prefixes recovers the chunk marginal") {
    const auto m = skewed_mixture();
    const Index n = 4000;
    const Mat prefixes = sample_clean(m, n, 21);
    Rng rng(22);
    Vec draws(n);
    for (Index j = 0; j < n; ++j) draws(j) = conditional_clean_dist(m, 1, prefixes.col(j).head(1)).mixture.sample(1, rng)(0);
    const double mean = draws.mean();
    const double var = (draws.array() - mean).square().mean();
    const double se_mean = std::sqrt(var / static_cast<double>(n));
    const double target_mean = m.mixture.mean()(1);
    const double target_var = m.mixture.covariance()(1, 1);
    CHECK(std::abs(mean - target_mean) < 3.0 * se_mean);
    const double fourth = (draws.array() - mean).pow(4).mean();
    CHECK(std::abs(var - target_var) < 3.0 * std::sqrt((fourth - var * var) / static_cast<double>(n)));
  }
}

TEST_CASE("noisy-prefix conditional") {
  const auto d = bivariate_gaussian(0.8);
  SUBCASE("t = 0.5 Gaussian oracle") {
    const double a = 0.5, s = 0.5, rho = 0.8;
    const auto c = df_conditional_dist(d, 1, NoisyState{Vec::Constant(1, 1.0), 0.5});
    CHECK(c.mixture.mean()(0) == doctest::Approx(a * rho / (a * a + s * s) * 1.0));
    CHECK(c.mixture.covariance()(0, 0) == doctest::Approx(1.0 - a * a * rho * rho / (a * a + s * s)));
  }
  SUBCASE("t = 0 equals the clean conditional") {
    const auto m = skewed_mixture();
    const Vec y = Vec::Constant(1, 0.7);
    const auto a = df_conditional_dist(m, 1, NoisyState{y, 0.0});
    const auto b = conditional_clean_dist(m, 1, y);
    CHECK(a.mixture.mean()(0) == doctest::Approx(b.mixture.mean()(0)).epsilon(1e-12));
    CHECK(a.mixture.covariance()(0, 0) == doctest::Approx(b.mixture.covariance()(0, 0)).epsilon(1e-12));
  }
  SUBCASE("t = 1 is the marginal") {
    const auto m = skewed_mixture();
    const auto a = df_conditional_dist(m, 1, NoisyState{Vec::Constant(1, 2.5), 1.0});
    CHECK(a.mixture.mean()(0) == doctest::Approx(m.mixture.mean()(1)).epsilon(1e-12));
    CHECK(a.mixture.covariance()(0, 0) == doctest::Approx(m.mixture.covariance()(1, 1)).epsilon(1e-12));
  }
  SUBCASE("gap to the clean conditional shrinks monotonically as t -> 0") {
    const auto m = skewed_mixture();
    const Vec y = Vec::Constant(1, -0.4);
    const auto clean = conditional_clean_dist(m, 1, y);
    double last = 1e300;
    for (double t : {0.4, 0.2, 0.1, 0.05, 0.01, 0.001}) {
      const auto a = df_conditional_dist(m, 1, NoisyState{y, t});
      const double gap = std::max(std::abs(a.mixture.mean()(0) - clean.mixture.mean()(0)),
                                  std::abs(a.mixture.covariance()(0, 0) - clean.mixture.covariance()(0, 0)));
      CHECK(gap < last);
      last = gap;
    }
    CHECK(last < 1e-2);
  }
}
