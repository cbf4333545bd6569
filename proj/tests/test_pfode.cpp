// SPDX-License-Identifier: Apache-2.0
#include "arlab/pairs.hpp"

#include <doctest.h>

#include <cmath>

using namespace arlab;

namespace {

// Closed-form flow map of a zero-mean Gaussian with covariance sigma from time t to 0.
Mat gaussian_flow_matrix(const Mat& sigma, double t) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sigma);
  const Vec lam = es.eigenvalues();
  Vec g(lam.size());
  for (Index i = 0; i < lam.size(); ++i) g(i) = std::sqrt(lam(i)) / std::sqrt((1 - t) * (1 - t) * lam(i) + t * t);
  return es.eigenvectors() * g.asDiagonal() * es.eigenvectors().transpose();
}

Mat flow_matrix(const SequenceDistribution& d, double t, int steps) {
  return flow_map_bi(d, Mat::Identity(d.spec.dim(), d.spec.dim()), t, steps);
}

}  // namespace

TEST_CASE("timestep grid") {
  CHECK_NOTHROW(TimestepGrid::standard().validate());
  CHECK(TimestepGrid::standard().times == std::vector<double>{1.0, 0.9375, 0.8333, 0.625});
  CHECK_THROWS_AS((TimestepGrid{{0.9, 0.5}}.validate()), DomainError);
  CHECK_THROWS_AS((TimestepGrid{{1.0, 0.5, 0.5}}.validate()), DomainError);
  CHECK_THROWS_AS((TimestepGrid{{1.0, 0.0}}.validate()), DomainError);
}

TEST_CASE("joint velocity on scalar normal data") {
  const auto d = standard_normal_dist(SequenceSpec{1, 1, 1});
  auto oracle = [](double t, double x) { return (2 * t - 1) / (2 * t * t - 2 * t + 1) * x; };
  for (double x : {-2.0, 0.3, 1.7}) CHECK(std::abs(velocity_bi(d, Mat::Constant(1, 1, x), 0.5)(0, 0)) < 1e-15);
  CHECK(velocity_bi(d, Mat::Constant(1, 1, 1.0), 0.25)(0, 0) == doctest::Approx(-0.8));
  CHECK(velocity_bi(d, Mat::Constant(1, 1, 1.0), 0.75)(0, 0) == doctest::Approx(0.8));
  CHECK(velocity_bi(d, Mat::Constant(1, 1, 1.0), 0.25)(0, 0) == doctest::Approx(oracle(0.25, 1.0)));
  CHECK_THROWS_AS(velocity_bi(d, Mat::Constant(1, 1, 1.0), 0.0), DomainError);
}

TEST_CASE("autoregressive velocity") {
  SUBCASE("independent frames reduce to the joint field") {
    const auto d = std::make_shared<const SequenceDistribution>(standard_normal_dist(SequenceSpec{4, 1, 2}));
    OracleArTeacher teacher(d);
    Rng rng(1);
    const Mat x = standard_normal(4, 5, rng);
    const Mat v = velocity_bi(*d, x, 0.3);
    const Mat va = velocity_ar(teacher, 1, x.topRows(2), x.bottomRows(2), 0.3);
    CHECK((va - v.bottomRows(2)).norm() < 1e-14);
  }
  SUBCASE("bivariate conditional matches the scalar Gaussian posterior") {
    const auto d = std::make_shared<const SequenceDistribution>(bivariate_gaussian(0.8));
    OracleArTeacher teacher(d);
    const double mu = 0.8, var = 0.36, t = 0.5, x = 0.8;
    const double post = mu + (1 - t) * var / ((1 - t) * (1 - t) * var + t * t) * (x - (1 - t) * mu);
    const double v = velocity_ar(teacher, 1, Mat::Constant(1, 1, 1.0), Mat::Constant(1, 1, x), t)(0, 0);
    CHECK(v == doctest::Approx((x - post) / t).epsilon(1e-12));
  }
  SUBCASE("degenerate conditional pulls to the conditional mean") {
    Mat cov(2, 2);
    cov << 1.0, 1.0 - 1e-13, 1.0 - 1e-13, 1.0;
    Mat exact(2, 2);
    exact << 1.0, 0.5, 0.5, 0.25;
    const auto d = std::make_shared<const SequenceDistribution>(
        SequenceSpec{2, 1, 1}, GaussianMixture({GaussianComponent(1.0, Vec::Zero(2), exact)}));
    OracleArTeacher teacher(d);
    for (double t : {0.2, 0.7}) {
      const double v = velocity_ar(teacher, 1, Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, 0.3), t)(0, 0);
      CHECK(v == doctest::Approx((0.3 - 1.0) / t).epsilon(1e-12));
    }
  }
}

TEST_CASE("integrator") {
  SUBCASE("zero field") {
    const BatchField zero = [](const Mat& x, double) { return Mat::Zero(x.rows(), x.cols()); };
    const Mat x = Mat::Constant(3, 2, 1.25);
    CHECK(integrate(zero, x, 1.0, 0.2, 7, Solver::heun).endpoint == x);
  }
  SUBCASE("linear decay matches the exponential") {
    const BatchField f = [](const Mat& x, double) -> Mat { return -x; };
    const Mat x = Mat::Constant(1, 1, 1.3);
    const double end = integrate(f, x, 1.0, 0.5, 512, Solver::heun).endpoint(0, 0);
    // dx/dt = -x integrated backwards in time over 0.5 grows the state.
    CHECK(std::abs(end - 1.3 * std::exp(0.5)) < 1e-6);
  }
  SUBCASE("scalar normal data flows to the identity at t = 1") {
    const auto d = standard_normal_dist(SequenceSpec{1, 1, 1});
    CHECK(std::abs(flow_map_bi(d, Mat::Constant(1, 1, 1.0), 1.0, 256)(0, 0) - 1.0) < 1e-3);
    CHECK(std::abs(flow_map_bi(d, Mat::Constant(1, 1, 1.0), 0.5, 256)(0, 0) - 1.0 / std::sqrt(0.5)) < 1e-3);
  }
  SUBCASE("snapshots must be nodes") {
    const BatchField f = [](const Mat& x, double) -> Mat { return -x; };
    const std::vector<double> good{0.75, 0.5};
    const auto tr = integrate(f, Mat::Ones(1, 1), 1.0, 0.0, 8, Solver::euler, good);
    REQUIRE(tr.snapshots.size() == 2);
    CHECK(tr.snapshots[0].time == 0.75);
    const std::vector<double> bad{0.7};
    CHECK_THROWS_AS(integrate(f, Mat::Ones(1, 1), 1.0, 0.0, 8, Solver::euler, bad), DomainError);
  }
  SUBCASE("non-finite state is reported") {
    const BatchField f = [](const Mat& x, double) -> Mat { return Mat::Constant(x.rows(), x.cols(), NAN); };
    CHECK_THROWS_AS(integrate(f, Mat::Ones(1, 1), 1.0, 0.5, 2, Solver::heun), NumericalError);
  }
  SUBCASE("bad ranges") {
    const BatchField f = [](const Mat& x, double) -> Mat { return x; };
    CHECK_THROWS_AS(integrate(f, Mat::Ones(1, 1), 0.5, 0.5, 2, Solver::heun), DomainError);
    CHECK_THROWS_AS(integrate(f, Mat::Ones(1, 1), 1.0, 0.5, 0, Solver::heun), DomainError);
  }
}

TEST_CASE("joint flow map") {
  SUBCASE("bivariate rho = 0.8 at t = 0.5") {
    const auto d = bivariate_gaussian(0.8);
    Mat sigma(2, 2);
    sigma << 1.0, 0.8, 0.8, 1.0;
    const Mat exact = gaussian_flow_matrix(sigma, 0.5);
    const Mat m = flow_matrix(d, 0.5, 256);
    CHECK(std::abs(m(0, 1) - exact(0, 1)) < 1e-3);
    CHECK(std::abs(exact(0, 1) - 0.3935) < 1e-3);
    CHECK(Eigen::JacobiSVD<Mat>(m).singularValues().minCoeff() > 0.1);
  }
  SUBCASE("rho = 0 is diagonal") {
    const Mat m = flow_matrix(bivariate_gaussian(0.0), 0.5, 256);
    CHECK(std::abs(m(0, 1)) < 1e-6);
    CHECK(std::abs(m(1, 0)) < 1e-6);
  }
  SUBCASE("Heun is second order") {
    const auto d = bivariate_gaussian(0.8);
    Mat sigma(2, 2);
    sigma << 1.0, 0.8, 0.8, 1.0;
    const Mat exact = gaussian_flow_matrix(sigma, 1.0);
    double prev = (flow_matrix(d, 1.0, 16) - exact).norm();
    for (int steps : {32, 64, 128}) {
      const double err = (flow_matrix(d, 1.0, steps) - exact).norm();
      CHECK(prev / err >= 3.0);
      CHECK(prev / err <= 5.0);
      prev = err;
    }
  }
}

TEST_CASE("autoregressive flow map") {
  const auto d = std::make_shared<const SequenceDistribution>(bivariate_gaussian(0.8));
  OracleArTeacher teacher(d);
  SUBCASE("affine conditional map at t = 1") {
    for (double x : {-1.5, 0.0, 2.0}) {
      const double out = flow_map_ar(teacher, 1, Mat::Constant(1, 1, 1.0), Mat::Constant(1, 1, x), 1.0, 256)(0, 0);
      CHECK(std::abs(out - (0.8 + std::sqrt(0.36) * x)) < 1e-3);
    }
  }
  SUBCASE("independent frames agree with the joint map") {
    const auto ind = std::make_shared<const SequenceDistribution>(standard_normal_dist(SequenceSpec{2, 1, 1}));
    OracleArTeacher t2(ind);
    Rng rng(4);
    const Mat x = standard_normal(2, 4, rng);
    const Mat joint = flow_map_bi(*ind, x, 0.7, 64);
    const Mat ar = flow_map_ar(t2, 1, x.topRows(1), x.bottomRows(1), 0.7, 64);
    CHECK((joint.bottomRows(1) - ar).norm() < 1e-12);
  }
  SUBCASE("monotone in the input") {
    double last = -1e300;
    for (double x = -3.0; x <= 3.0; x += 0.5) {
      const double out = flow_map_ar(teacher, 1, Mat::Constant(1, 1, -0.4), Mat::Constant(1, 1, x), 0.6, 64)(0, 0);
      CHECK(out > last);
      last = out;
    }
  }
  SUBCASE("degenerate conditional ends at the conditional mean") {
    Mat exact(2, 2);
    exact << 1.0, 0.5, 0.5, 0.25;
    const auto dd = std::make_shared<const SequenceDistribution>(
        SequenceSpec{2, 1, 1}, GaussianMixture({GaussianComponent(1.0, Vec::Zero(2), exact)}));
    OracleArTeacher t3(dd);
    Rng rng(5);
    const Mat x = standard_normal(1, 6, rng);
    const Mat out = flow_map_ar(t3, 1, Mat::Constant(1, 6, 2.0), x, 1.0, 32);
    CHECK((out.array() - 1.0).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("bidirectional pairs") {
  const auto d = standard_normal_dist(SequenceSpec{3, 1, 1});
  const auto grid = TimestepGrid::standard();
  SUBCASE("empty") {
    const auto ds = make_pairs_bi(d, grid, 0, 64, 1);
    CHECK(ds.records.empty());
    CHECK(ds.grid == grid);
    CHECK(ds.provenance == Provenance::bidirectional);
  }
  SUBCASE("snapshots follow the scalar closed form") {
    const auto ds = make_pairs_bi(d, grid, 40, 256, 2);
    REQUIRE(ds.records.size() == 120);
    for (const auto& r : ds.records) {
      REQUIRE(r.snapshots.size() == grid.size());
      CHECK(r.prefix.size() == r.chunk_index);
      for (std::size_t g = 0; g < grid.size(); ++g) {
        const double t = grid.times[g];
        CHECK(std::abs(r.snapshots[g](0) - r.endpoint(0) * std::sqrt(2 * t * t - 2 * t + 1)) < 1e-3);
      }
    }
  }
  SUBCASE("deterministic") { CHECK(make_pairs_bi(d, grid, 10, 32, 3) == make_pairs_bi(d, grid, 10, 32, 3)); }
}

TEST_CASE("causal pairs") {
  const auto grid = TimestepGrid::standard();
  SUBCASE("bivariate endpoints centre on the conditional mean") {
    const auto d = std::make_shared<const SequenceDistribution>(bivariate_gaussian(0.8));
    OracleArTeacher teacher(d);
    const auto ds = make_pairs_causal(*d, teacher, grid, 2000, 64, 8);
    CHECK(ds.provenance == Provenance::autoregressive_oracle);
    double sum = 0.0, sq = 0.0;
    Index n = 0;
    for (const auto& r : ds.records) {
      if (r.chunk_index != 1) continue;
      const double resid = r.endpoint(0) - 0.8 * r.prefix(0);
      sum += resid;
      sq += resid * resid;
      ++n;
    }
    const double mean = sum / static_cast<double>(n);
    const double se = std::sqrt((sq / static_cast<double>(n) - mean * mean) / static_cast<double>(n));
    CHECK(std::abs(mean) < 3.0 * se);
  }
  SUBCASE("degenerate conditional") {
    Mat exact(2, 2);
    exact << 1.0, 0.5, 0.5, 0.25;
    const auto d = std::make_shared<const SequenceDistribution>(
        SequenceSpec{2, 1, 1}, GaussianMixture({GaussianComponent(1.0, Vec::Zero(2), exact)}));
    OracleArTeacher teacher(d);
    const auto ds = make_pairs_causal(*d, teacher, grid, 20, 32, 9);
    for (const auto& r : ds.records)
      if (r.chunk_index == 1) CHECK(std::abs(r.endpoint(0) - 0.5 * r.prefix(0)) < 1e-12);
  }
}
