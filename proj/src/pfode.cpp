// SPDX-License-Identifier: Apache-2.0
#include "arlab/pfode.hpp"

#include <cmath>

namespace arlab {

TimestepGrid TimestepGrid::standard() { return TimestepGrid{{1.0, 0.9375, 0.8333, 0.625}}; }

void TimestepGrid::validate() const {
  if (times.empty()) throw DomainError("timestep grid is empty");
  if (times.front() != 1.0) throw DomainError("timestep grid must start at t = 1");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] > 0.0 && times[i] <= 1.0)) throw DomainError("grid times must lie in (0, 1]");
    if (i > 0 && !(times[i] < times[i - 1])) throw DomainError("grid times must be strictly decreasing");
  }
}

std::string to_string(Solver s) { return s == Solver::euler ? "euler" : "heun"; }

Solver solver_from_string(const std::string& s) {
  if (s == "euler") return Solver::euler;
  if (s == "heun") return Solver::heun;
  throw DomainError("unknown solver '" + s + "'");
}

Trajectory integrate(const BatchField& field, const Mat& start, double t_from, double t_to, int steps, Solver method,
                     std::span<const double> snapshot_times) {
  if (!(t_from > t_to && t_to >= 0.0 && t_from <= 1.0)) throw DomainError("integrate: need 1 >= t_from > t_to >= 0");
  if (steps < 1) throw DomainError("integrate: steps must be >= 1");
  const double h = (t_from - t_to) / steps;
  auto node = [&](int k) { return k == steps ? t_to : t_from - k * h; };

  // node index -> positions in the snapshot request
  std::vector<std::vector<std::size_t>> wanted(static_cast<std::size_t>(steps) + 1);
  for (std::size_t r = 0; r < snapshot_times.size(); ++r) {
    const double k = (t_from - snapshot_times[r]) / h;
    const double kr = std::round(k);
    if (std::abs(k - kr) > 1e-9 || kr < 0.0 || kr > steps)
      throw DomainError("snapshot time " + std::to_string(snapshot_times[r]) + " is not a grid node");
    wanted[static_cast<std::size_t>(kr)].push_back(r);
  }

  Trajectory out;
  out.snapshots.resize(snapshot_times.size());
  auto record = [&](int k, const Mat& x) {
    for (std::size_t r : wanted[static_cast<std::size_t>(k)]) out.snapshots[r] = Snapshot{snapshot_times[r], x};
  };

  Mat x = start;
  record(0, x);
  for (int k = 0; k < steps; ++k) {
    const double t = node(k);
    const double tn = node(k + 1);
    const double dt = tn - t;
    if (k + 1 == steps && t_to == 0.0) {
      x -= t * field(x, t);
    } else if (method == Solver::euler) {
      x += dt * field(x, t);
    } else {
      const Mat k1 = field(x, t);
      const Mat trial = x + dt * k1;
      const Mat k2 = field(trial, tn);
      x += 0.5 * dt * (k1 + k2);
    }
    if (!x.allFinite()) throw NumericalError("non-finite state during integration at t = " + std::to_string(tn));
    record(k + 1, x);
  }
  out.endpoint = std::move(x);
  return out;
}

Trajectory integrate_through_grid(const BatchField& field, const Mat& start, const TimestepGrid& grid, int total_steps,
                                  Solver method) {
  grid.validate();
  if (total_steps < 1) throw DomainError("integrate_through_grid: steps must be >= 1");
  const double t0 = grid.times.front();
  Trajectory out;
  Mat x = start;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const double from = grid.times[j];
    const double to = j + 1 < grid.size() ? grid.times[j + 1] : 0.0;
    out.snapshots.push_back(Snapshot{from, x});
    const int seg = std::max(1, static_cast<int>(std::lround(total_steps * (from - to) / t0)));
    x = integrate(field, x, from, to, seg, method).endpoint;
  }
  out.endpoint = std::move(x);
  return out;
}

Mat velocity_bi(const SequenceDistribution& dist, const Mat& xt, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("velocity_bi: t must lie in (0, 1]");
  return (xt - joint_posterior_mean(dist, xt, t)) / t;
}

Vec velocity_bi(const SequenceDistribution& dist, const NoisyState& xt) {
  return velocity_bi(dist, Mat(xt.values), xt.time).col(0);
}

OracleArTeacher::OracleArTeacher(std::shared_ptr<const SequenceDistribution> dist) : dist_(std::move(dist)) {
  for (Index c = 0; c < dist_->spec.n_chunks(); ++c)
    conditioners_.push_back(std::make_shared<LinearConditioner>(dist_->mixture, chunk_indices(dist_->spec, c),
                                                                prefix_indices(dist_->spec, c), 1.0, 0.0));
}

BatchField OracleArTeacher::bind(Index chunk, const Mat& prefixes) const {
  if (chunk < 0 || chunk >= dist_->spec.n_chunks()) throw DomainError("chunk index out of range");
  require_shape(prefixes.rows() == dist_->spec.prefix_dim(chunk), "oracle teacher: prefix dimension mismatch");
  struct Bound {
    std::shared_ptr<const LinearConditioner> cond;
    std::vector<const Mat*> vectors;
    std::vector<const Vec*> values;
    std::vector<Mat> means;
    Mat log_prior;
  };
  auto b = std::make_shared<Bound>();
  b->cond = conditioners_[static_cast<std::size_t>(chunk)];
  for (Index k = 0; k < b->cond->size(); ++k) {
    b->vectors.push_back(&b->cond->conditional_eigenvectors(k));
    b->values.push_back(&b->cond->conditional_eigenvalues(k));
    b->means.push_back(b->cond->component_means(k, prefixes));
  }
  b->log_prior = b->cond->log_weights(prefixes);
  return [b](const Mat& x, double t) -> Mat {
    if (!(t > 0.0)) throw DomainError("velocity_ar: t must be > 0");
    return (x - mixture_posterior_mean(b->vectors, b->values, b->means, b->log_prior, x, t)) / t;
  };
}

Mat velocity_ar(const ArTeacher& teacher, Index chunk, const Mat& prefixes, const Mat& xt, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("velocity_ar: t must lie in (0, 1]");
  return teacher.bind(chunk, prefixes)(xt, t);
}

Mat flow_map_bi(const SequenceDistribution& dist, const Mat& xt, double t, int steps, Solver method) {
  require_shape(xt.rows() == dist.spec.dim(), "flow_map_bi: dimension mismatch");
  BatchField field = [&dist](const Mat& x, double s) { return velocity_bi(dist, x, s); };
  return integrate(field, xt, t, 0.0, steps, method).endpoint;
}

Mat flow_map_ar(const ArTeacher& teacher, Index chunk, const Mat& prefixes, const Mat& xt, double t, int steps,
                Solver method) {
  require_shape(xt.rows() == teacher.spec().chunk_dim(), "flow_map_ar: chunk dimension mismatch");
  require_shape(prefixes.cols() == xt.cols(), "flow_map_ar: prefix / state column counts differ");
  return integrate(teacher.bind(chunk, prefixes), xt, t, 0.0, steps, method).endpoint;
}

}  // namespace arlab
