// SPDX-License-Identifier: Apache-2.0
//
// Probability-flow ODE machinery: velocity fields (joint and per-chunk
// autoregressive), a fixed-step integrator with an exact endpoint rule at
// t = 0, and the flow maps built from them.
#pragma once

#include "arlab/distribution.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace arlab {

/// Descending times in (0, 1] starting at 1.
struct TimestepGrid {
  std::vector<double> times;

  /// {1, 0.9375, 0.8333, 0.625}.
  static TimestepGrid standard();
  void validate() const;
  std::size_t size() const { return times.size(); }
  bool operator==(const TimestepGrid&) const = default;
};

/// Velocity of a batch of states (columns) at time t.
using BatchField = std::function<Mat(const Mat& x, double t)>;

enum class Solver { euler, heun };

std::string to_string(Solver s);
Solver solver_from_string(const std::string& s);

struct Snapshot {
  double time;
  Mat state;
};

struct Trajectory {
  Mat endpoint;
  std::vector<Snapshot> snapshots;
};

/// Fixed-step integration on the uniform grid t_k = t_from - k (t_from - t_to) / steps.
/// Snapshot times must coincide with grid nodes (within 1e-9 of a step).
/// When t_to == 0 the final sub-step is the endpoint rule
/// x_0 = x_h - h v(x_h, h) at the smallest positive node h.
Trajectory integrate(const BatchField& field, const Mat& start, double t_from, double t_to, int steps, Solver method,
                     std::span<const double> snapshot_times = {});

/// Integrates from grid.times[0] down to 0, recording a snapshot at every grid
/// time. Each segment between consecutive grid times gets a share of
/// `total_steps` proportional to its length (at least one step), so that
/// every snapshot is an exact node.
Trajectory integrate_through_grid(const BatchField& field, const Mat& start, const TimestepGrid& grid, int total_steps,
                                  Solver method);

/// Joint PF-ODE velocity (x - E[x_0 | x_t]) / t. Throws DomainError at t = 0.
Mat velocity_bi(const SequenceDistribution& dist, const Mat& xt, double t);
Vec velocity_bi(const SequenceDistribution& dist, const NoisyState& xt);

/// Source of per-chunk conditional velocities for the autoregressive PF-ODE.
class ArTeacher {
 public:
  virtual ~ArTeacher() = default;
  /// Velocity field of chunk `chunk` conditioned on the clean prefixes in the
  /// columns of `prefixes`; the returned field expects the same column count.
  virtual BatchField bind(Index chunk, const Mat& prefixes) const = 0;
  virtual SequenceSpec spec() const = 0;
  virtual std::string describe() const = 0;
};

/// Exact conditional velocity under p_data(x^chunk | prefix).
class OracleArTeacher final : public ArTeacher {
 public:
  explicit OracleArTeacher(std::shared_ptr<const SequenceDistribution> dist);

  BatchField bind(Index chunk, const Mat& prefixes) const override;
  SequenceSpec spec() const override { return dist_->spec; }
  std::string describe() const override { return "oracle"; }

 private:
  std::shared_ptr<const SequenceDistribution> dist_;
  std::vector<std::shared_ptr<const LinearConditioner>> conditioners_;
};

Mat velocity_ar(const ArTeacher& teacher, Index chunk, const Mat& prefixes, const Mat& xt, double t);

/// phi^Bi: integrate the joint field from t to 0.
Mat flow_map_bi(const SequenceDistribution& dist, const Mat& xt, double t, int steps, Solver method = Solver::heun);
/// phi^AR: integrate the conditional field of `chunk` from t to 0.
Mat flow_map_ar(const ArTeacher& teacher, Index chunk, const Mat& prefixes, const Mat& xt, double t, int steps,
                Solver method = Solver::heun);

}  // namespace arlab
