// SPDX-License-Identifier: Apache-2.0
//
// Stored PF-ODE trajectory pairs: noisy chunk states at every grid time and
// the clean endpoint they integrate to, together with the prefix the student
// is allowed to condition on.
#pragma once

#include "arlab/pfode.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace arlab {

enum class Provenance { bidirectional, autoregressive_oracle, autoregressive_learned };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);
inline bool is_autoregressive(Provenance p) { return p != Provenance::bidirectional; }

struct ODEPairRecord {
  Index chunk_index = 0;
  std::uint64_t seed = 0;
  /// Clean chunks before chunk_index: ODE endpoints for bidirectional data,
  /// ground truth for autoregressive data.
  Vec prefix;
  /// x_t^{<i} at each grid time (bidirectional data only, otherwise empty).
  std::vector<Vec> noisy_prefix;
  /// x_t^i at each grid time, aligned with PairDataset::grid.times.
  std::vector<Vec> snapshots;
  Vec endpoint;

  bool operator==(const ODEPairRecord&) const;
};

struct PairDataset {
  static constexpr int format_version = 1;

  SequenceSpec spec;
  TimestepGrid grid;
  Provenance provenance = Provenance::bidirectional;
  std::string teacher;
  std::string solver = "heun";
  int steps = 0;
  std::uint64_t master_seed = 0;
  std::vector<ODEPairRecord> records;

  bool operator==(const PairDataset&) const;
};

/// `count` joint trajectories from x_1 ~ N(0, I); one record per chunk.
PairDataset make_pairs_bi(const SequenceDistribution& dist, const TimestepGrid& grid, Index count, int steps,
                          std::uint64_t seed, Solver method = Solver::heun);

/// `count` ground-truth sequences; every chunk is regenerated by the teacher's
/// conditional PF-ODE from fresh noise given the ground-truth prefix.
PairDataset make_pairs_causal(const SequenceDistribution& dist, const ArTeacher& teacher, const TimestepGrid& grid,
                              Index count, int steps, std::uint64_t seed, Solver method = Solver::heun);

}  // namespace arlab
