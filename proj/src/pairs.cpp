// SPDX-License-Identifier: Apache-2.0
#include "arlab/pairs.hpp"

#include "arlab/parallel.hpp"

#include <algorithm>

namespace arlab {

namespace {

constexpr Index kBlock = 256;

bool same_values(const Vec& a, const Vec& b) {
  return a.size() == b.size() && std::equal(a.data(), a.data() + a.size(), b.data());
}

bool same_values(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_values(a[i], b[i])) return false;
  return true;
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::bidirectional: return "bidirectional";
    case Provenance::autoregressive_oracle: return "autoregressive-oracle";
    case Provenance::autoregressive_learned: return "autoregressive-learned";
  }
  return "unknown";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "bidirectional") return Provenance::bidirectional;
  if (s == "autoregressive-oracle") return Provenance::autoregressive_oracle;
  if (s == "autoregressive-learned") return Provenance::autoregressive_learned;
  throw FormatError("unknown provenance '" + s + "'");
}

bool ODEPairRecord::operator==(const ODEPairRecord& o) const {
  return chunk_index == o.chunk_index && seed == o.seed && same_values(prefix, o.prefix) &&
         same_values(noisy_prefix, o.noisy_prefix) && same_values(snapshots, o.snapshots) &&
         same_values(endpoint, o.endpoint);
}

bool PairDataset::operator==(const PairDataset& o) const {
  return spec == o.spec && grid == o.grid && provenance == o.provenance && teacher == o.teacher &&
         solver == o.solver && steps == o.steps && master_seed == o.master_seed && records == o.records;
}

PairDataset make_pairs_bi(const SequenceDistribution& dist, const TimestepGrid& grid, Index count, int steps,
                          std::uint64_t seed, Solver method) {
  grid.validate();
  if (count < 0) throw DomainError("make_pairs_bi: count must be >= 0");
  const SequenceSpec& spec = dist.spec;
  const Index chunks = spec.n_chunks();
  const Index cd = spec.chunk_dim();

  PairDataset ds;
  ds.spec = spec;
  ds.grid = grid;
  ds.provenance = Provenance::bidirectional;
  ds.teacher = "bidirectional-oracle";
  ds.solver = to_string(method);
  ds.steps = steps;
  ds.master_seed = seed;
  ds.records.resize(static_cast<std::size_t>(count * chunks));

  const BatchField field = [&dist](const Mat& x, double t) { return velocity_bi(dist, x, t); };
  const std::size_t blocks = static_cast<std::size_t>((count + kBlock - 1) / kBlock);
  parallel_for(blocks, [&](std::size_t b) {
    const Index first = static_cast<Index>(b) * kBlock;
    const Index n = std::min(kBlock, count - first);
    Mat start(spec.dim(), n);
    for (Index j = 0; j < n; ++j) {
      Rng rng(split_seed(seed, static_cast<std::uint64_t>(first + j)));
      start.col(j) = standard_normal(spec.dim(), 1, rng);
    }
    const Trajectory traj = integrate_through_grid(field, start, grid, steps, method);
    for (Index j = 0; j < n; ++j) {
      for (Index c = 0; c < chunks; ++c) {
        ODEPairRecord& r = ds.records[static_cast<std::size_t>((first + j) * chunks + c)];
        r.chunk_index = c;
        r.seed = split_seed(seed, static_cast<std::uint64_t>(first + j));
        const Index pd = spec.prefix_dim(c);
        r.prefix = traj.endpoint.col(j).head(pd);
        r.endpoint = traj.endpoint.col(j).segment(spec.chunk_offset(c), cd);
        for (const Snapshot& s : traj.snapshots) {
          r.snapshots.push_back(s.state.col(j).segment(spec.chunk_offset(c), cd));
          r.noisy_prefix.push_back(s.state.col(j).head(pd));
        }
      }
    }
  });
  return ds;
}

PairDataset make_pairs_causal(const SequenceDistribution& dist, const ArTeacher& teacher, const TimestepGrid& grid,
                              Index count, int steps, std::uint64_t seed, Solver method) {
  grid.validate();
  if (count < 0) throw DomainError("make_pairs_causal: count must be >= 0");
  const SequenceSpec& spec = dist.spec;
  if (!(teacher.spec() == spec)) throw ShapeError("make_pairs_causal: teacher spec differs from the distribution");
  const Index chunks = spec.n_chunks();
  const Index cd = spec.chunk_dim();

  PairDataset ds;
  ds.spec = spec;
  ds.grid = grid;
  ds.provenance = dynamic_cast<const OracleArTeacher*>(&teacher) != nullptr ? Provenance::autoregressive_oracle
                                                                            : Provenance::autoregressive_learned;
  ds.teacher = teacher.describe();
  ds.solver = to_string(method);
  ds.steps = steps;
  ds.master_seed = seed;
  ds.records.resize(static_cast<std::size_t>(count * chunks));

  const std::size_t blocks = static_cast<std::size_t>((count + kBlock - 1) / kBlock);
  parallel_for(blocks, [&](std::size_t b) {
    const Index first = static_cast<Index>(b) * kBlock;
    const Index n = std::min(kBlock, count - first);
    Mat clean(spec.dim(), n);
    Mat noise(spec.dim(), n);
    for (Index j = 0; j < n; ++j) {
      Rng rng(split_seed(seed, static_cast<std::uint64_t>(first + j)));
      clean.col(j) = dist.mixture.sample(1, rng);
      noise.col(j) = standard_normal(spec.dim(), 1, rng);
    }
    for (Index c = 0; c < chunks; ++c) {
      const Index pd = spec.prefix_dim(c);
      const Mat prefixes = clean.topRows(pd);
      const Trajectory traj =
          integrate_through_grid(teacher.bind(c, prefixes), noise.middleRows(spec.chunk_offset(c), cd), grid, steps,
                                 method);
      for (Index j = 0; j < n; ++j) {
        ODEPairRecord& r = ds.records[static_cast<std::size_t>((first + j) * chunks + c)];
        r.chunk_index = c;
        r.seed = split_seed(seed, static_cast<std::uint64_t>(first + j));
        r.prefix = prefixes.col(j);
        r.endpoint = traj.endpoint.col(j);
        for (const Snapshot& s : traj.snapshots) r.snapshots.push_back(s.state.col(j));
      }
    }
  });
  return ds;
}

}  // namespace arlab
