// SPDX-License-Identifier: Apache-2.0
// Built with -ffast-math so GCC can call the vectorized cos from libmvec.
// Keep this file free of anything that depends on strict IEEE semantics.
#include "vector_math.hpp"

#include <cmath>

namespace arlab::detail {

void cos_inplace(double* __restrict p, std::ptrdiff_t n) {
#pragma omp simd
  for (std::ptrdiff_t i = 0; i < n; ++i) p[i] = std::cos(p[i]);
}

}  // namespace arlab::detail
