// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace arlab::detail {

/// p[i] = cos(p[i]) through the SIMD variants of libm (a few ulp of error).
void cos_inplace(double* p, std::ptrdiff_t n);

}  // namespace arlab::detail
