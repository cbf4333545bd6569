// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace arlab {

/// Worker count from ARLAB_WORKERS; unset, empty or invalid means 1 (sequential).
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Items are handed out in index order to
/// worker_count() threads; callers must make body(i) depend only on i so the
/// result is independent of the worker count. The first exception thrown by
/// any item is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace arlab
