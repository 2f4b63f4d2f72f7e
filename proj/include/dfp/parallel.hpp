// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace dfp {

/// Worker count used by the kernels. Defaults to DFP_THREADS, else 1.
int num_threads();
void set_num_threads(int n);

/// Splits [0, count) into contiguous ranges, one per worker, and runs
/// fn(begin, end, worker) on each. Ranges depend only on count and the
/// worker count; callers write disjoint outputs per index.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t, int)>& fn);

}  // namespace dfp
