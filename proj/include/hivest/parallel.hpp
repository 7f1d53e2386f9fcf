#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace hivest {

// Execution choice for the data-parallel kernels. Serial is the reference
// path; Parallel must produce bit-identical results because every task writes
// only its own output slot and all reductions happen afterwards in index order.
enum class ExecPolicy { Serial, Parallel };

// Runs body(i) for i in [0, n).
void for_each_index(std::size_t n, ExecPolicy policy, const std::function<void(std::size_t)>& body);

int worker_count();

using Objective = std::function<double(std::span<const double>)>;

// Evaluates objective at every row of a row-major (count x dim) point matrix.
std::vector<double> evaluate_batch(const Objective& objective, std::span<const double> points,
                                   std::size_t dim, ExecPolicy policy);

// Deterministic per-task seed derived from a master seed and a task index
// (splitmix64 finalizer), independent of worker count.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace hivest
