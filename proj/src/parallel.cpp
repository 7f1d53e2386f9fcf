#include "hivest/parallel.hpp"

#include <cstdint>
#include <exception>
#include <mutex>

#ifdef HIVEST_HAVE_OPENMP
#include <omp.h>
#endif

namespace hivest {

void for_each_index(std::size_t n, ExecPolicy policy,
                    const std::function<void(std::size_t)>& body) {
  if (policy == ExecPolicy::Serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
#ifdef HIVEST_HAVE_OPENMP
  // exceptions cannot cross the parallel region; keep the lowest-index one
  std::exception_ptr first_error;
  std::size_t first_index = n;
  std::mutex guard;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(guard);
      if (static_cast<std::size_t>(i) < first_index) {
        first_index = static_cast<std::size_t>(i);
        first_error = std::current_exception();
      }
    }
  }
  if (first_error) std::rethrow_exception(first_error);
#else
  for (std::size_t i = 0; i < n; ++i) body(i);
#endif
}

int worker_count() {
#ifdef HIVEST_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::vector<double> evaluate_batch(const Objective& objective, std::span<const double> points,
                                   std::size_t dim, ExecPolicy policy) {
  const std::size_t count = dim == 0 ? 0 : points.size() / dim;
  std::vector<double> values(count);
  for_each_index(count, policy, [&](std::size_t i) {
    values[i] = objective(points.subspan(i * dim, dim));
  });
  return values;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace hivest
