// Serial reference vs OpenMP kernels: wall time and a bit-identity check.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#ifdef HIVEST_HAVE_OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "hivest/parallel.hpp"
#include "hivest/simlab.hpp"
#include "hivest/smoothing.hpp"
#include "hivest/snls.hpp"

using namespace hivest;

namespace {

// median of `reps` timings, and the last result for comparison
template <class F>
auto timed(int reps, F&& f) {
  std::vector<double> secs;
  decltype(f()) out{};
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    out = f();
    secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(secs.begin(), secs.end());
  return std::pair{secs[secs.size() / 2], out};
}

template <class F>
void row(const char* name, int reps, F&& kernel) {
  const auto [ts, a] = timed(reps, [&] { return kernel(ExecPolicy::Serial); });
  const auto [tp, b] = timed(reps, [&] { return kernel(ExecPolicy::Parallel); });
  std::printf("%-26s %10.4f %10.4f %8.2fx  %s\n", name, ts, tp, ts / tp,
              a == b ? "identical" : "DIFFERENT");
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serial vs parallel kernel timings"};
  int reps = 5, threads = 0, batch = 256;
  app.add_option("--reps", reps, "Timed repetitions per kernel (median reported)")
      ->capture_default_str();
  app.add_option("--threads", threads, "OpenMP workers, 0 = runtime default")->capture_default_str();
  app.add_option("--batch", batch, "Parameter vectors per objective batch")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
#ifdef HIVEST_HAVE_OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif
  std::printf("workers: %d\n", worker_count());
  std::printf("%-26s %10s %10s %9s\n", "kernel", "serial s", "parallel s", "speedup");

  const auto sc = sim::scenario_from_key("n200-s20-100");
  const auto obs = sim::generate_dataset(sc, 0);
  const auto spec = make_spec(2, 3, sc.span, KnotSpacing::Log);

  {
    const RssObjective f(obs, spec, {3, false}, sc.initial);
    const Objective obj = [&](std::span<const double> x) { return f(x); };
    std::vector<double> pts;
    for (int i = 0; i < batch; ++i) {
      const double s = 1.0 + 0.2 * (static_cast<double>(i) / batch - 0.5);
      for (double v : {36.0 * s, 0.108 / s, 1000.0 * s, 0.5, 3.0 / s, 9e-6 * s, 1.6e-5, 7e-6}) {
        pts.push_back(v);
      }
    }
    row("RSS objective batch", reps,
        [&](ExecPolicy p) { return evaluate_batch(obj, pts, 8, p); });
  }

  {
    ObservationSet dense = sim::generate_dataset(
        [&] {
          auto s = sc;
          s.n = 2000;
          return s;
        }(),
        0);
    KernelSpec k{KernelKind::Epanechnikov, 0.8};
    row("local cubic fit, n=2000", reps, [&](ExecPolicy p) {
      return local_poly_fit(dense.v_times, dense.v_values, k, 3, 2, dense.v_times, p);
    });
    row("smooth_state, CV, n=200", reps, [&](ExecPolicy p) {
      const auto e = smooth_state(obs.v_times, obs.v_values, {}, {}, {}, p);
      return e.deriv2;
    });
  }

  {
    auto s = sc;
    s.runs = 8;
    const sim::Method m[] = {sim::Method::Mssb};
    row("MSSB study, 8 runs", std::max(1, reps / 2), [&](ExecPolicy p) {
      sim::StudySettings st;
      st.policy = p;
      const auto rep = sim::run_study(s, m, st);
      return std::vector<double>(rep.methods[0].are.begin(), rep.methods[0].are.end());
    });
  }
  return 0;
}
