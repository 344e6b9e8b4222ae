#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace conformal {

using Vec = std::vector<double>;

// Error taxonomy maps onto process exit codes:
//   hypothesis -> 1 (a precondition on the input data failed, run verdict is "no")
//   usage      -> 2 (bad arguments, malformed scenario, API misuse)
//   numeric    -> 3 (solver breakdown, lost positivity, non-convergence)
enum class ErrKind { hypothesis = 1, usage = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  ErrKind kind;
};

[[noreturn]] inline void fail_hypothesis(const std::string& msg) { throw Error(ErrKind::hypothesis, msg); }
[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(ErrKind::usage, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(ErrKind::numeric, msg); }

constexpr std::uint64_t kDefaultSeed = 424243;

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline double unit_symmetric(Rng& rng) {
  // uniform in [-1, 1]
  return 2.0 * (double(rng() >> 11) * (1.0 / 9007199254740992.0)) - 1.0;
}

// Deterministic parallel loop: the body must write only to slot i (or other
// disjoint state); results are then independent of the thread count.
template <class F>
inline void parallel_for(std::int64_t n, int jobs, F&& fn) {
  if (jobs <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(jobs)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

inline double sq(double x) { return x * x; }

}  // namespace conformal
