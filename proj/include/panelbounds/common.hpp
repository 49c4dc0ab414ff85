#ifndef PANELBOUNDS_COMMON_HPP
#define PANELBOUNDS_COMMON_HPP

#include <Eigen/Dense>

#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace panelbounds {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors. Every structured failure carries a stable machine-readable code so
// the CLI can map it to an exit class (input vs numerical) without string
// matching on messages.
// ---------------------------------------------------------------------------

enum class ErrorClass { Input, Numerical, Internal };

class Error : public std::runtime_error {
public:
  Error(std::string code, ErrorClass cls, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)), class_(cls) {}
  const std::string& code() const { return code_; }
  ErrorClass error_class() const { return class_; }

private:
  std::string code_;
  ErrorClass class_;
};

struct ParseError : Error {
  ParseError(const std::string& msg, long row = -1)
      : Error("parse_error", ErrorClass::Input, msg), row(row) {}
  long row;
};

struct BalanceError : Error {
  explicit BalanceError(std::vector<std::string> ids)
      : Error("balance_error", ErrorClass::Input,
              "unbalanced panel; offending ids: " + join(ids)),
        offending_ids(std::move(ids)) {}
  std::vector<std::string> offending_ids;
  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (size_t i = 0; i < v.size() && i < 20; ++i) s += (i ? ", " : "") + v[i];
    if (v.size() > 20) s += ", ...";
    return s;
  }
};

struct DuplicateError : Error {
  DuplicateError(const std::string& id, long period)
      : Error("duplicate_error", ErrorClass::Input,
              "duplicate (id, period) = (" + id + ", " + std::to_string(period) + ")"),
        id(id), period(period) {}
  std::string id;
  long period;
};

struct SingularDesignError : Error {
  explicit SingularDesignError(long individual)
      : Error("singular_design", ErrorClass::Numerical,
              "R_i'R_i is singular (or indefinite beyond tolerance) for individual " +
                  std::to_string(individual)),
        individual(individual) {}
  long individual;
};

struct RankDeficiencyError : Error {
  RankDeficiencyError(long period, long entry, const std::string& msg)
      : Error("instrument_rank_deficiency", ErrorClass::Input, msg),
        period(period), entry(entry) {}
  long period;  // 1-based period of the redundant instrument entry
  long entry;   // 0-based entry within S_it
};

struct InstrumentCollinearityError : Error {
  explicit InstrumentCollinearityError(double rcond)
      : Error("instrument_collinearity", ErrorClass::Numerical,
              "V_S is numerically singular (rcond = " + std::to_string(rcond) + ")"),
        rcond(rcond) {}
  double rcond;
};

struct HomoCollinearityError : Error {
  HomoCollinearityError()
      : Error("homogeneous_collinearity", ErrorClass::Numerical,
              "V_M - M_0 is not negative definite: homogeneous regressors are "
              "multicollinear with R_i for almost every individual") {}
};

struct Assumption7Violation : Error {
  explicit Assumption7Violation(std::vector<long> individuals)
      : Error("variance_eigenvalue_floor", ErrorClass::Numerical,
              "smallest eigenvalue of R_i'R_i is <= 1/lambda_min for " +
                  std::to_string(individuals.size()) + " individual(s)"),
        individuals(std::move(individuals)) {}
  std::vector<long> individuals;
};

struct BootstrapInstabilityError : Error {
  BootstrapInstabilityError(int dropped, int total)
      : Error("bootstrap_instability", ErrorClass::Numerical,
              std::to_string(dropped) + " of " + std::to_string(total) +
                  " bootstrap replicates dropped (singular V_S)") {}
};

struct EnumerationLimitError : Error {
  explicit EnumerationLimitError(size_t atoms)
      : Error("enumeration_limit", ErrorClass::Input,
              "population enumeration would exceed the atom limit (" +
                  std::to_string(atoms) + " > 1e7)") {}
};

struct InfeasibleSharpSet : Error {
  InfeasibleSharpSet()
      : Error("infeasible_sharp_set", ErrorClass::Numerical,
              "sharp-identification LP is infeasible: the restriction set is "
              "incompatible with the population") {}
};

struct GridTooSmall : Error {
  GridTooSmall()
      : Error("grid_too_small", ErrorClass::Input,
              "lambda grid needs at least 2 points per side (anchor included)") {}
};

struct AnchorError : Error {
  AnchorError()
      : Error("anchor_error", ErrorClass::Numerical,
              "both plain and penalized anchor optimizations diverged") {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg)
      : Error("config_error", ErrorClass::Input, msg) {}
};

// ---------------------------------------------------------------------------
// Result flags (non-fatal diagnostics attached to results).
// ---------------------------------------------------------------------------
namespace flag {
inline constexpr const char* misspecification = "misspecification";       // D < 0
inline constexpr const char* max_iterations = "max_iterations";
inline constexpr const char* diverging_multiplier = "diverging_multiplier";
inline constexpr const char* empty_side = "empty_side";                   // CDF halfspace empty
inline constexpr const char* empty_interval = "empty_interval";           // lower > upper
inline constexpr const char* degenerate_bootstrap = "degenerate_bootstrap";
inline constexpr const char* sigma_zero_skipped = "sigma_zero_skipped";
inline constexpr const char* dropped_replicates = "dropped_replicates";
inline constexpr const char* instruments_dropped = "instruments_dropped";
inline constexpr const char* penalized_anchor = "penalized_anchor";
inline constexpr const char* spuriously_narrow_risk = "spuriously_narrow_risk";
}  // namespace flag

// ---------------------------------------------------------------------------
// Order-stable summation. Pairwise reduction keeps the result permutation
// stable to ~1e-12 relative error regardless of input order.
// ---------------------------------------------------------------------------
template <typename T, typename Fetch>
T pairwise_sum(size_t n, Fetch&& fetch) {
  // fetch(i) -> T; recursion bottoms out on blocks of 8
  std::function<T(size_t, size_t)> rec = [&](size_t lo, size_t hi) -> T {
    if (hi - lo <= 8) {
      T acc = fetch(lo);
      for (size_t i = lo + 1; i < hi; ++i) acc += fetch(i);
      return acc;
    }
    size_t mid = lo + (hi - lo) / 2;
    return rec(lo, mid) + rec(mid, hi);
  };
  return rec(0, n);
}

// ---------------------------------------------------------------------------
// Minimal parallel map. Results land in caller-owned slots indexed by i, so
// any later reduction is deterministic no matter how the chunks interleave.
// ---------------------------------------------------------------------------
inline int default_threads() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& body) {
  if (threads <= 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) body(i);
    return;
  }
  int nt = std::min<size_t>(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(nt);
  std::exception_ptr eptr = nullptr;
  std::mutex mu;
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&, t]() {
      size_t lo = n * t / nt, hi = n * (t + 1) / nt;
      try {
        for (size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> g(mu);
        if (!eptr) eptr = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (eptr) std::rethrow_exception(eptr);
}

}  // namespace panelbounds

#endif
