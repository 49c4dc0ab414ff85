#ifndef PANELBOUNDS_LP_HPP
#define PANELBOUNDS_LP_HPP

#include <string>
#include <vector>

#include "panelbounds/common.hpp"

namespace panelbounds {

/// Equality-form linear program: optimize c'x subject to A x = rhs, x >= 0.
/// Columns are stored sparse; rows are whatever the caller stacked.
struct LPProblem {
  int n_rows = 0;
  int n_cols = 0;
  bool maximize = false;
  Vec c;
  Vec rhs;
  std::vector<std::vector<std::pair<int, double>>> cols;

  void resize(int rows, int cols_);
  void add_entry(int row, int col, double value);
};

enum class LPStatus { Optimal, Infeasible, Unbounded, IterationLimit };

struct LPSolution {
  LPStatus status = LPStatus::Optimal;
  double value = 0;
  Vec x;            // primal solution (n_cols)
  Vec duals;        // row multipliers for the original rows
  double duality_gap = 0;  // |c'x - rhs'y| at termination
  int iterations = 0;
  int presolve_dropped_rows = 0;
};

struct LPConfig {
  int max_iterations = 0;     // 0: automatic 50*(m+n) + 10000
  double pivot_tol = 1e-9;
  double feas_tol = 1e-9;
  int refactor_every = 100;
  int bland_after = 40;       // consecutive degenerate pivots before Bland's rule
};

/// Revised simplex with sparse-LU basis factorizations, product-form updates,
/// Dantzig pricing, and Bland's rule as the anti-cycling fallback. Presolve
/// drops all-zero rows and exact duplicate rows.
LPSolution lp_solve(const LPProblem& problem, const LPConfig& cfg = {});

}  // namespace panelbounds

#endif
