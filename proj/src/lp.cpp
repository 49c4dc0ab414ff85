#include "panelbounds/lp.hpp"

#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace panelbounds {

void LPProblem::resize(int rows, int cols_) {
  n_rows = rows;
  n_cols = cols_;
  c = Vec::Zero(cols_);
  rhs = Vec::Zero(rows);
  cols.assign(cols_, {});
}

void LPProblem::add_entry(int row, int col, double value) {
  if (value == 0.0) return;
  cols[col].emplace_back(row, value);
}

namespace {

using SpMat = Eigen::SparseMatrix<double>;

struct Presolved {
  std::vector<int> row_map;   // original row -> reduced row (-1 dropped)
  std::vector<int> dup_of;    // original row -> representative original row (-1 none)
  int m = 0;
  Vec rhs;
  std::vector<std::vector<std::pair<int, double>>> cols;
  bool infeasible = false;
  int dropped = 0;
};

Presolved presolve(const LPProblem& p, double tol) {
  Presolved out;
  // row-wise view for zero/duplicate detection
  std::vector<std::vector<std::pair<int, double>>> rows(p.n_rows);
  for (int j = 0; j < p.n_cols; ++j)
    for (auto& [r, v] : p.cols[j]) rows[r].emplace_back(j, v);
  for (auto& r : rows) std::sort(r.begin(), r.end());

  out.row_map.assign(p.n_rows, -1);
  out.dup_of.assign(p.n_rows, -1);
  std::map<std::pair<std::vector<std::pair<int, double>>, double>, int> seen;
  std::vector<int> kept;
  for (int r = 0; r < p.n_rows; ++r) {
    if (rows[r].empty()) {
      if (std::abs(p.rhs(r)) > tol) out.infeasible = true;
      ++out.dropped;
      continue;
    }
    auto key = std::make_pair(rows[r], p.rhs(r));
    auto it = seen.find(key);
    if (it != seen.end()) {
      out.dup_of[r] = it->second;
      ++out.dropped;
      continue;
    }
    seen.emplace(std::move(key), r);
    out.row_map[r] = static_cast<int>(kept.size());
    kept.push_back(r);
  }
  out.m = static_cast<int>(kept.size());
  out.rhs.resize(out.m);
  for (int k = 0; k < out.m; ++k) out.rhs(k) = p.rhs(kept[k]);
  out.cols.resize(p.n_cols);
  for (int j = 0; j < p.n_cols; ++j) {
    for (auto& [r, v] : p.cols[j]) {
      int rr = out.row_map[r];
      if (rr >= 0) out.cols[j].emplace_back(rr, v);
    }
    std::sort(out.cols[j].begin(), out.cols[j].end());
  }
  return out;
}

// Basis handling: sparse LU refactorization plus product-form eta updates.
struct Basis {
  int m;
  const std::vector<std::vector<std::pair<int, double>>>* cols;
  std::vector<int> basic;  // column index per row; >= n_cols means artificial (identity)
  int n_structural;

  Eigen::SparseLU<SpMat> lu;
  bool lu_ok = false;
  struct Eta {
    int row;
    Vec d;  // pivot column in the old basis coordinates
  };
  std::vector<Eta> etas;

  Basis(int m_, const std::vector<std::vector<std::pair<int, double>>>* cols_, int nstruct)
      : m(m_), cols(cols_), n_structural(nstruct) {}

  void column(int j, Vec& out) const {  // dense copy of column j
    out.setZero(m);
    if (j >= n_structural) {
      out(j - n_structural) = 1.0;
    } else {
      for (auto& [r, v] : (*cols)[j]) out(r) += v;
    }
  }

  void refactor() {
    SpMat B(m, m);
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < m; ++i) {
      int j = basic[i];
      if (j >= n_structural) {
        trip.emplace_back(j - n_structural, i, 1.0);
      } else {
        for (auto& [r, v] : (*cols)[j]) trip.emplace_back(r, i, v);
      }
    }
    B.setFromTriplets(trip.begin(), trip.end());
    B.makeCompressed();
    lu.compute(B);
    lu_ok = lu.info() == Eigen::Success;
    etas.clear();
  }

  // d = B^{-1} a
  Vec ftran(const Vec& a) const {
    Vec w = lu.solve(a);
    for (const auto& e : etas) {
      const double wr = w(e.row) / e.d(e.row);
      if (wr != 0.0) w -= wr * e.d;
      w(e.row) = wr;
    }
    return w;
  }

  // y = B^{-T} cb
  Vec btran(const Vec& cb) const {
    Vec w = cb;
    for (auto it = etas.rbegin(); it != etas.rend(); ++it) {
      const auto& e = *it;
      double acc = w(e.row);
      for (int i = 0; i < m; ++i)
        if (i != e.row) acc -= e.d(i) * w(i);
      w(e.row) = acc / e.d(e.row);
    }
    return lu.transpose().solve(w);
  }

  void push_eta(int row, Vec d) { etas.push_back({row, std::move(d)}); }
};

}  // namespace

LPSolution lp_solve(const LPProblem& problem, const LPConfig& cfg) {
  LPSolution sol;
  Presolved ps = presolve(problem, cfg.feas_tol);
  sol.presolve_dropped_rows = ps.dropped;
  if (ps.infeasible) {
    sol.status = LPStatus::Infeasible;
    return sol;
  }
  const int m = ps.m;
  const int n = problem.n_cols;
  if (m == 0) {  // only vacuous rows: x = 0 is optimal
    sol.x = Vec::Zero(n);
    sol.duals = Vec::Zero(problem.n_rows);
    sol.value = 0;
    return sol;
  }

  // flip rows to rhs >= 0 for the artificial start
  std::vector<double> row_sign(m, 1.0);
  Vec b = ps.rhs;
  for (int r = 0; r < m; ++r)
    if (b(r) < 0) {
      row_sign[r] = -1.0;
      b(r) = -b(r);
    }
  auto cols = ps.cols;
  for (auto& cl : cols)
    for (auto& [r, v] : cl) v *= row_sign[r];

  Vec c_obj = problem.maximize ? Vec(-problem.c) : problem.c;

  const long max_iter =
      cfg.max_iterations > 0 ? cfg.max_iterations : 50L * (m + n) + 10000;

  Basis basis(m, &cols, n);
  basis.basic.resize(m);
  for (int r = 0; r < m; ++r) basis.basic[r] = n + r;  // artificial identity start
  basis.refactor();
  Vec xb = b;

  auto cost_of = [&](int j, bool phase1) -> double {
    if (j >= n) return phase1 ? 1.0 : 0.0;
    return phase1 ? 0.0 : c_obj(j);
  };

  long iterations = 0;
  int degenerate_streak = 0;

  auto run_phase = [&](bool phase1) -> LPStatus {
    while (iterations < max_iter) {
      ++iterations;
      if (static_cast<int>(basis.etas.size()) >= cfg.refactor_every) {
        basis.refactor();
        // recompute xb from scratch to shed accumulated error
        xb = basis.ftran(b);
      }
      Vec cb(m);
      for (int r = 0; r < m; ++r) cb(r) = cost_of(basis.basic[r], phase1);
      Vec y = basis.btran(cb);

      // pricing
      const bool bland = degenerate_streak >= cfg.bland_after;
      int enter = -1;
      double best_rc = -cfg.pivot_tol;
      std::vector<char> in_basis(n + m, 0);
      for (int r = 0; r < m; ++r) in_basis[basis.basic[r]] = 1;
      for (int j = 0; j < n; ++j) {
        if (in_basis[j]) continue;
        double rc = cost_of(j, phase1);
        for (auto& [r, v] : cols[j]) rc -= y(r) * v;
        if (rc < best_rc) {
          enter = j;
          if (bland) break;
          best_rc = rc;
        }
      }
      // artificials may re-enter only in phase 1 (they never price below 0 there)
      if (enter < 0) return LPStatus::Optimal;

      Vec a(m);
      basis.column(enter, a);
      Vec d = basis.ftran(a);

      int leave = -1;
      double best_ratio = 0;
      for (int r = 0; r < m; ++r) {
        if (d(r) > cfg.pivot_tol) {
          const double ratio = xb(r) / d(r);
          bool take = false;
          if (leave < 0 || ratio < best_ratio - 1e-12) {
            take = true;
          } else if (ratio <= best_ratio + 1e-12) {
            // tie break: kick artificials first, then the larger pivot
            const bool cand_art = basis.basic[r] >= n;
            const bool cur_art = basis.basic[leave] >= n;
            if (bland) {
              take = basis.basic[r] < basis.basic[leave];
            } else if (cand_art != cur_art) {
              take = cand_art;
            } else {
              take = std::abs(d(r)) > std::abs(d(leave));
            }
          }
          if (take) {
            leave = r;
            best_ratio = ratio;
          }
        }
      }
      if (leave < 0) return phase1 ? LPStatus::Infeasible : LPStatus::Unbounded;

      const double step = best_ratio;
      degenerate_streak = step <= cfg.feas_tol ? degenerate_streak + 1 : 0;

      xb -= step * d;
      xb(leave) = step;
      for (int r = 0; r < m; ++r) xb(r) = std::max(xb(r), 0.0);
      basis.basic[leave] = enter;
      basis.push_eta(leave, std::move(d));
    }
    return LPStatus::IterationLimit;
  };

  // Phase 1: minimize the artificial mass
  LPStatus st = run_phase(true);
  if (st == LPStatus::IterationLimit) {
    sol.status = st;
    sol.iterations = static_cast<int>(iterations);
    return sol;
  }
  double art_mass = 0;
  for (int r = 0; r < m; ++r)
    if (basis.basic[r] >= n) art_mass += xb(r);
  if (st == LPStatus::Infeasible || art_mass > 1e-7 * (1.0 + b.cwiseAbs().maxCoeff())) {
    sol.status = LPStatus::Infeasible;
    sol.iterations = static_cast<int>(iterations);
    return sol;
  }
  // leftover artificials stay basic at zero with zero phase-2 cost

  degenerate_streak = 0;
  st = run_phase(false);
  sol.status = st;
  sol.iterations = static_cast<int>(iterations);
  if (st != LPStatus::Optimal && st != LPStatus::IterationLimit) return sol;

  basis.refactor();
  xb = basis.ftran(b);
  sol.x = Vec::Zero(n);
  for (int r = 0; r < m; ++r)
    if (basis.basic[r] < n) sol.x(basis.basic[r]) = std::max(xb(r), 0.0);
  double obj = c_obj.dot(sol.x);
  sol.value = problem.maximize ? -obj : obj;

  Vec cb(m);
  for (int r = 0; r < m; ++r) cb(r) = cost_of(basis.basic[r], false);
  Vec y = basis.btran(cb);
  sol.duals = Vec::Zero(problem.n_rows);
  for (int r0 = 0; r0 < problem.n_rows; ++r0) {
    int rr = ps.row_map[r0];
    if (rr >= 0) {
      double d = y(rr) * row_sign[rr];
      sol.duals(r0) = problem.maximize ? -d : d;
    }
  }
  sol.duality_gap = std::abs(obj - ps.rhs.dot(Vec(y.array() * Eigen::Map<Vec>(row_sign.data(), m).array())));
  return sol;
}

}  // namespace panelbounds
