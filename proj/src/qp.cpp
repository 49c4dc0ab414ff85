#include "panelbounds/qp.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/QR>

#include <cmath>
#include <limits>

namespace panelbounds {

namespace {

constexpr double kBoundTol = 1e-11;

bool lex_less(const Vec& a, const Vec& b) {
  for (int i = 0; i < a.size(); ++i) {
    if (a(i) < b(i) - 1e-14) return true;
    if (a(i) > b(i) + 1e-14) return false;
  }
  return false;
}

struct Collector {
  bool maximize;
  double best_value;
  Vec best_b;
  bool any = false;

  explicit Collector(bool mx)
      : maximize(mx),
        best_value(mx ? -std::numeric_limits<double>::infinity()
                      : std::numeric_limits<double>::infinity()) {}

  void offer(const Vec& b, double v) {
    if (!any) {
      best_value = v;
      best_b = b;
      any = true;
      return;
    }
    const bool better = maximize ? v > best_value + 1e-12 : v < best_value - 1e-12;
    const bool tie = std::abs(v - best_value) <= 1e-12;
    if (better) {
      best_value = v;
      best_b = b;
    } else if (tie && lex_less(b, best_b)) {
      best_b = b;  // only the value enters bounds; ties break lexicographically
    }
  }
};

bool in_halfspace(const SupportRegion::Halfspace& h, const Vec& b, double tol) {
  const double s = h.dir.dot(b) - h.offset;
  return h.leq ? s <= tol : s >= -tol;
}

InnerSolution solve_unbounded(const QuadraticForm& q, bool maximize) {
  // finite optimum iff H is PSD (min) / NSD (max) on the whole space and the
  // gradient is consistent on the null space
  InnerSolution sol;
  const int d = q.dim();
  Eigen::SelfAdjointEigenSolver<Mat> es(q.H);
  const Vec& ev = es.eigenvalues();
  const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1.0);
  const double tol = 1e-12 * scale;
  Vec x = Vec::Zero(d);
  for (int i = 0; i < d; ++i) {
    const double lam = maximize ? -ev(i) : ev(i);
    const double gi = es.eigenvectors().col(i).dot(q.g);
    if (lam < -tol) {
      sol.finite = false;  // wrong-curvature direction
      sol.value = maximize ? std::numeric_limits<double>::infinity()
                           : -std::numeric_limits<double>::infinity();
      return sol;
    }
    if (std::abs(ev(i)) <= tol) {
      if (std::abs(gi) > 1e-10 * std::max(1.0, q.g.norm())) {
        sol.finite = false;  // linear escape along a null direction
        sol.value = maximize ? std::numeric_limits<double>::infinity()
                             : -std::numeric_limits<double>::infinity();
        return sol;
      }
      continue;
    }
    x += (-gi / (2.0 * ev(i))) * es.eigenvectors().col(i);
  }
  sol.b = x;
  sol.value = q.value(x);
  return sol;
}

// Stationary point of the face restriction; least-squares fallback for
// singular H_FF (flat directions), rejected when inconsistent.
bool face_stationary(const Mat& Hff, const Vec& rhs, Vec& x) {
  const int f = static_cast<int>(rhs.size());
  Eigen::FullPivLU<Mat> lu(2.0 * Hff);
  lu.setThreshold(1e-12);
  if (lu.isInvertible()) {
    x = lu.solve(rhs);
    return true;
  }
  Eigen::ColPivHouseholderQR<Mat> qr(2.0 * Hff);
  qr.setThreshold(1e-12);
  x = qr.solve(rhs);
  const double resid = (2.0 * Hff * x - rhs).norm();
  return resid <= 1e-9 * std::max(1.0, rhs.norm()) + 1e-12;
}

void enumerate_box(const QuadraticForm& q, const SupportRegion& region, Collector& col) {
  const int d = q.dim();
  const auto& h = region.halfspace;
  std::vector<int> state(d, 0);  // 0=lo, 1=hi, 2=free

  // iterate all 3^d face assignments
  const long total = static_cast<long>(std::pow(3.0, d));
  for (long code = 0; code < total; ++code) {
    long c = code;
    std::vector<int> freeIdx;
    Vec b = Vec::Zero(d);
    for (int i = 0; i < d; ++i) {
      state[i] = static_cast<int>(c % 3);
      c /= 3;
      if (state[i] == 0) b(i) = region.lo(i);
      else if (state[i] == 1) b(i) = region.hi(i);
      else freeIdx.push_back(i);
    }
    // skip duplicate vertex enumeration when lo == hi on a coordinate
    bool degenerate_dup = false;
    for (int i = 0; i < d; ++i)
      if (state[i] == 1 && region.hi(i) == region.lo(i)) degenerate_dup = true;
    if (degenerate_dup) continue;

    const int f = static_cast<int>(freeIdx.size());
    if (f == 0) {
      if (!h || in_halfspace(*h, b, kBoundTol)) col.offer(b, q.value(b));
      continue;
    }

    Mat Hff(f, f);
    Vec rhs(f);  // -(g_F + 2 H_F. b_fixed)
    for (int a = 0; a < f; ++a) {
      for (int bb = 0; bb < f; ++bb) Hff(a, bb) = q.H(freeIdx[a], freeIdx[bb]);
      double lin = q.g(freeIdx[a]);
      for (int i = 0; i < d; ++i)
        if (state[i] != 2) lin += 2.0 * q.H(freeIdx[a], i) * b(i);
      rhs(a) = -lin;
    }

    auto within_face = [&](const Vec& x) {
      for (int a = 0; a < f; ++a) {
        const int i = freeIdx[a];
        if (x(a) < region.lo(i) - kBoundTol || x(a) > region.hi(i) + kBoundTol) return false;
      }
      return true;
    };
    auto assemble = [&](const Vec& x) {
      Vec full = b;
      for (int a = 0; a < f; ++a)
        full(freeIdx[a]) =
            std::min(std::max(x(a), region.lo(freeIdx[a])), region.hi(freeIdx[a]));
      return full;
    };

    Vec x;
    if (face_stationary(Hff, rhs, x) && within_face(x)) {
      Vec full = assemble(x);
      if (!h || in_halfspace(*h, full, kBoundTol)) col.offer(full, q.value(full));
    }

    if (h) {
      // halfspace boundary active on this face: KKT system with one equality
      Vec ef(f);
      for (int a = 0; a < f; ++a) ef(a) = h->dir(freeIdx[a]);
      if (ef.norm() > 1e-14) {
        double rhs_plane = h->offset;
        for (int i = 0; i < d; ++i)
          if (state[i] != 2) rhs_plane -= h->dir(i) * b(i);
        Mat kkt(f + 1, f + 1);
        kkt.setZero();
        kkt.topLeftCorner(f, f) = 2.0 * Hff;
        kkt.topRightCorner(f, 1) = ef;
        kkt.bottomLeftCorner(1, f) = ef.transpose();
        Vec kr(f + 1);
        kr.head(f) = rhs;
        kr(f) = rhs_plane;
        Eigen::FullPivLU<Mat> lu(kkt);
        lu.setThreshold(1e-12);
        Vec sol;
        bool ok;
        if (lu.isInvertible()) {
          sol = lu.solve(kr);
          ok = true;
        } else {
          Eigen::ColPivHouseholderQR<Mat> qr(kkt);
          qr.setThreshold(1e-12);
          sol = qr.solve(kr);
          ok = (kkt * sol - kr).norm() <= 1e-9 * std::max(1.0, kr.norm()) + 1e-12;
        }
        if (ok) {
          Vec xs = sol.head(f);
          if (within_face(xs)) {
            Vec full = assemble(xs);
            // on the boundary -> feasible for either halfspace sense
            col.offer(full, q.value(full));
          }
        }
      }
    }
  }
}

// fallback for d > 6: projected gradient with Armijo backtracking; not exact
// for indefinite H but the library's drivers stay in low dimension
InnerSolution projected_descent(const QuadraticForm& q, const SupportRegion& region,
                                bool maximize) {
  const int d = q.dim();
  const double sgn = maximize ? -1.0 : 1.0;
  Vec x = 0.5 * (region.lo + region.hi);
  auto clip = [&](Vec v) {
    for (int i = 0; i < d; ++i) v(i) = std::min(std::max(v(i), region.lo(i)), region.hi(i));
    return v;
  };
  double fx = sgn * q.value(x);
  double step = 1.0 / std::max(1.0, q.H.cwiseAbs().rowwise().sum().maxCoeff());
  for (int it = 0; it < 500; ++it) {
    Vec grad = sgn * q.gradient(x);
    Vec cand = clip(x - step * grad);
    double fc = sgn * q.value(cand);
    int bt = 0;
    while (fc > fx - 1e-4 * grad.dot(x - cand) && bt++ < 40) {
      step *= 0.5;
      cand = clip(x - step * grad);
      fc = sgn * q.value(cand);
    }
    if ((cand - x).norm() <= 1e-13 * (1.0 + x.norm())) break;
    x = cand;
    fx = fc;
    step *= 1.3;
  }
  InnerSolution sol;
  sol.b = x;
  sol.value = q.value(x);
  return sol;
}

}  // namespace

InnerSolution inner_optimize(const QuadraticForm& q, const SupportRegion& region, bool maximize) {
  const int d = q.dim();
  if (region.kind == SupportRegion::Kind::FinitePoints) {
    Collector col(maximize);
    for (const auto& p : region.points) {
      if (region.halfspace && !in_halfspace(*region.halfspace, p, kBoundTol)) continue;
      col.offer(p, q.value(p));
    }
    InnerSolution sol;
    if (!col.any) {
      sol.empty = true;
      sol.finite = false;
      sol.value = maximize ? -std::numeric_limits<double>::infinity()
                           : std::numeric_limits<double>::infinity();
      return sol;
    }
    sol.b = col.best_b;
    sol.value = col.best_value;
    return sol;
  }

  if (region.kind == SupportRegion::Kind::All) {
    if (region.halfspace) throw ConfigError("halfspace over an unbounded region not supported");
    return solve_unbounded(q, maximize);
  }

  if (d > 6) return projected_descent(q, region, maximize);

  Collector col(maximize);
  enumerate_box(q, region, col);
  InnerSolution sol;
  if (!col.any) {
    // box is never empty by construction, so this means box ∩ halfspace = ∅
    sol.empty = true;
    sol.finite = false;
    sol.value = maximize ? -std::numeric_limits<double>::infinity()
                         : std::numeric_limits<double>::infinity();
    return sol;
  }
  sol.b = col.best_b;
  sol.value = col.best_value;
  return sol;
}

}  // namespace panelbounds
