#ifndef PANELBOUNDS_QP_HPP
#define PANELBOUNDS_QP_HPP

#include <optional>
#include <vector>

#include "panelbounds/common.hpp"

namespace panelbounds {

/// c + g'b + b'Hb with symmetric H (no 1/2 convention).
struct QuadraticForm {
  double c = 0;
  Vec g;
  Mat H;

  double value(const Vec& b) const { return c + g.dot(b) + b.dot(H * b); }
  Vec gradient(const Vec& b) const { return g + 2.0 * (H * b); }
  int dim() const { return static_cast<int>(g.size()); }

  static QuadraticForm linear(const Vec& g0, double c0 = 0) {
    QuadraticForm q;
    q.g = g0;
    q.c = c0;
    q.H = Mat::Zero(g0.size(), g0.size());
    return q;
  }
};

/// Where the inner optimization over b lives: a finite box (the usual case,
/// Assumption 4 keeps it compact), all of R^d (closed-form mean problems), or
/// an explicit finite support (exact population mode). An optional halfspace
/// e'b <= c (or its complement's closure e'b >= c) intersects any of them.
struct SupportRegion {
  enum class Kind { Box, All, FinitePoints };
  Kind kind = Kind::Box;
  Vec lo, hi;              // Box
  std::vector<Vec> points; // FinitePoints

  struct Halfspace {
    Vec dir;
    double offset = 0;
    bool leq = true;  // true: dir'b <= offset; false: dir'b >= offset
  };
  std::optional<Halfspace> halfspace;

  int dim() const {
    switch (kind) {
      case Kind::Box: return static_cast<int>(lo.size());
      case Kind::All: return static_cast<int>(lo.size());
      case Kind::FinitePoints: return points.empty() ? 0 : static_cast<int>(points[0].size());
    }
    return 0;
  }

  static SupportRegion box(const Vec& lo, const Vec& hi) {
    SupportRegion r;
    r.kind = Kind::Box;
    r.lo = lo;
    r.hi = hi;
    if (lo.size() != hi.size()) throw ConfigError("box lo/hi dimension mismatch");
    for (int i = 0; i < lo.size(); ++i)
      if (!(lo(i) <= hi(i)) || !std::isfinite(lo(i)) || !std::isfinite(hi(i)))
        throw ConfigError("box must satisfy lo <= hi and be finite");
    return r;
  }
  static SupportRegion all(int d) {
    SupportRegion r;
    r.kind = Kind::All;
    r.lo = Vec::Constant(d, -1);
    r.hi = Vec::Constant(d, 1);
    return r;
  }
  static SupportRegion finite(std::vector<Vec> pts) {
    SupportRegion r;
    r.kind = Kind::FinitePoints;
    r.points = std::move(pts);
    return r;
  }

  SupportRegion with_halfspace(const Vec& dir, double offset, bool leq) const {
    SupportRegion r = *this;
    r.halfspace = Halfspace{dir, offset, leq};
    return r;
  }
};

struct InnerSolution {
  Vec b;
  double value = 0;
  bool finite = true;   // false: unbounded (All region) or empty intersection
  bool empty = false;   // region ∩ halfspace has no feasible point
};

/// Global optimum of a quadratic over the region. For boxes in dimension <= 6
/// this enumerates the stationary candidates of every face (optionally with
/// the halfspace boundary active), which is exact for arbitrary indefinite H.
/// Larger dimensions fall back to a projected-Newton iteration.
/// Ties are broken toward the lexicographically smallest b.
InnerSolution inner_optimize(const QuadraticForm& q, const SupportRegion& region, bool maximize);

}  // namespace panelbounds

#endif
