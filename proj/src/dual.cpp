#include "panelbounds/dual.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace panelbounds {

DualObjective DualObjective::linear(const Vec& e) {
  DualObjective o;
  o.kind = Kind::Linear;
  o.e = e;
  return o;
}
DualObjective DualObjective::second_moment(const Mat& e0) {
  DualObjective o;
  o.kind = Kind::SecondMoment;
  o.e0 = e0;
  return o;
}
DualObjective DualObjective::indicator(const Vec& e, double c) {
  DualObjective o;
  o.kind = Kind::Indicator;
  o.e = e;
  o.c = c;
  return o;
}
DualObjective DualObjective::zero(int dim) {
  DualObjective o;
  o.kind = Kind::Zero;
  o.e = Vec::Zero(dim);
  return o;
}

DualAtoms DualAtoms::from_panel(const PanelDataset& data, const InstrumentBlocks& blocks) {
  DualAtoms a;
  a.coef_dim = data.n_coef();
  a.n_instr = blocks.total;
  a.weight.resize(data.n);
  a.gram.resize(data.n);
  a.rty.resize(data.n);
  a.sr.resize(data.n);
  a.sy.resize(data.n);
  for (int i = 0; i < data.n; ++i) {
    a.weight[i] = data.weight(i);
    a.gram[i] = data.r[i].transpose() * data.r[i];
    a.rty[i] = data.r[i].transpose() * data.y[i];
    a.sr[i] = blocks.s[i] * data.r[i];
    a.sy[i] = blocks.s[i] * data.y[i];
  }
  return a;
}

DualProblemSpec DualProblemSpec::mean(const Vec& e, const SupportRegion& region, Side side,
                                      int n_instr) {
  DualProblemSpec s;
  s.side = side;
  s.objective = DualObjective::linear(e);
  s.region = region;
  s.signs.assign(1 + n_instr, SignConstraint::free());
  s.signs[0] = side == Side::Lower ? SignConstraint::negative() : SignConstraint::positive();
  return s;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// lambda layout: [lambda_quad (optional), mu_1..mu_L]
struct Multipliers {
  double lam_q = 0;
  Eigen::Map<const Vec> mu;
  Multipliers(const Vec& lambda, bool has_quad, int L)
      : lam_q(has_quad ? lambda(0) : 0.0),
        mu(lambda.data() + (has_quad ? 1 : 0), L) {}
};

QuadraticForm combined_quadratic(const DualAtoms& atoms, const DualObjective& obj, int i,
                                 const Multipliers& m) {
  const int d = atoms.coef_dim;
  QuadraticForm q;
  q.H = -m.lam_q * atoms.gram[i];
  q.g = m.lam_q * atoms.rty[i] - atoms.sr[i].transpose() * m.mu;
  q.c = m.mu.dot(atoms.sy[i]);
  switch (obj.kind) {
    case DualObjective::Kind::Linear:
      q.g += obj.e;
      break;
    case DualObjective::Kind::SecondMoment:
      q.H += obj.e0;
      break;
    case DualObjective::Kind::Indicator:
    case DualObjective::Kind::Zero:
      break;
    case DualObjective::Kind::Custom: {
      QuadraticForm mc = obj.custom(i);
      q.H += mc.H;
      q.g += mc.g;
      q.c += mc.c;
      break;
    }
  }
  (void)d;
  return q;
}

Vec moment_values(const DualAtoms& atoms, int i, const Vec& b) {
  Vec phi(atoms.K());
  int off = 0;
  if (atoms.include_quad_moment) {
    phi(0) = b.dot(atoms.rty[i]) - b.dot(atoms.gram[i] * b);
    off = 1;
  }
  phi.segment(off, atoms.n_instr) = atoms.sy[i] - atoms.sr[i] * b;
  return phi;
}

struct AtomEval {
  double value;
  Vec b;
  bool finite;
};

AtomEval eval_atom(const DualAtoms& atoms, const DualProblemSpec& spec, int i,
                   const Multipliers& m) {
  const bool maximize = spec.side == Side::Upper;
  if (spec.objective.kind == DualObjective::Kind::Indicator) {
    QuadraticForm q = combined_quadratic(atoms, spec.objective, i, m);
    SupportRegion inside = spec.region.with_halfspace(spec.objective.e, spec.objective.c, true);
    SupportRegion outside = spec.region.with_halfspace(spec.objective.e, spec.objective.c, false);
    InnerSolution si = inner_optimize(q, inside, maximize);
    InnerSolution so = inner_optimize(q, outside, maximize);
    double vi = si.empty ? (maximize ? -kInf : kInf) : si.value + 1.0;
    double vo = so.empty ? (maximize ? -kInf : kInf) : so.value;
    AtomEval out;
    if (maximize ? vi >= vo : vi <= vo) {
      out.value = vi;
      out.b = si.empty ? Vec() : si.b;
      out.finite = si.finite || so.finite;
    } else {
      out.value = vo;
      out.b = so.empty ? Vec() : so.b;
      out.finite = so.finite || si.finite;
    }
    if (si.empty && so.empty) out.finite = false;
    return out;
  }
  QuadraticForm q = combined_quadratic(atoms, spec.objective, i, m);
  InnerSolution s = inner_optimize(q, spec.region, maximize);
  return {s.value, s.b, s.finite};
}

}  // namespace

EnvelopeEvaluation envelope(const Vec& lambda, const DualAtoms& atoms, const DualProblemSpec& spec,
                            int threads, bool want_solutions) {
  const int K = atoms.K();
  if (lambda.size() != K) throw ConfigError("lambda has wrong length");
  Multipliers m(lambda, atoms.include_quad_moment, atoms.n_instr);

  const size_t n = atoms.size();
  const size_t block = 256;
  const size_t nblocks = (n + block - 1) / block;
  struct Partial {
    double value = 0;
    Vec grad;
    bool finite = true;
  };
  std::vector<Partial> parts(nblocks);
  EnvelopeEvaluation out;
  if (want_solutions) out.inner_solutions.resize(n);

  parallel_for(nblocks, threads, [&](size_t bi) {
    size_t lo = bi * block, hi = std::min(n, lo + block);
    Partial p;
    p.grad = Vec::Zero(K);
    for (size_t i = lo; i < hi; ++i) {
      Multipliers mi(lambda, atoms.include_quad_moment, atoms.n_instr);
      AtomEval ev = eval_atom(atoms, spec, static_cast<int>(i), mi);
      if (!ev.finite || !std::isfinite(ev.value)) {
        p.finite = false;
        continue;
      }
      p.value += atoms.weight[i] * ev.value;
      p.grad += atoms.weight[i] * moment_values(atoms, static_cast<int>(i), ev.b);
      if (want_solutions) out.inner_solutions[i] = ev.b;
    }
    parts[bi] = std::move(p);
  });

  out.subgradient = Vec::Zero(K);
  for (const auto& p : parts) {
    out.value += p.value;
    out.subgradient += p.grad;
    out.finite = out.finite && p.finite;
  }
  if (!out.finite) out.value = spec.side == Side::Lower ? -kInf : kInf;
  return out;
}

// ---------------------------------------------------------------------------
// Finite-support fast path: phi tables + softmin-annealed smoothing
// ---------------------------------------------------------------------------
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Table {
  RowMat phi;     // (natoms * npoints) x K
  Vec mvals;      // objective at each (atom, point); constant across atoms unless Custom
  Vec weights;    // per atom
  int npoints = 0;
  int K = 0;
};

Table build_table(const DualAtoms& atoms, const DualProblemSpec& spec) {
  Table t;
  const auto& pts = spec.region.points;
  t.npoints = static_cast<int>(pts.size());
  t.K = atoms.K();
  const size_t n = atoms.size();
  t.phi.resize(static_cast<long>(n) * t.npoints, t.K);
  t.mvals.resize(static_cast<long>(n) * t.npoints);
  t.weights.resize(n);
  for (size_t i = 0; i < n; ++i) t.weights(i) = atoms.weight[i];

  parallel_for(n, default_threads(), [&](size_t i) {
    for (int j = 0; j < t.npoints; ++j) {
      const Vec& b = pts[j];
      long row = static_cast<long>(i) * t.npoints + j;
      t.phi.row(row) = moment_values(atoms, static_cast<int>(i), b).transpose();
      double mv = 0;
      switch (spec.objective.kind) {
        case DualObjective::Kind::Linear: mv = spec.objective.e.dot(b); break;
        case DualObjective::Kind::SecondMoment: mv = b.dot(spec.objective.e0 * b); break;
        case DualObjective::Kind::Indicator:
          mv = spec.objective.e.dot(b) <= spec.objective.c ? 1.0 : 0.0;
          break;
        case DualObjective::Kind::Zero: mv = 0; break;
        case DualObjective::Kind::Custom: mv = spec.objective.custom((int)i).value(b); break;
      }
      t.mvals(row) = mv;
    }
  });
  return t;
}

// Softmin (lower) / softmax (upper) envelope over the table. tau = 0 gives the
// exact piecewise-linear envelope with an argmin subgradient.
void table_envelope(const Table& t, Side side, const Vec& lambda, double tau, int threads,
                    double& value, Vec& grad) {
  const long n = t.weights.size();
  const int np = t.npoints;
  const double sgn = side == Side::Lower ? 1.0 : -1.0;
  const size_t block = 2048;
  const size_t nblocks = (n + block - 1) / block;
  std::vector<double> vpart(nblocks, 0.0);
  std::vector<Vec> gpart(nblocks);

  parallel_for(nblocks, threads, [&](size_t bi) {
    long lo = static_cast<long>(bi) * block, hi = std::min<long>(n, lo + block);
    Vec vals = t.mvals.segment(lo * np, (hi - lo) * np) +
               t.phi.middleRows(lo * np, (hi - lo) * np) * lambda;
    double vsum = 0;
    Vec g = Vec::Zero(t.K);
    Vec w = Vec::Zero((hi - lo) * np);
    for (long i = lo; i < hi; ++i) {
      const long base = (i - lo) * np;
      double best = kInf;
      int bestj = 0;
      for (int j = 0; j < np; ++j) {
        const double v = sgn * vals(base + j);
        if (v < best) {
          best = v;
          bestj = j;
        }
      }
      if (tau <= 0) {
        vsum += t.weights(i) * sgn * best;
        w(base + bestj) = t.weights(i);
      } else {
        double z = 0;
        for (int j = 0; j < np; ++j) {
          const double e = std::exp(-(sgn * vals(base + j) - best) / tau);
          w(base + j) = e;
          z += e;
        }
        vsum += t.weights(i) * sgn * (best - tau * std::log(z));
        w.segment(base, np) *= t.weights(i) / z;
      }
    }
    gpart[bi] = t.phi.middleRows(lo * np, (hi - lo) * np).transpose() * w;
    vpart[bi] = vsum;
  });

  value = 0;
  grad = Vec::Zero(t.K);
  for (size_t b = 0; b < nblocks; ++b) {
    value += vpart[b];
    grad += gpart[b];
  }
}

// ---------------------------------------------------------------------------
// Reparameterization keeping sign constraints strictly feasible
// ---------------------------------------------------------------------------
struct Reparam {
  std::vector<SignConstraint> signs;

  Vec to_lambda(const Vec& u) const {
    Vec l(u.size());
    for (int k = 0; k < u.size(); ++k) {
      const double uc = std::min(std::max(u(k), -44.0), 44.0);
      switch (signs[k].kind) {
        case SignConstraint::Kind::Free: l(k) = u(k); break;
        case SignConstraint::Kind::Positive: l(k) = std::exp(uc); break;
        case SignConstraint::Kind::Negative: l(k) = -std::exp(uc); break;
        case SignConstraint::Kind::AtLeast: l(k) = signs[k].bound + std::exp(uc); break;
      }
    }
    return l;
  }

  Vec chain(const Vec& u, const Vec& grad_lambda) const {
    Vec g(u.size());
    for (int k = 0; k < u.size(); ++k) {
      const double uc = std::min(std::max(u(k), -44.0), 44.0);
      switch (signs[k].kind) {
        case SignConstraint::Kind::Free: g(k) = grad_lambda(k); break;
        case SignConstraint::Kind::Positive: g(k) = grad_lambda(k) * std::exp(uc); break;
        case SignConstraint::Kind::Negative: g(k) = -grad_lambda(k) * std::exp(uc); break;
        case SignConstraint::Kind::AtLeast: g(k) = grad_lambda(k) * std::exp(uc); break;
      }
    }
    return g;
  }

  // best-effort inverse for initial points
  Vec to_u(const Vec& lambda) const {
    Vec u(lambda.size());
    for (int k = 0; k < lambda.size(); ++k) {
      switch (signs[k].kind) {
        case SignConstraint::Kind::Free: u(k) = lambda(k); break;
        case SignConstraint::Kind::Positive:
          u(k) = std::log(std::max(lambda(k), 1e-8));
          break;
        case SignConstraint::Kind::Negative:
          u(k) = std::log(std::max(-lambda(k), 1e-8));
          break;
        case SignConstraint::Kind::AtLeast:
          u(k) = std::log(std::max(lambda(k) - signs[k].bound, 1e-8));
          break;
      }
    }
    return u;
  }
};

// L-BFGS with Armijo backtracking; minimizes f. Returns best point found.
struct LbfgsResult {
  Vec x;
  double f = kInf;
  double gnorm = kInf;
  int iterations = 0;
  bool converged = false;
};

LbfgsResult lbfgs_minimize(const std::function<double(const Vec&, Vec&)>& fg, Vec x0,
                           int max_iter, double gtol) {
  const int mem = 10;
  const int d = static_cast<int>(x0.size());
  std::vector<Vec> S, Yv;
  std::vector<double> rho;
  Vec x = std::move(x0), g(d);
  double f = fg(x, g);
  LbfgsResult best;
  best.x = x;
  best.f = f;
  best.gnorm = g.norm();

  for (int it = 0; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= gtol) {
      best.converged = true;
      break;
    }
    // two-loop recursion
    Vec q = g;
    std::vector<double> alpha(S.size());
    for (int j = static_cast<int>(S.size()) - 1; j >= 0; --j) {
      alpha[j] = rho[j] * S[j].dot(q);
      q -= alpha[j] * Yv[j];
    }
    if (!S.empty()) {
      const double gamma = S.back().dot(Yv.back()) / Yv.back().squaredNorm();
      q *= gamma;
    }
    for (size_t j = 0; j < S.size(); ++j) {
      const double beta = rho[j] * Yv[j].dot(q);
      q += (alpha[j] - beta) * S[j];
    }
    Vec dir = -q;
    double dg = dir.dot(g);
    if (dg > -1e-16 * std::max(1.0, g.norm())) {  // not a descent direction: restart
      dir = -g;
      dg = -g.squaredNorm();
      S.clear();
      Yv.clear();
      rho.clear();
    }

    double step = S.empty() ? std::min(1.0, 1.0 / std::max(1e-12, g.norm())) : 1.0;
    Vec xn, gn(d);
    double fn = kInf;
    bool ok = false;
    for (int bt = 0; bt < 40; ++bt) {
      xn = x + step * dir;
      fn = fg(xn, gn);
      if (std::isfinite(fn) && fn <= f + 1e-4 * step * dg) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    ++best.iterations;
    if (!ok) break;

    Vec s = xn - x;
    Vec yv = gn - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      S.push_back(s);
      Yv.push_back(yv);
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > mem) {
        S.erase(S.begin());
        Yv.erase(Yv.begin());
        rho.erase(rho.begin());
      }
    }
    const double df = f - fn;
    x = xn;
    f = fn;
    g = gn;
    if (f < best.f) {
      best.x = x;
      best.f = f;
      best.gnorm = g.norm();
    }
    if (df <= 1e-15 * (std::abs(f) + 1e-15) && g.lpNorm<Eigen::Infinity>() <= 1e3 * gtol) {
      best.converged = true;
      break;
    }
  }
  if (best.gnorm <= gtol) best.converged = true;
  return best;
}

double penalty_value(const Vec& lambda, const std::vector<int>& k0, double eta) {
  double s = 0;
  for (int k : k0) s += std::sqrt(lambda(k) * lambda(k) + eta * eta);
  return s;
}

Vec penalty_grad(const Vec& lambda, const std::vector<int>& k0, double eta) {
  Vec g = Vec::Zero(lambda.size());
  for (int k : k0) g(k) = lambda(k) / std::sqrt(lambda(k) * lambda(k) + eta * eta);
  return g;
}

}  // namespace

namespace detail {

// shared driver for outer_optimize and penalized_outer_optimize
BoundsSide outer_drive(const DualProblemSpec& spec, const DualAtoms& atoms, const Vec& init,
                       const OuterConfig& cfg, double zeta, const std::vector<int>& k0) {
  const int K = atoms.K();
  if (static_cast<int>(spec.signs.size()) != K)
    throw ConfigError("sign constraints must match the number of moments");
  const double sense = spec.side == Side::Lower ? -1.0 : 1.0;  // minimize sense*value
  Reparam rep{spec.signs};

  const bool table_mode = spec.region.kind == SupportRegion::Kind::FinitePoints;
  Table table;
  if (table_mode) table = build_table(atoms, spec);

  auto eval_lambda = [&](const Vec& lambda, Vec& grad_lambda, double tau) -> double {
    double v;
    if (table_mode) {
      table_envelope(table, spec.side, lambda, tau, cfg.threads, v, grad_lambda);
    } else {
      EnvelopeEvaluation ev = envelope(lambda, atoms, spec, cfg.threads);
      v = ev.value;
      grad_lambda = ev.subgradient;
      if (!ev.finite) return sense * v;  // +-inf
    }
    return v;
  };

  // deterministic starts: caller init first, then magnitude ladder
  std::vector<Vec> starts;
  if (init.size() == K) starts.push_back(rep.to_u(init));
  for (int s = 0; static_cast<int>(starts.size()) < cfg.starts; ++s) {
    double mag = std::pow(10.0, s - 2);  // 0.01, 0.1, 1, 10, 100
    Vec u = Vec::Zero(K);
    for (int k = 0; k < K; ++k)
      if (spec.signs[k].kind != SignConstraint::Kind::Free) u(k) = std::log(mag);
    starts.push_back(u);
  }

  BoundsSide best;
  best.value = spec.side == Side::Lower ? -kInf : kInf;
  bool any = false;
  int total_iters = 0;
  bool diverged = false, converged_any = false;

  for (const Vec& u0 : starts) {
    Vec u = u0;

    // Phase 1: a short diminishing-step subgradient pass (skipped in table
    // mode where the annealed smooth pass does the work).
    if (!table_mode && cfg.subgrad_iterations > 0) {
      double base_step = 0.5;
      Vec ubest = u;
      double fbest = kInf;
      for (int it = 0; it < cfg.subgrad_iterations; ++it) {
        Vec lambda = rep.to_lambda(u);
        Vec gL(K);
        double v = eval_lambda(lambda, gL, 0.0);
        if (!std::isfinite(v)) {
          u = 0.5 * (u + ubest);
          continue;
        }
        Vec gtot = sense * gL + zeta * penalty_grad(lambda, k0, 1e-10);
        Vec gu = rep.chain(u, gtot);
        double fv = sense * v + zeta * penalty_value(lambda, k0, 1e-10);
        if (fv < fbest) {
          fbest = fv;
          ubest = u;
        }
        double gn = gu.norm();
        if (gn <= 1e-14) break;
        u -= (base_step / (1.0 + 0.15 * it)) / gn * gu;
      }
      u = ubest;
      total_iters += cfg.subgrad_iterations;
    }

    // Phase 2: quasi-second-order polish (annealed when the inner region is a
    // finite support, where the raw envelope is piecewise linear).
    std::vector<double> taus = table_mode ? cfg.anneal : std::vector<double>{0.0};
    LbfgsResult lr;
    for (double tau : taus) {
      auto fg = [&](const Vec& uu, Vec& guu) -> double {
        Vec lambda = rep.to_lambda(uu);
        Vec gL(K);
        double v = eval_lambda(lambda, gL, tau);
        if (!std::isfinite(v)) {
          guu = Vec::Zero(K);
          return kInf;
        }
        Vec gtot = sense * gL + zeta * penalty_grad(lambda, k0, 1e-10);
        guu = rep.chain(uu, gtot);
        return sense * v + zeta * penalty_value(lambda, k0, 1e-10);
      };
      lr = lbfgs_minimize(fg, u, cfg.lbfgs_iterations, cfg.grad_tol);
      u = lr.x;
      total_iters += lr.iterations;
    }
    converged_any = converged_any || lr.converged;

    // exact (unsmoothed) envelope at the final multipliers
    Vec lambda = rep.to_lambda(u);
    if (lambda.lpNorm<Eigen::Infinity>() > cfg.lambda_cap) {
      diverged = true;
      continue;
    }
    Vec gL(K);
    double v = eval_lambda(lambda, gL, 0.0);
    if (!std::isfinite(v)) continue;
    // penalized objective: env - zeta*|.| maximized (lower), env + zeta*|.| minimized (upper)
    double vp = v + sense * zeta * penalty_value(lambda, k0, 1e-10);
    const bool better = spec.side == Side::Lower ? vp > best.value : vp < best.value;
    if (!any || better) {
      any = true;
      best.value = vp;
      best.lambda = lambda;
      // projected stationarity in lambda space
      Vec stat = sense * gL + zeta * penalty_grad(lambda, k0, 1e-10);
      for (int k = 0; k < K; ++k) {
        const bool one_sided = spec.signs[k].kind != SignConstraint::Kind::Free;
        double edge = spec.signs[k].kind == SignConstraint::Kind::AtLeast ? spec.signs[k].bound : 0.0;
        if (one_sided && std::abs(lambda(k) - edge) < 1e-7) {
          const double inward = spec.signs[k].kind == SignConstraint::Kind::Negative ? -1.0 : 1.0;
          stat(k) = std::min(0.0, inward * stat(k));  // cannot improve moving inward
        }
      }
      best.stationarity = stat.lpNorm<Eigen::Infinity>();
    }
  }

  best.iterations = total_iters;
  if (!any) {
    best.flags.push_back(flag::diverging_multiplier);
    best.value = spec.side == Side::Lower ? -kInf : kInf;
    best.lambda = Vec::Zero(K);
    return best;
  }
  if (diverged) best.flags.push_back(flag::diverging_multiplier);
  if (!converged_any && best.stationarity > cfg.stationarity_tol)
    best.flags.push_back(flag::max_iterations);
  return best;
}

}  // namespace detail

BoundsSide outer_optimize(const DualProblemSpec& spec, const DualAtoms& atoms, const Vec& init,
                          const OuterConfig& cfg) {
  return detail::outer_drive(spec, atoms, init, cfg, 0.0, {});
}

BoundsSide penalized_outer_optimize(const DualProblemSpec& spec, const DualAtoms& atoms,
                                    double zeta, const std::vector<int>& k0, const Vec& init,
                                    const OuterConfig& cfg) {
  if (zeta < 0) throw ConfigError("penalty zeta must be >= 0");
  BoundsSide out = detail::outer_drive(spec, atoms, init, cfg, zeta, k0);
  if (zeta > 0) out.flags.push_back(flag::penalized_anchor);
  return out;
}

MinRelaxation min_relaxation(const DualAtoms& atoms, const DualProblemSpec& spec_in,
                             const std::vector<int>& k0, const OuterConfig& cfg) {
  DualProblemSpec spec = spec_in;
  spec.objective = DualObjective::zero(atoms.coef_dim);
  spec.side = Side::Lower;
  const int K = atoms.K();

  MinRelaxation out;
  out.lambda = Vec::Zero(K);
  if (k0.empty()) {
    // boundary convention: zeta* = 0 when the equality moments are exactly
    // satisfiable in-sample, else flagged infeasible
    Vec lambda = Vec::Zero(K), g(K);
    double best = 0;
    for (int it = 0; it < 500; ++it) {
      EnvelopeEvaluation ev = envelope(lambda, atoms, spec, cfg.threads);
      if (!ev.finite) break;
      best = std::max(best, ev.value);
      lambda += 0.5 / (1.0 + 0.1 * it) * ev.subgradient / std::max(1e-12, ev.subgradient.norm());
    }
    out.zeta = 0;
    out.feasible = best <= 1e-6;
    return out;
  }

  // project the K0 coordinates onto the L1 ball of radius 1
  auto project = [&](Vec lambda) {
    double s = 0;
    for (int k : k0) s += std::abs(lambda(k));
    if (s <= 1.0) return lambda;
    // bisection on the soft threshold
    double lo = 0, hi = 0;
    for (int k : k0) hi = std::max(hi, std::abs(lambda(k)));
    for (int it = 0; it < 60; ++it) {
      double th = 0.5 * (lo + hi), acc = 0;
      for (int k : k0) acc += std::max(0.0, std::abs(lambda(k)) - th);
      (acc > 1.0 ? lo : hi) = th;
    }
    double th = 0.5 * (lo + hi);
    for (int k : k0) {
      double v = std::max(0.0, std::abs(lambda(k)) - th);
      lambda(k) = lambda(k) >= 0 ? v : -v;
    }
    return lambda;
  };

  const bool table_mode = spec.region.kind == SupportRegion::Kind::FinitePoints;
  Table table;
  if (table_mode) table = build_table(atoms, spec);
  auto eval = [&](const Vec& lambda, Vec& grad) -> double {
    if (table_mode) {
      double v;
      table_envelope(table, Side::Lower, lambda, 0.0, cfg.threads, v, grad);
      return v;
    }
    EnvelopeEvaluation ev = envelope(lambda, atoms, spec, cfg.threads);
    grad = ev.subgradient;
    return ev.finite ? ev.value : -kInf;
  };

  Vec lambda = Vec::Zero(K), g(K);
  double fbest = 0;  // lambda = 0 is feasible with value 0
  Vec lbest = lambda;
  double step = 0.25;
  for (int it = 0; it < 2500; ++it) {
    double v = eval(lambda, g);
    if (std::isfinite(v) && v > fbest) {
      fbest = v;
      lbest = lambda;
    }
    if (!std::isfinite(v)) {
      lambda = 0.5 * (lambda + lbest);  // stepped into a -inf region: retreat
      continue;
    }
    double gn = g.norm();
    if (gn <= 1e-14) break;
    lambda = project(lambda + step / (1.0 + 0.05 * it) * g / gn);
  }
  out.zeta = fbest;
  out.lambda = lbest;
  out.feasible = true;
  return out;
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

BoundsSide variance_lower(const PanelDataset& data, const InstrumentBlocks& blocks, const Mat& e0,
                          const SupportRegion& box, const OuterConfig& cfg) {
  DualAtoms atoms = DualAtoms::from_panel(data, blocks);
  DualProblemSpec spec;
  spec.side = Side::Lower;
  spec.objective = DualObjective::second_moment(e0);
  spec.region = box;
  spec.signs.assign(atoms.K(), SignConstraint::free());
  spec.signs[0] = SignConstraint::negative();
  return outer_optimize(spec, atoms, Vec(), cfg);
}

BoundsSide variance_upper(const PanelDataset& data, const InstrumentBlocks& blocks, const Mat& e0,
                          const SupportRegion& box, double lambda_min, const OuterConfig& cfg) {
  DualAtoms atoms = DualAtoms::from_panel(data, blocks);
  // empirical Assumption 7 screen
  double min_nu = kInf;
  std::vector<long> violators;
  for (size_t i = 0; i < atoms.size(); ++i) {
    Eigen::SelfAdjointEigenSolver<Mat> es(atoms.gram[i]);
    min_nu = std::min(min_nu, es.eigenvalues()(0));
  }
  if (lambda_min <= 0) {
    if (min_nu <= 0) throw Assumption7Violation({});
    lambda_min = 1.0 / (min_nu * 0.95);
  }
  for (size_t i = 0; i < atoms.size(); ++i) {
    Eigen::SelfAdjointEigenSolver<Mat> es(atoms.gram[i]);
    if (es.eigenvalues()(0) <= 1.0 / lambda_min) violators.push_back(static_cast<long>(i));
  }
  if (!violators.empty()) throw Assumption7Violation(violators);

  DualProblemSpec spec;
  spec.side = Side::Upper;
  spec.objective = DualObjective::second_moment(e0);
  spec.region = box;
  spec.signs.assign(atoms.K(), SignConstraint::free());
  spec.signs[0] = SignConstraint::at_least(lambda_min);
  return outer_optimize(spec, atoms, Vec(), cfg);
}

BoundsResult cdf_bounds(const PanelDataset& data, const InstrumentBlocks& blocks, const Vec& e,
                        double c, const SupportRegion& box, const OuterConfig& cfg) {
  DualAtoms atoms = DualAtoms::from_panel(data, blocks);
  DualProblemSpec lower;
  lower.side = Side::Lower;
  lower.objective = DualObjective::indicator(e, c);
  lower.region = box;
  lower.signs.assign(atoms.K(), SignConstraint::free());
  lower.signs[0] = SignConstraint::negative();
  DualProblemSpec upper = lower;
  upper.side = Side::Upper;
  upper.signs[0] = SignConstraint::positive();

  BoundsResult out;
  out.method = "dual";
  // degenerate geometry: box entirely on one side of the hyperplane
  if (box.kind == SupportRegion::Kind::Box) {
    double mn = 0, mx = 0;
    for (int i = 0; i < e.size(); ++i) {
      mn += std::min(e(i) * box.lo(i), e(i) * box.hi(i));
      mx += std::max(e(i) * box.lo(i), e(i) * box.hi(i));
    }
    if (mx <= c || mn > c) out.flags.push_back(flag::empty_side);
  }
  BoundsSide lo = outer_optimize(lower, atoms, Vec(), cfg);
  BoundsSide hi = outer_optimize(upper, atoms, Vec(), cfg);
  out.lower = std::min(1.0, std::max(0.0, lo.value));
  out.upper = std::min(1.0, std::max(0.0, hi.value));
  out.center = 0.5 * (out.lower + out.upper);
  for (const auto& f : lo.flags) out.flags.push_back(f);
  for (const auto& f : hi.flags) out.flags.push_back(f);
  return out;
}

BoundsResult mean_dual_bounds(const DualAtoms& atoms, const Vec& e, const SupportRegion& region,
                              const OuterConfig& cfg) {
  DualProblemSpec lower = DualProblemSpec::mean(e, region, Side::Lower, atoms.n_instr);
  DualProblemSpec upper = DualProblemSpec::mean(e, region, Side::Upper, atoms.n_instr);
  BoundsSide lo = outer_optimize(lower, atoms, Vec(), cfg);
  BoundsSide hi = outer_optimize(upper, atoms, Vec(), cfg);
  BoundsResult out;
  out.method = "dual";
  out.lower = lo.value;
  out.upper = hi.value;
  out.center = 0.5 * (lo.value + hi.value);
  for (const auto& f : lo.flags) out.flags.push_back(f);
  for (const auto& f : hi.flags) out.flags.push_back(f);
  return out;
}

}  // namespace panelbounds
