#include "panelbounds/mean_bounds.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace panelbounds {

double smoothed_sqrt(double x, double y, double r) {
  const double xy = x * y;
  return std::sqrt(0.5 * (xy + std::sqrt(xy * xy + r * r)));
}

std::pair<double, double> smoothed_bounds(double b, double e, double d, double r) {
  const double half = 0.5 * (smoothed_sqrt(e, d, r) - smoothed_sqrt(e, -d, r));
  return {b - half, b + half};
}

std::pair<double, double> smoothed_endpoints(double b, double e, double d, double r) {
  return smoothed_bounds(b, e, d, r);
}

namespace {

double auto_r(double e, double d, double r_cfg) {
  if (r_cfg > 0) return r_cfg;
  return 1e-6 * (1.0 + std::abs(e * d));
}

BoundsResult finish(double B, double E, double D, const char* method,
                    const MeanBoundsConfig& cfg) {
  BoundsResult out;
  out.center = B;
  out.e_term = E;
  out.d_term = D;
  out.method = method;
  if (D < -cfg.d_tolerance) {
    // misspecification: never clamp D, report the smoothed (possibly empty) interval
    out.flags.push_back(flag::misspecification);
    out.method = "smoothed";
    auto [lo, hi] = smoothed_bounds(B, std::max(E, 0.0), D, auto_r(E, D, cfg.smoothing_r));
    out.lower = lo;
    out.upper = hi;
    if (lo > hi) out.flags.push_back(flag::empty_interval);
  } else {
    const double half = 0.5 * std::sqrt(std::max(E, 0.0) * std::max(D, 0.0));
    out.lower = B - half;
    out.upper = B + half;
  }
  if (D > 0 && E > 0) out.lambda_star = std::sqrt(E / D);
  return out;
}

}  // namespace

BoundsResult baseline_bounds(const PanelDataset& data, const Vec& e,
                             const MeanBoundsConfig& cfg) {
  const int d = data.n_coef();
  if (e.size() != d) throw ConfigError("direction vector e has wrong length");

  // moments of Theorem 1: E(gram), E(R'Y), E(gram^{-1}), E(bhat), E(m0)
  struct Part {
    Mat gram, gram_inv;
    Vec rty, bhat;
    double m0;
  };
  Vec acc = pairwise_sum<Vec>(data.n, [&](size_t i) {
    const Mat& R = data.r[i];
    const Vec& Y = data.y[i];
    Mat gram = R.transpose() * R;
    Eigen::LDLT<Mat> ldlt(gram);
    if (ldlt.info() != Eigen::Success) throw SingularDesignError(static_cast<long>(i));
    Mat gi = ldlt.solve(Mat::Identity(d, d));
    Vec rty = R.transpose() * Y;
    Vec bhat = gi * rty;
    double m0 = rty.dot(bhat);
    Vec v(2 * d * d + 2 * d + 1);
    long k = 0;
    v.segment(k, d * d) = Eigen::Map<Vec>(gram.data(), d * d);
    k += d * d;
    v.segment(k, d * d) = Eigen::Map<Vec>(gi.data(), d * d);
    k += d * d;
    v.segment(k, d) = rty;
    k += d;
    v.segment(k, d) = bhat;
    k += d;
    v(k) = m0;
    return Vec(data.weight(static_cast<int>(i)) * v);
  });
  long k = 0;
  Mat gram_m = Eigen::Map<Mat>(acc.data() + k, d, d);
  k += d * d;
  Mat gi_m = Eigen::Map<Mat>(acc.data() + k, d, d);
  k += d * d;
  Vec rty_m = acc.segment(k, d);
  k += d;
  Vec bhat_m = acc.segment(k, d);
  k += d;
  double m0_m = acc(k);

  Eigen::LDLT<Mat> ldlt(gram_m);
  Vec b0_vec = ldlt.solve(rty_m);  // pooled OLS coefficients B_0
  const double B = 0.5 * e.dot(bhat_m) + 0.5 * e.dot(b0_vec);
  const double E = e.dot(gi_m * e) - e.dot(ldlt.solve(e));
  const double D = m0_m - rty_m.dot(b0_vec);
  return finish(B, E, D, "baseline", cfg);
}

namespace {

struct VsFactor {
  Eigen::LDLT<Mat> ldlt;
  double rcond = 0;
};

VsFactor factor_vs(const Mat& v0) {
  VsFactor f;
  Eigen::SelfAdjointEigenSolver<Mat> es(v0);
  const auto& ev = es.eigenvalues();
  f.rcond = ev(ev.size() - 1) > 0 ? ev(0) / ev(ev.size() - 1) : 0.0;
  if (!(f.rcond > 1e-13) || ev(0) <= 0) throw InstrumentCollinearityError(f.rcond);
  f.ldlt.compute(v0);
  if (f.ldlt.info() != Eigen::Success) throw InstrumentCollinearityError(f.rcond);
  return f;
}

}  // namespace

BoundsResult refined_bounds(const MomentSummary& ms, const MeanBoundsConfig& cfg) {
  VsFactor f = factor_vs(ms.v0);
  Vec viy = f.ldlt.solve(ms.y0);
  Vec vip = f.ldlt.solve(ms.p0);
  const double B = 0.5 * ms.b0 + 0.5 * ms.p0.dot(viy);
  const double E = ms.e.dot(ms.r0 * ms.e) - ms.p0.dot(vip);
  const double D = ms.m0 - ms.y0.dot(viy);
  BoundsResult out = finish(B, E, D, "refined", cfg);
  if (out.lambda_star) {
    // proof's first-order condition: mu* = V_S^{-1} (P_S e + lambda (Y_S^script - 2 Y_S))
    out.mu_star = Vec(f.ldlt.solve(Vec(ms.p0 + *out.lambda_star * (ms.y_script - 2.0 * ms.y_s))));
  }
  return out;
}

BoundsResult refined_bounds(const PanelDataset& data, const InstrumentBlocks& blocks,
                            const Vec& e, const MeanBoundsConfig& cfg) {
  return refined_bounds(moment_summary(data, blocks, e, cfg.threads), cfg);
}

BoundsResult homogeneous_bounds(const MomentSummary& ms, const MeanBoundsConfig& cfg) {
  if (ms.vm.size() == 0)
    throw ConfigError("homogeneous_bounds requires a panel with homogeneous regressors");

  // A = V_M - M_0 must be negative definite (Assumption 5 proxy).
  Mat A = ms.vm - ms.m0_mat;
  Eigen::SelfAdjointEigenSolver<Mat> es(A);
  if (es.eigenvalues()(es.eigenvalues().size() - 1) >= -1e-12) throw HomoCollinearityError();
  Eigen::LDLT<Mat> A_ldlt(A);

  Mat cdiff = ms.c_plain - ms.c_script;              // C - C_script  (L x dm)
  Mat AinvCt = A_ldlt.solve(cdiff.transpose());      // (dm x L)
  Mat V = ms.v0 - cdiff * AinvCt;                    // concentrated V
  Eigen::SelfAdjointEigenSolver<Mat> esv(V);
  if (esv.eigenvalues()(0) <= 1e-13 * std::max(esv.eigenvalues()(esv.eigenvalues().size() - 1), 0.0))
    throw InstrumentCollinearityError(0.0);
  Eigen::LDLT<Mat> V_ldlt(V);

  Vec pme = ms.pm * ms.e;                            // P_M e  (dm)
  Vec ydiff = ms.y_m - ms.ym;                        // Y_M - Y_M^script (dm)
  Vec Ainv_pme = A_ldlt.solve(pme);
  Vec Ainv_ydiff = A_ldlt.solve(ydiff);

  Vec u = ms.p0 + cdiff * Ainv_pme;                  // P_S e + (C - C_s) A^{-1} P_M e
  Vec z = ms.y0 + cdiff * Ainv_ydiff;                // 2Y_S - Y_S^script + (C - C_s) A^{-1} (Y_M - Y_M^s)
  Vec Vinv_u = V_ldlt.solve(u);
  Vec Vinv_z = V_ldlt.solve(z);

  const double B = 0.5 * ms.b0 + 0.5 * pme.dot(Ainv_ydiff) + 0.5 * u.dot(Vinv_z);
  const double E = ms.e.dot(ms.r0 * ms.e) - pme.dot(Ainv_pme) - u.dot(Vinv_u);
  const double D = ms.m0 - ydiff.dot(Ainv_ydiff) - z.dot(Vinv_z);
  BoundsResult out = finish(B, E, D, "homogeneous", cfg);
  if (out.lambda_star) {
    const double lam = *out.lambda_star;
    // delta* from the proof, evaluated at the upper-side optimum
    Vec mu = V_ldlt.solve(Vec(u + lam * (ms.y_script - 2.0 * ms.y_s - cdiff * Ainv_ydiff)));
    Vec rhs = lam * ydiff - cdiff.transpose() * mu - pme;
    out.delta_hat = Vec(-0.5 / lam * A_ldlt.solve(rhs));
    out.mu_star = mu;
  }
  return out;
}

BoundsResult homogeneous_bounds(const PanelDataset& data, const InstrumentBlocks& blocks,
                                const Vec& e, const MeanBoundsConfig& cfg) {
  return homogeneous_bounds(moment_summary(data, blocks, e, cfg.threads), cfg);
}

}  // namespace panelbounds
