#ifndef PANELBOUNDS_DUAL_HPP
#define PANELBOUNDS_DUAL_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "panelbounds/panel.hpp"
#include "panelbounds/qp.hpp"
#include "panelbounds/mean_bounds.hpp"

namespace panelbounds {

enum class Side { Lower, Upper };

struct SignConstraint {
  enum class Kind { Free, Positive, Negative, AtLeast };
  Kind kind = Kind::Free;
  double bound = 0;  // AtLeast: lambda >= bound

  static SignConstraint free() { return {Kind::Free, 0}; }
  static SignConstraint positive() { return {Kind::Positive, 0}; }
  static SignConstraint negative() { return {Kind::Negative, 0}; }
  static SignConstraint at_least(double b) { return {Kind::AtLeast, b}; }
};

/// Objective m(w, b). Linear and SecondMoment cover the mean and variance
/// parameters; Indicator is the halfspace-split CDF objective; Zero is the
/// minimal-relaxation program; Custom supplies an arbitrary per-atom quadratic.
struct DualObjective {
  enum class Kind { Linear, SecondMoment, Indicator, Zero, Custom };
  Kind kind = Kind::Zero;
  Vec e;         // Linear / Indicator direction
  Mat e0;        // SecondMoment selector
  double c = 0;  // Indicator threshold

  std::function<QuadraticForm(int atom)> custom;

  static DualObjective linear(const Vec& e);
  static DualObjective second_moment(const Mat& e0);
  static DualObjective indicator(const Vec& e, double c);
  static DualObjective zero(int dim);
};

/// Moment set (9) in per-atom precomputed form: phi_1(w,b) = b'R'(Y - Rb) and
/// phi_{1+j}(w,b) = (S(Y - Rb))_j. No Gram inverses are needed, so atoms with
/// singular R_i'R_i are representable (they occur in discrete populations).
struct DualAtoms {
  int coef_dim = 0;
  int n_instr = 0;                 // L
  bool include_quad_moment = true;
  std::vector<double> weight;
  std::vector<Mat> gram;  // R_i'R_i
  std::vector<Vec> rty;   // R_i'Y_i
  std::vector<Mat> sr;    // S_i R_i
  std::vector<Vec> sy;    // S_i Y_i

  int K() const { return (include_quad_moment ? 1 : 0) + n_instr; }
  size_t size() const { return weight.size(); }

  static DualAtoms from_panel(const PanelDataset& data, const InstrumentBlocks& blocks);
};

struct DualProblemSpec {
  Side side = Side::Lower;
  DualObjective objective;
  SupportRegion region;
  std::vector<SignConstraint> signs;  // length K
  // L1 penalty zeta * sum_{k in penalized} |lambda_k| (sign chosen per side)
  double penalty_zeta = 0;
  std::vector<int> penalized;

  static DualProblemSpec mean(const Vec& e, const SupportRegion& region, Side side, int n_instr);
};

struct EnvelopeEvaluation {
  double value = 0;
  Vec subgradient;
  bool finite = true;
  std::vector<Vec> inner_solutions;  // filled only on request
};

/// E over atoms of the inner optimum of m + lambda'phi, with the Danskin
/// subgradient E phi(W_i, b*). Deterministic given the atom order.
EnvelopeEvaluation envelope(const Vec& lambda, const DualAtoms& atoms,
                            const DualProblemSpec& spec, int threads = 1,
                            bool want_solutions = false);

struct OuterConfig {
  int starts = 5;
  int subgrad_iterations = 60;
  int lbfgs_iterations = 300;
  double grad_tol = 1e-9;          // L-BFGS stop in reparameterized space
  double stationarity_tol = 1e-5;  // reported against spec contract
  double lambda_cap = 1e6;
  int threads = 1;
  std::vector<double> anneal = {1e-1, 1e-2, 1e-3, 1e-4};  // finite-support softmin
};

struct BoundsSide {
  double value = 0;
  Vec lambda;
  double stationarity = 0;
  int iterations = 0;
  std::vector<std::string> flags;
  bool has_flag(const std::string& f) const {
    for (const auto& g : flags)
      if (g == f) return true;
    return false;
  }
};

/// Maximizes (lower side) or minimizes (upper side) the envelope over the
/// multipliers. Sign constraints are kept strictly feasible through
/// exponential reparameterization; multi-start is deterministic.
BoundsSide outer_optimize(const DualProblemSpec& spec, const DualAtoms& atoms,
                          const Vec& init = Vec(), const OuterConfig& cfg = {});

/// Envelope value -/+ zeta * sum_{k in K0} |lambda_k| (sign per side).
BoundsSide penalized_outer_optimize(const DualProblemSpec& spec, const DualAtoms& atoms,
                                    double zeta, const std::vector<int>& k0,
                                    const Vec& init = Vec(), const OuterConfig& cfg = {});

struct MinRelaxation {
  double zeta = 0;
  Vec lambda;
  bool feasible = true;
};

/// Smallest relaxation of the penalized moments that makes the sample
/// feasible: max over the L1 ball on K0 coordinates of the m = 0 envelope.
MinRelaxation min_relaxation(const DualAtoms& atoms, const DualProblemSpec& spec,
                             const std::vector<int>& k0, const OuterConfig& cfg = {});

// ---------------------------------------------------------------------------
// Specialized drivers
// ---------------------------------------------------------------------------

BoundsSide variance_lower(const PanelDataset& data, const InstrumentBlocks& blocks, const Mat& e0,
                          const SupportRegion& box, const OuterConfig& cfg = {});

/// lambda_min <= 0 requests the empirical choice 1 / (min_i nu_i * (1 - eps)).
BoundsSide variance_upper(const PanelDataset& data, const InstrumentBlocks& blocks, const Mat& e0,
                          const SupportRegion& box, double lambda_min = 0,
                          const OuterConfig& cfg = {});

BoundsResult cdf_bounds(const PanelDataset& data, const InstrumentBlocks& blocks, const Vec& e,
                        double c, const SupportRegion& box, const OuterConfig& cfg = {});

/// Theorem-2 numeric mean bounds (both sides); cross-checks the closed forms.
BoundsResult mean_dual_bounds(const DualAtoms& atoms, const Vec& e, const SupportRegion& region,
                              const OuterConfig& cfg = {});

}  // namespace panelbounds

#endif
