#ifndef PANELBOUNDS_MEAN_BOUNDS_HPP
#define PANELBOUNDS_MEAN_BOUNDS_HPP

#include <optional>
#include <string>
#include <vector>

#include "panelbounds/panel.hpp"

namespace panelbounds {

/// An interval [lower, upper] together with the scalars that produced it:
/// center B, spread factors E >= 0 and D (negative under misspecification,
/// in which case the smoothed extension makes lower > upper meaningful).
struct BoundsResult {
  double lower = 0;
  double upper = 0;
  double center = 0;   // script B
  double e_term = 0;   // script E
  double d_term = 0;   // script D
  std::string method;  // baseline | refined | homogeneous | smoothed | dual
  std::vector<std::string> flags;
  std::optional<double> lambda_star;  // sqrt(E/D) when defined
  std::optional<Vec> mu_star;         // optimal instrument multipliers (upper side)
  std::optional<Vec> delta_hat;       // concentrated-out homogeneous coefficients

  double width() const { return upper - lower; }
  bool has_flag(const std::string& f) const {
    for (const auto& g : flags)
      if (g == f) return true;
    return false;
  }
};

struct MeanBoundsConfig {
  double smoothing_r = -1;  // < 0: auto, 1e-6 * (1 + |E*D|)
  double d_tolerance = 1e-10;
  int threads = 1;
};

/// Baseline bounds from the two coarse restrictions (no instruments).
BoundsResult baseline_bounds(const PanelDataset& data, const Vec& e,
                             const MeanBoundsConfig& cfg = {});

/// Instrument-refined bounds. Throws InstrumentCollinearityError when V_S is
/// numerically singular; attaches the misspecification flag and reports the
/// smoothed interval when D < -tolerance.
BoundsResult refined_bounds(const MomentSummary& ms, const MeanBoundsConfig& cfg = {});
BoundsResult refined_bounds(const PanelDataset& data, const InstrumentBlocks& blocks,
                            const Vec& e, const MeanBoundsConfig& cfg = {});

/// Bounds when homogeneous-coefficient regressors M are present; delta is
/// concentrated out exactly and exposed for diagnostics.
BoundsResult homogeneous_bounds(const MomentSummary& ms, const MeanBoundsConfig& cfg = {});
BoundsResult homogeneous_bounds(const PanelDataset& data, const InstrumentBlocks& blocks,
                                const Vec& e, const MeanBoundsConfig& cfg = {});

/// Smoothed square root s(x,y) = sqrt((xy + sqrt((xy)^2 + r^2)) / 2).
double smoothed_sqrt(double x, double y, double r);

/// Smoothed interval endpoints; lower > upper signals an empty estimated set.
std::pair<double, double> smoothed_bounds(double b, double e, double d, double r);

/// Endpoints from (B, E, D): plain square root when D >= 0, smoothed always
/// available. Used by both the plain estimators and the bootstrap.
std::pair<double, double> smoothed_endpoints(double b, double e, double d, double r);

}  // namespace panelbounds

#endif
