#ifndef PANELBOUNDS_PANEL_HPP
#define PANELBOUNDS_PANEL_HPP

#include <optional>
#include <string>
#include <vector>

#include "panelbounds/common.hpp"

namespace panelbounds {

/// Balanced panel of n individuals observed over t periods.
///
/// y[i] is the outcome vector (length T), r[i] the T x (q+p) regressor matrix
/// with rows R_it' (strictly exogenous columns first, then sequentially
/// exogenous ones), m[i] the optional T x (q_m+p_m) homogeneous-coefficient
/// regressor matrix. `weights` is empty for sampled data; population-mode
/// callers fill it with exact atom probabilities so every moment below becomes
/// an exact expectation instead of a sample mean.
struct PanelDataset {
  int n = 0;
  int t = 0;
  std::vector<Vec> y;
  std::vector<Mat> r;
  std::vector<Mat> m;  // empty when no homogeneous regressors
  std::vector<double> weights;

  struct Meta {
    std::vector<std::string> ids;
    std::vector<long> periods;
    std::vector<std::string> r_names;
    std::vector<std::string> m_names;
  } meta;

  int n_coef() const { return r.empty() ? 0 : static_cast<int>(r[0].cols()); }
  int n_homog() const { return m.empty() ? 0 : static_cast<int>(m[0].cols()); }
  bool has_homogeneous() const { return !m.empty(); }
  double weight(int i) const { return weights.empty() ? 1.0 / n : weights[i]; }

  /// Enforces balance/shape invariants and the Assumption-2 proxy
  /// (smallest eigenvalue of R_i'R_i > pd_tol * largest). Throws on violation.
  void validate(double pd_tol = 1e-10) const;
};

/// Column schema for the long-format CSV loader. Regressor specs are either a
/// literal column name, "const" (or "1"), or "lag(col,k)". When lags are
/// requested the first max-lag periods are consumed as initial conditions.
struct PanelSchema {
  std::string id = "id";
  std::string time = "t";
  std::string y = "y";
  std::vector<std::string> regressors;
  std::vector<std::string> homogeneous;
};

PanelDataset load_panel_csv(const std::string& path, const PanelSchema& schema);

/// Per-period instrument lists S_it. Each history entry contributes the
/// current value and up to depth-1 lags of one regressor column, truncated at
/// the first estimation period:
///   S_it ⊇ (x_{c,t}, x_{c,t-1}, ..., x_{c,max(1, t-depth+1)}).
/// depth <= 0 means the full current history. dim(S_it) varies with t.
struct InstrumentSpec {
  bool constant = true;
  struct HistoryEntry {
    int column = 0;  // regressor column index in R
    int depth = 0;   // max entries per period; <= 0 -> full history
  };
  std::vector<HistoryEntry> histories;

  /// What to do when the Assumption-3 screen finds a redundant entry.
  enum class Screen { Error, Drop, Off };
  Screen screen = Screen::Error;
  double screen_tol = 1e-8;  // relative smallest-eigenvalue threshold

  int dim_at(int period, int T) const;  // dim(S_it), period is 1-based
  int total_dim(int T) const;           // L = sum_t dim(S_it)
};

/// Block-diagonal instrument matrices S_i (L rows, T columns; S_it stacked on
/// the diagonal as column blocks).
struct InstrumentBlocks {
  std::vector<Mat> s;        // per individual, L x T
  std::vector<int> dims;     // dim(S_it), one per period
  std::vector<int> offsets;  // row offset of each period block
  int total = 0;             // L

  // labels for diagnostics: (period, description) per row of S_i
  std::vector<std::pair<int, std::string>> row_labels;
  std::vector<std::string> dropped;  // entries removed by the screen
};

InstrumentBlocks build_instruments(const PanelDataset& data, const InstrumentSpec& spec);

/// Individual-specific OLS estimator (R_i'R_i)^{-1} R_i'Y_i.
Vec individual_ols(const PanelDataset& data, int i);

/// Everything about one individual the bound formulas consume. Computed once;
/// Gram inversion goes through a symmetric LDLT factorization.
struct IndividualMoments {
  Mat gram;      // R_i'R_i
  Mat gram_inv;  // (R_i'R_i)^{-1}
  Vec rty;       // R_i'Y_i
  Vec bhat;      // (R_i'R_i)^{-1} R_i'Y_i
  double m0 = 0;     // Y_i'R_i (R_i'R_i)^{-1} R_i'Y_i
  Mat sr;        // S_i R_i            (L x (q+p))
  Vec sy;        // S_i Y_i            (L)
  Mat proj_ss;   // S_i R_i (R_i'R_i)^{-1} R_i'S_i'   (L x L)
  Vec proj_sy;   // S_i R_i (R_i'R_i)^{-1} R_i'Y_i    (L)
  Mat ps;        // S_i R_i (R_i'R_i)^{-1}            (L x (q+p))
  // homogeneous-coefficient blocks (empty unless M present)
  Mat vm;        // M_i'R_i (R_i'R_i)^{-1} R_i'M_i
  Vec ym;        // M_i'R_i (R_i'R_i)^{-1} R_i'Y_i
  Mat pm;        // M_i'R_i (R_i'R_i)^{-1}
  Vec y_m;       // M_i'Y_i
  Mat c_script;  // S_i R_i (R_i'R_i)^{-1} R_i'M_i
  Mat c_plain;   // S_i M_i
  Mat m0_mat;    // M_i'M_i
};

IndividualMoments compute_individual_moments(const PanelDataset& data,
                                             const InstrumentBlocks& blocks, int i);

/// Sample (or exact population) averages of the D_i components from which the
/// refined mean bounds and their bootstrap are computed. P0 and b0 are
/// contracted with the direction vector e.
struct MomentSummary {
  int n = 0;
  int coef_dim = 0;
  int instr_dim = 0;  // L
  Vec e;
  Mat v0;       // E S_i R_i (R_i'R_i)^{-1} R_i'S_i'
  Vec y0;       // E (2 S_iY_i - S_iR_i(R_i'R_i)^{-1}R_i'Y_i)
  Vec p0;       // E S_iR_i(R_i'R_i)^{-1} e
  double m0 = 0;    // E Y_i'R_i(R_i'R_i)^{-1}R_i'Y_i
  double b0 = 0;    // E e'(R_i'R_i)^{-1}R_i'Y_i
  Mat r0;       // E (R_i'R_i)^{-1}
  // uncontracted helpers used by the homogeneous path and diagnostics
  Mat p_s;      // E S_iR_i(R_i'R_i)^{-1}
  Vec y_script; // E S_iR_i(R_i'R_i)^{-1}R_i'Y_i
  Vec y_s;      // E S_iY_i
  Vec bhat;     // E (R_i'R_i)^{-1}R_i'Y_i
  // homogeneous blocks (size 0 unless M present)
  Mat vm, pm, c_script, c_plain, m0_mat;
  Vec ym, y_m;
};

/// Averages per-individual moments with a pairwise reduction, so permuting
/// individual order moves no entry by more than ~1e-12.
MomentSummary moment_summary(const PanelDataset& data, const InstrumentBlocks& blocks,
                             const Vec& e, int threads = 1);

/// Same reduction over caller-chosen indices with uniform weight 1/idx.size();
/// this is what the bootstrap uses (indices may repeat).
MomentSummary moment_summary_from(const std::vector<IndividualMoments>& per,
                                  const std::vector<int>& idx, const Vec& e);

std::vector<IndividualMoments> all_individual_moments(const PanelDataset& data,
                                                      const InstrumentBlocks& blocks,
                                                      int threads = 1);

}  // namespace panelbounds

#endif
