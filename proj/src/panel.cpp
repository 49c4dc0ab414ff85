#include "panelbounds/panel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace panelbounds {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

struct RegressorTerm {
  enum class Kind { Constant, Column, Lag } kind;
  std::string column;
  int lag = 0;
};

RegressorTerm parse_regressor(const std::string& spec) {
  std::string s = trim(spec);
  if (s == "const" || s == "1") return {RegressorTerm::Kind::Constant, "", 0};
  if (s.rfind("lag(", 0) == 0 && s.back() == ')') {
    std::string inner = s.substr(4, s.size() - 5);
    size_t comma = inner.rfind(',');
    if (comma == std::string::npos)
      throw ConfigError("malformed lag spec '" + s + "', expected lag(col,k)");
    std::string col = trim(inner.substr(0, comma));
    int k = 0;
    try {
      k = std::stoi(trim(inner.substr(comma + 1)));
    } catch (...) {
      throw ConfigError("malformed lag depth in '" + s + "'");
    }
    if (k < 1) throw ConfigError("lag depth must be >= 1 in '" + s + "'");
    return {RegressorTerm::Kind::Lag, col, k};
  }
  return {RegressorTerm::Kind::Column, s, 0};
}

}  // namespace

void PanelDataset::validate(double pd_tol) const {
  if (n <= 0 || t <= 0) throw ParseError("empty panel");
  if (static_cast<int>(y.size()) != n || static_cast<int>(r.size()) != n)
    throw ParseError("panel arrays inconsistent with n");
  const int d = n_coef();
  for (int i = 0; i < n; ++i) {
    if (y[i].size() != t || r[i].rows() != t || r[i].cols() != d) {
      throw BalanceError({meta.ids.empty() ? std::to_string(i) : meta.ids[i]});
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(r[i].transpose() * r[i]);
    const auto& ev = es.eigenvalues();
    if (ev(0) <= pd_tol * std::max(ev(d - 1), 0.0)) throw SingularDesignError(i);
  }
  if (!m.empty()) {
    if (static_cast<int>(m.size()) != n) throw ParseError("homogeneous block inconsistent");
    for (int i = 0; i < n; ++i)
      if (m[i].rows() != t) throw BalanceError({std::to_string(i)});
  }
  if (!weights.empty()) {
    double s = 0;
    for (double w : weights) {
      if (w < 0) throw ParseError("negative weight");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ParseError("weights must sum to 1");
  }
}

PanelDataset load_panel_csv(const std::string& path, const PanelSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file '" + path + "'");
  auto header = split_csv_line(line);
  std::map<std::string, int> col;
  for (size_t j = 0; j < header.size(); ++j) col[header[j]] = static_cast<int>(j);

  auto need = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw ParseError("missing column '" + name + "' in header");
    return it->second;
  };
  const int cid = need(schema.id);
  const int ctime = need(schema.time);
  const int cy = need(schema.y);

  std::vector<RegressorTerm> rterms, mterms;
  for (const auto& s : schema.regressors) rterms.push_back(parse_regressor(s));
  for (const auto& s : schema.homogeneous) mterms.push_back(parse_regressor(s));
  int max_lag = 0;
  for (const auto& t : rterms)
    if (t.kind == RegressorTerm::Kind::Lag) max_lag = std::max(max_lag, t.lag);
  for (const auto& t : mterms)
    if (t.kind == RegressorTerm::Kind::Lag) max_lag = std::max(max_lag, t.lag);

  // collect raw rows: id -> period -> (row values by column name)
  struct Row {
    double y;
    std::map<std::string, double> vals;
  };
  std::map<std::string, std::map<long, Row>> raw;
  std::vector<std::string> id_order;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError("row " + std::to_string(lineno) + " has " + std::to_string(f.size()) +
                           " fields, header has " + std::to_string(header.size()),
                       lineno);
    auto num = [&](int j) {
      try {
        size_t pos = 0;
        double v = std::stod(f[j], &pos);
        if (pos != f[j].size()) throw std::invalid_argument("trailing");
        return v;
      } catch (...) {
        throw ParseError("non-numeric cell '" + f[j] + "' in column '" + header[j] +
                             "' at row " + std::to_string(lineno),
                         lineno);
      }
    };
    std::string id = f[cid];
    long period = 0;
    try {
      period = std::stol(f[ctime]);
    } catch (...) {
      throw ParseError("non-integer period '" + f[ctime] + "' at row " + std::to_string(lineno),
                       lineno);
    }
    if (raw.find(id) == raw.end()) id_order.push_back(id);
    auto& per_id = raw[id];
    if (per_id.count(period)) throw DuplicateError(id, period);
    Row row;
    row.y = num(cy);
    for (size_t j = 0; j < header.size(); ++j)
      if (static_cast<int>(j) != cid && static_cast<int>(j) != ctime) row.vals[header[j]] = num(j);
    row.vals[schema.y] = row.y;
    per_id[period] = std::move(row);
  }
  if (raw.empty()) throw ParseError("no data rows in '" + path + "'");

  // balance check against the union of observed periods
  std::vector<long> all_periods;
  for (auto& [id, rows] : raw)
    for (auto& [p, _] : rows)
      if (std::find(all_periods.begin(), all_periods.end(), p) == all_periods.end())
        all_periods.push_back(p);
  std::sort(all_periods.begin(), all_periods.end());
  std::vector<std::string> bad;
  for (auto& id : id_order)
    if (raw[id].size() != all_periods.size()) bad.push_back(id);
  if (!bad.empty()) throw BalanceError(bad);

  const int T_obs = static_cast<int>(all_periods.size());
  if (T_obs <= max_lag)
    throw ParseError("not enough periods (" + std::to_string(T_obs) + ") for max lag " +
                     std::to_string(max_lag));
  const int T = T_obs - max_lag;  // first max_lag periods become initial conditions

  // ids sorted: keep numeric order when all ids are integers, else lexicographic
  std::vector<std::string> ids = id_order;
  bool all_int = std::all_of(ids.begin(), ids.end(), [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
             return std::isdigit(c) || c == '-';
           });
  });
  if (all_int)
    std::sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
      return std::stol(a) < std::stol(b);
    });
  else
    std::sort(ids.begin(), ids.end());

  PanelDataset data;
  data.n = static_cast<int>(ids.size());
  data.t = T;
  data.meta.ids = ids;
  data.meta.periods.assign(all_periods.begin() + max_lag, all_periods.end());
  for (const auto& s : schema.regressors) data.meta.r_names.push_back(s);
  for (const auto& s : schema.homogeneous) data.meta.m_names.push_back(s);

  auto fill = [&](const std::map<long, Row>& rows, const std::vector<RegressorTerm>& terms,
                  Mat& out) {
    out.resize(T, static_cast<int>(terms.size()));
    for (int ti = 0; ti < T; ++ti) {
      for (size_t j = 0; j < terms.size(); ++j) {
        const auto& term = terms[j];
        double v = 0;
        if (term.kind == RegressorTerm::Kind::Constant) {
          v = 1.0;
        } else {
          int obs_index = ti + max_lag - (term.kind == RegressorTerm::Kind::Lag ? term.lag : 0);
          const Row& row = rows.at(all_periods[obs_index]);
          auto it = row.vals.find(term.column);
          if (it == row.vals.end())
            throw ParseError("unknown regressor column '" + term.column + "'");
          v = it->second;
        }
        out(ti, static_cast<int>(j)) = v;
      }
    }
  };

  for (const auto& id : ids) {
    const auto& rows = raw[id];
    Vec yi(T);
    for (int ti = 0; ti < T; ++ti) yi(ti) = rows.at(all_periods[ti + max_lag]).y;
    data.y.push_back(std::move(yi));
    Mat ri;
    fill(rows, rterms, ri);
    data.r.push_back(std::move(ri));
    if (!mterms.empty()) {
      Mat mi;
      fill(rows, mterms, mi);
      data.m.push_back(std::move(mi));
    }
  }
  return data;
}

int InstrumentSpec::dim_at(int period, int T) const {
  (void)T;
  int d = constant ? 1 : 0;
  for (const auto& h : histories) {
    int depth = h.depth <= 0 ? period : h.depth;
    d += std::min(depth, period);
  }
  return d;
}

int InstrumentSpec::total_dim(int T) const {
  int L = 0;
  for (int t = 1; t <= T; ++t) L += dim_at(t, T);
  return L;
}

InstrumentBlocks build_instruments(const PanelDataset& data, const InstrumentSpec& spec) {
  const int T = data.t;
  InstrumentBlocks blocks;
  blocks.dims.resize(T);
  blocks.offsets.resize(T);
  int off = 0;
  for (int t = 1; t <= T; ++t) {
    blocks.dims[t - 1] = spec.dim_at(t, T);
    blocks.offsets[t - 1] = off;
    off += blocks.dims[t - 1];
  }
  blocks.total = off;

  for (int t = 1; t <= T; ++t) {
    if (spec.constant) blocks.row_labels.emplace_back(t, "1");
    for (const auto& h : spec.histories) {
      int depth = h.depth <= 0 ? t : h.depth;
      for (int k = 0; k < std::min(depth, t); ++k) {
        std::string name = data.meta.r_names.empty()
                               ? "r" + std::to_string(h.column)
                               : data.meta.r_names[h.column];
        blocks.row_labels.emplace_back(t, name + "[t-" + std::to_string(k) + "]");
      }
    }
  }

  auto s_entries = [&](int i, int t) {  // t is 1-based
    std::vector<double> v;
    if (spec.constant) v.push_back(1.0);
    for (const auto& h : spec.histories) {
      int depth = h.depth <= 0 ? t : h.depth;
      for (int k = 0; k < std::min(depth, t); ++k)
        v.push_back(data.r[i](t - 1 - k, h.column));
    }
    return v;
  };

  blocks.s.resize(data.n);
  for (int i = 0; i < data.n; ++i) {
    Mat s = Mat::Zero(blocks.total, T);
    for (int t = 1; t <= T; ++t) {
      auto v = s_entries(i, t);
      for (size_t k = 0; k < v.size(); ++k) s(blocks.offsets[t - 1] + k, t - 1) = v[k];
    }
    blocks.s[i] = std::move(s);
  }

  if (spec.screen == InstrumentSpec::Screen::Off) return blocks;

  // Assumption-3 screen: the stacked blocks R_i'S_i' must have full column
  // rank; equivalently sum_i w_i S_iR_iR_i'S_i' must be positive definite.
  // A near-null vector's largest entry names the redundant instrument row.
  auto screen_matrix = [&]() {
    Mat msc = Mat::Zero(blocks.total, blocks.total);
    for (int i = 0; i < data.n; ++i) {
      Mat sr = blocks.s[i] * data.r[i];
      msc.noalias() += data.weight(i) * sr * sr.transpose();
    }
    return msc;
  };

  std::vector<int> keep(blocks.total);
  for (int k = 0; k < blocks.total; ++k) keep[k] = k;
  Mat msc = screen_matrix();
  while (true) {
    Mat sub(keep.size(), keep.size());
    for (size_t a = 0; a < keep.size(); ++a)
      for (size_t b = 0; b < keep.size(); ++b) sub(a, b) = msc(keep[a], keep[b]);
    Eigen::SelfAdjointEigenSolver<Mat> es(sub);
    const auto& ev = es.eigenvalues();
    if (ev(0) > spec.screen_tol * std::max(ev(ev.size() - 1), 1e-300)) break;
    Vec a = es.eigenvectors().col(0);
    int local;
    a.cwiseAbs().maxCoeff(&local);
    int row = keep[local];
    const auto& lbl = blocks.row_labels[row];
    if (spec.screen == InstrumentSpec::Screen::Error) {
      throw RankDeficiencyError(lbl.first, row,
                                "instrument entry '" + lbl.second + "' in S_it for t=" +
                                    std::to_string(lbl.first) + " is redundant (Assumption 3)");
    }
    blocks.dropped.push_back(lbl.second + " @t=" + std::to_string(lbl.first));
    keep.erase(keep.begin() + local);
    if (keep.empty()) throw RankDeficiencyError(0, 0, "all instrument entries redundant");
  }

  if (blocks.dropped.empty()) return blocks;

  // rebuild S_i, dims, offsets with surviving rows
  std::vector<int> new_dims(T, 0);
  std::vector<std::pair<int, std::string>> new_labels;
  for (int k : keep) {
    new_dims[blocks.row_labels[k].first - 1] += 1;
    new_labels.push_back(blocks.row_labels[k]);
  }
  InstrumentBlocks out;
  out.dims = new_dims;
  out.offsets.resize(T);
  int o2 = 0;
  for (int t = 0; t < T; ++t) {
    out.offsets[t] = o2;
    o2 += new_dims[t];
  }
  out.total = o2;
  out.row_labels = std::move(new_labels);
  out.dropped = blocks.dropped;
  out.s.resize(data.n);
  for (int i = 0; i < data.n; ++i) {
    Mat s(out.total, T);
    for (size_t a = 0; a < keep.size(); ++a) s.row(a) = blocks.s[i].row(keep[a]);
    out.s[i] = std::move(s);
  }
  return out;
}

Vec individual_ols(const PanelDataset& data, int i) {
  Mat gram = data.r[i].transpose() * data.r[i];
  Eigen::LDLT<Mat> ldlt(gram);
  Eigen::SelfAdjointEigenSolver<Mat> es(gram);
  const auto& ev = es.eigenvalues();
  if (ldlt.info() != Eigen::Success || ev(0) <= 1e-12 * std::max(ev(ev.size() - 1), 0.0))
    throw SingularDesignError(i);
  return ldlt.solve(data.r[i].transpose() * data.y[i]);
}

IndividualMoments compute_individual_moments(const PanelDataset& data,
                                             const InstrumentBlocks& blocks, int i) {
  IndividualMoments im;
  const Mat& R = data.r[i];
  const Vec& Y = data.y[i];
  const Mat& S = blocks.s[i];
  im.gram = R.transpose() * R;
  Eigen::LDLT<Mat> ldlt(im.gram);
  if (ldlt.info() != Eigen::Success) throw SingularDesignError(i);
  const int d = static_cast<int>(R.cols());
  im.gram_inv = ldlt.solve(Mat::Identity(d, d));
  im.rty = R.transpose() * Y;
  im.bhat = im.gram_inv * im.rty;
  im.m0 = im.rty.dot(im.bhat);
  im.sr = S * R;
  im.sy = S * Y;
  im.ps = im.sr * im.gram_inv;
  im.proj_ss = im.ps * im.sr.transpose();
  im.proj_sy = im.ps * im.rty;
  if (data.has_homogeneous()) {
    const Mat& M = data.m[i];
    Mat mr = M.transpose() * R;  // (q_m+p_m) x (q+p)
    im.pm = mr * im.gram_inv;
    im.vm = im.pm * mr.transpose();
    im.ym = im.pm * im.rty;
    im.y_m = M.transpose() * Y;
    im.c_script = im.ps * mr.transpose();
    im.c_plain = S * M;
    im.m0_mat = M.transpose() * M;
  }
  return im;
}

namespace {

// Flat packing so the pairwise reduction runs over plain vectors.
struct Packer {
  static long packed_size(int L, int d, int dm) {
    long base = (long)L * L + L + d + 1 + d + (long)L * d + L + L + d + (long)d * d;
    if (dm > 0) base += (long)dm * dm + dm + (long)dm * d + dm + (long)L * dm + (long)L * dm +
                        (long)dm * dm;
    return base;
  }

  static void pack(const IndividualMoments& im, double w, const Vec& e, Vec& out) {
    long k = 0;
    auto put_mat = [&](const Mat& m) {
      Eigen::Map<const Vec> v(m.data(), m.size());
      out.segment(k, m.size()) = w * v;
      k += m.size();
    };
    auto put_vec = [&](const Vec& v) {
      out.segment(k, v.size()) = w * v;
      k += v.size();
    };
    put_mat(im.proj_ss);
    put_vec(Vec(2.0 * im.sy - im.proj_sy));
    put_vec(Vec(im.ps * e));
    out(k++) = w * im.m0;
    out(k++) = w * e.dot(im.bhat);
    put_vec(im.bhat);
    put_mat(im.ps);
    put_vec(im.proj_sy);
    put_vec(im.sy);
    put_mat(im.gram_inv);
    if (im.vm.size() > 0) {
      put_mat(im.vm);
      put_vec(im.ym);
      put_mat(im.pm);
      put_vec(im.y_m);
      put_mat(im.c_script);
      put_mat(im.c_plain);
      put_mat(im.m0_mat);
    }
  }

  static MomentSummary unpack(const Vec& acc, int L, int d, int dm, const Vec& e) {
    MomentSummary ms;
    ms.coef_dim = d;
    ms.instr_dim = L;
    ms.e = e;
    long k = 0;
    auto get_mat = [&](int rows, int cols) {
      Mat m = Eigen::Map<const Mat>(acc.data() + k, rows, cols);
      k += (long)rows * cols;
      return m;
    };
    auto get_vec = [&](int n) {
      Vec v = acc.segment(k, n);
      k += n;
      return v;
    };
    ms.v0 = get_mat(L, L);
    ms.y0 = get_vec(L);
    ms.p0 = get_vec(L);
    ms.m0 = acc(k++);
    ms.b0 = acc(k++);
    ms.bhat = get_vec(d);
    ms.p_s = get_mat(L, d);
    ms.y_script = get_vec(L);
    ms.y_s = get_vec(L);
    ms.r0 = get_mat(d, d);
    if (dm > 0) {
      ms.vm = get_mat(dm, dm);
      ms.ym = get_vec(dm);
      ms.pm = get_mat(dm, d);
      ms.y_m = get_vec(dm);
      ms.c_script = get_mat(L, dm);
      ms.c_plain = get_mat(L, dm);
      ms.m0_mat = get_mat(dm, dm);
    }
    // v0 is an average of symmetric matrices; re-symmetrize rounding residue
    ms.v0 = 0.5 * (ms.v0 + ms.v0.transpose()).eval();
    return ms;
  }
};

}  // namespace

MomentSummary moment_summary(const PanelDataset& data, const InstrumentBlocks& blocks,
                             const Vec& e, int threads) {
  const int L = blocks.total;
  const int d = data.n_coef();
  const int dm = data.n_homog();
  if (e.size() != d) throw ConfigError("direction vector e has wrong length");
  const long plen = Packer::packed_size(L, d, dm);

  const size_t block = 512;
  const size_t nblocks = (data.n + block - 1) / block;
  std::vector<Vec> partial(nblocks);
  parallel_for(nblocks, threads, [&](size_t bi) {
    size_t lo = bi * block, hi = std::min<size_t>(data.n, lo + block);
    partial[bi] = pairwise_sum<Vec>(hi - lo, [&](size_t j) {
      size_t i = lo + j;
      IndividualMoments im = compute_individual_moments(data, blocks, static_cast<int>(i));
      Vec v(plen);
      Packer::pack(im, data.weight(static_cast<int>(i)), e, v);
      return v;
    });
  });
  Vec acc = pairwise_sum<Vec>(nblocks, [&](size_t b) { return partial[b]; });
  MomentSummary ms = Packer::unpack(acc, L, d, dm, e);
  ms.n = data.n;
  return ms;
}

std::vector<IndividualMoments> all_individual_moments(const PanelDataset& data,
                                                      const InstrumentBlocks& blocks,
                                                      int threads) {
  std::vector<IndividualMoments> per(data.n);
  parallel_for(data.n, threads,
               [&](size_t i) { per[i] = compute_individual_moments(data, blocks, (int)i); });
  return per;
}

MomentSummary moment_summary_from(const std::vector<IndividualMoments>& per,
                                  const std::vector<int>& idx, const Vec& e) {
  if (per.empty() || idx.empty()) throw ConfigError("empty sample in moment_summary_from");
  const int L = static_cast<int>(per[0].sy.size());
  const int d = static_cast<int>(per[0].bhat.size());
  const int dm = per[0].vm.size() > 0 ? static_cast<int>(per[0].ym.size()) : 0;
  const long plen = Packer::packed_size(L, d, dm);
  const double w = 1.0 / idx.size();
  Vec acc = pairwise_sum<Vec>(idx.size(), [&](size_t j) {
    Vec v(plen);
    Packer::pack(per[idx[j]], w, e, v);
    return v;
  });
  MomentSummary ms = Packer::unpack(acc, L, d, dm, e);
  ms.n = static_cast<int>(idx.size());
  return ms;
}

}  // namespace panelbounds
