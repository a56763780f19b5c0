#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "qse/dsp.hpp"
#include "qse/errors.hpp"
#include "qse/pmos.hpp"

namespace qse {

// Scale-invariant SDR in dB, capped at +/-100 so the zero-error case stays finite.
inline double si_sdr(const std::vector<double>& ref, const std::vector<double>& est) {
  if (ref.size() != est.size())
    throw ShapeError("si_sdr lengths disagree: " + std::to_string(ref.size()) + " vs " +
                     std::to_string(est.size()));
  double rr = 0.0, er = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    rr += ref[i] * ref[i];
    er += est[i] * ref[i];
  }
  if (rr <= 0.0) throw DataError("si_sdr: reference has zero energy");
  const double alpha = er / rr;
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double s = alpha * ref[i];
    const double e = est[i] - s;
    sig += s * s;
    err += e * e;
  }
  if (err == 0.0) return sig == 0.0 ? -100.0 : 100.0;
  if (sig == 0.0) return -100.0;
  const double v = 10.0 * std::log10(sig / err);
  return std::min(100.0, std::max(-100.0, v));
}

inline double spectral_mse(const Mat& a, const Mat& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("spectral_mse shapes disagree");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / a.data.size();
}

inline double mos_lqo(PmosModel& pmos, const Waveform& w) { return pmos_predict(pmos, w); }

struct RegressionMetrics {
  double mae = 0.0, rmse = 0.0, pcc = 0.0, srcc = 0.0;
  bool pcc_defined = false, srcc_defined = false;
};

namespace detail {

// Average ranks with ties sharing their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double shared = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

inline bool pearson(const std::vector<double>& x, const std::vector<double>& y, double& out) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return false;
  out = sxy / std::sqrt(sxx * syy);
  return true;
}

}  // namespace detail

// MAE, (epsilon-insensitive) RMSE, Pearson and Spearman correlations. The
// correlation flags report the constant-vector degenerate cases.
inline RegressionMetrics regression_metrics(const std::vector<double>& pred, const std::vector<double>& truth,
                                            double eps = 0.0) {
  if (pred.size() != truth.size() || pred.empty())
    throw ShapeError("regression_metrics needs equal nonempty prediction/truth lists");
  RegressionMetrics m;
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = std::fabs(pred[i] - truth[i]);
    m.mae += e;
    const double banded = std::max(0.0, e - eps);
    se += banded * banded;
  }
  m.mae /= pred.size();
  m.rmse = std::sqrt(se / pred.size());
  m.pcc_defined = detail::pearson(pred, truth, m.pcc);
  m.srcc_defined = detail::pearson(detail::average_ranks(pred), detail::average_ranks(truth), m.srcc);
  return m;
}

struct UtteranceMetrics {
  std::string id;
  double si_sdr_db = 0.0;
  double spectral_mse = 0.0;
  double mos_lqo = 0.0;
};

inline void write_report(const std::string& path, const std::vector<UtteranceMetrics>& rows) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "# qse-report v1\n";
  os << "# id si_sdr_db spectral_mse mos_lqo\n";
  char num[32];
  auto put = [&](double v) {
    std::snprintf(num, sizeof(num), "%.17g", v);
    os << " " << num;
  };
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
  for (const UtteranceMetrics& r : rows) {
    os << r.id;
    put(r.si_sdr_db);
    put(r.spectral_mse);
    put(r.mos_lqo);
    os << "\n";
    s1 += r.si_sdr_db;
    s2 += r.spectral_mse;
    s3 += r.mos_lqo;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  const double m1 = s1 / n, m2 = s2 / n, m3 = s3 / n;
  double d1 = 0.0, d2 = 0.0, d3 = 0.0;
  for (const UtteranceMetrics& r : rows) {
    d1 += (r.si_sdr_db - m1) * (r.si_sdr_db - m1);
    d2 += (r.spectral_mse - m2) * (r.spectral_mse - m2);
    d3 += (r.mos_lqo - m3) * (r.mos_lqo - m3);
  }
  os << "# mean";
  put(m1);
  put(m2);
  put(m3);
  os << "\n# stddev";
  put(std::sqrt(d1 / n));
  put(std::sqrt(d2 / n));
  put(std::sqrt(d3 / n));
  os << "\n";
  if (!os) throw FormatError("short write to " + path);
}

}  // namespace qse
