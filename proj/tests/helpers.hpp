#pragma once

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "qse/rng.hpp"

namespace testutil {

// Independent central-difference oracle, deliberately separate from the
// library's own grad_check.
inline std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                                   const std::vector<double>& x0, double step) {
  std::vector<double> g(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    std::vector<double> hi = x0, lo = x0;
    hi[i] += step;
    lo[i] -= step;
    g[i] = (f(hi) - f(lo)) / (2.0 * step);
  }
  return g;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), 1e-8});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Brute-force complex DFT of one frame, the oracle for the stft tests.
inline std::vector<std::complex<double>> naive_dft(const std::vector<double>& frame, int fft_size) {
  const int bins = fft_size / 2 + 1;
  std::vector<std::complex<double>> out(bins);
  for (int k = 0; k < bins; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (int n = 0; n < static_cast<int>(frame.size()); ++n) {
      const double ang = -2.0 * M_PI * k * n / fft_size;
      acc += frame[n] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

inline std::vector<double> random_vec(qse::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Scratch directory unique to the current test binary invocation.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    namespace fs = std::filesystem;
    base_ = fs::temp_directory_path() / ("qse-test-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(base_);
    fs::create_directories(base_);
  }
  ~TempDir() { std::filesystem::remove_all(base_); }
  std::string path(const std::string& leaf) const { return (base_ / leaf).string(); }
  std::string root() const { return base_.string(); }

 private:
  std::filesystem::path base_;
};

inline std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace testutil
