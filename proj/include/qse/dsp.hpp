#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "qse/errors.hpp"
#include "qse/tensor.hpp"

namespace qse {

constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
};

// Plain row-major matrix for untaped data (features, phases, spectra).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

struct StftConfig {
  int frame_len = 640;
  int hop = 320;
  int fft_size = 640;

  static StftConfig se() { return {640, 320, 640}; }
  static StftConfig pmos() { return {512, 384, 512}; }

  void validate() const {
    if (!(0 < hop && hop <= frame_len && frame_len <= fft_size))
      throw ConfigError("stft config requires 0 < hop <= frame_len <= fft_size");
  }
  int num_bins() const { return fft_size / 2 + 1; }
  int num_frames(std::size_t len) const {
    if (len < static_cast<std::size_t>(frame_len))
      throw LengthError("signal of " + std::to_string(len) + " samples is shorter than one frame (" +
                        std::to_string(frame_len) + ")");
    return 1 + static_cast<int>((len - frame_len) / hop);
  }
  int synthesis_len(int t_frames) const { return (t_frames - 1) * hop + frame_len; }

  bool operator==(const StftConfig& o) const {
    return frame_len == o.frame_len && hop == o.hop && fft_size == o.fft_size;
  }
};

struct Spectrogram {
  Mat magnitude;  // T x F, nonnegative
  Mat phase;      // T x F, in (-pi, pi]
  StftConfig config;
};

namespace detail {

// Precomputed periodic Hann window and one-sided DFT basis for a config.
struct DftPlan {
  int frame_len = 0;
  int fft_size = 0;
  int bins = 0;
  std::vector<double> window;  // frame_len
  std::vector<double> cos_t;   // bins x fft_size
  std::vector<double> sin_t;   // bins x fft_size
  std::vector<double> scale;   // 1 for DC/Nyquist, 2 otherwise

  const double* cos_row(int f) const { return cos_t.data() + static_cast<std::size_t>(f) * fft_size; }
  const double* sin_row(int f) const { return sin_t.data() + static_cast<std::size_t>(f) * fft_size; }
};

inline const DftPlan& dft_plan(const StftConfig& c) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::unique_ptr<DftPlan>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(c.frame_len, c.fft_size);
  auto it = cache.find(key);
  if (it != cache.end()) return *it->second;

  auto plan = std::make_unique<DftPlan>();
  plan->frame_len = c.frame_len;
  plan->fft_size = c.fft_size;
  plan->bins = c.num_bins();
  plan->window.resize(c.frame_len);
  const double pi = std::acos(-1.0);
  for (int n = 0; n < c.frame_len; ++n)
    plan->window[n] = 0.5 * (1.0 - std::cos(2.0 * pi * n / c.frame_len));  // periodic Hann
  plan->cos_t.resize(static_cast<std::size_t>(plan->bins) * c.fft_size);
  plan->sin_t.resize(static_cast<std::size_t>(plan->bins) * c.fft_size);
  plan->scale.resize(plan->bins);
  for (int f = 0; f < plan->bins; ++f) {
    plan->scale[f] = (f == 0 || 2 * f == c.fft_size) ? 1.0 : 2.0;
    for (int j = 0; j < c.fft_size; ++j) {
      const double ang = 2.0 * pi * f * j / c.fft_size;
      plan->cos_t[static_cast<std::size_t>(f) * c.fft_size + j] = std::cos(ang);
      plan->sin_t[static_cast<std::size_t>(f) * c.fft_size + j] = std::sin(ang);
    }
  }
  const DftPlan& ref = *plan;
  cache.emplace(key, std::move(plan));
  return ref;
}

// Accumulated overlap-add denominator (sum of squared window values).
inline std::vector<double> window_square_sum(const StftConfig& c, int t_frames, int out_len) {
  const DftPlan& plan = dft_plan(c);
  std::vector<double> wsum(out_len, 0.0);
  for (int t = 0; t < t_frames; ++t)
    for (int n = 0; n < c.frame_len; ++n) {
      const int j = t * c.hop + n;
      if (j < out_len) wsum[j] += plan.window[n] * plan.window[n];
    }
  return wsum;
}

// One frame of the one-sided inverse DFT for fixed phase:
//   frame[n] = (1/N) * sum_f scale_f * mag_f * cos(2*pi*f*n/N + theta_f)
inline void inverse_frame(const DftPlan& plan, const double* mag, const double* phase, double* frame) {
  const int n_fft = plan.fft_size;
  for (int n = 0; n < plan.frame_len; ++n) frame[n] = 0.0;
  for (int f = 0; f < plan.bins; ++f) {
    const double a = plan.scale[f] * mag[f] * std::cos(phase[f]) / n_fft;
    const double b = plan.scale[f] * mag[f] * std::sin(phase[f]) / n_fft;
    if (a == 0.0 && b == 0.0) continue;
    const double* ct = plan.cos_row(f);
    const double* st = plan.sin_row(f);
    for (int n = 0; n < plan.frame_len; ++n) frame[n] += a * ct[n] - b * st[n];
  }
}

}  // namespace detail

inline Spectrogram stft(const Waveform& w, const StftConfig& c) {
  c.validate();
  const int t_frames = c.num_frames(w.samples.size());
  const detail::DftPlan& plan = detail::dft_plan(c);
  const int bins = plan.bins;
  Spectrogram out;
  out.config = c;
  out.magnitude = Mat(t_frames, bins);
  out.phase = Mat(t_frames, bins);
  const double pi = std::acos(-1.0);
  std::vector<double> frame(c.frame_len);
  for (int t = 0; t < t_frames; ++t) {
    for (int n = 0; n < c.frame_len; ++n) frame[n] = w.samples[t * c.hop + n] * plan.window[n];
    for (int f = 0; f < bins; ++f) {
      const double* ct = plan.cos_row(f);
      const double* st = plan.sin_row(f);
      double re = 0.0, im = 0.0;
      for (int n = 0; n < c.frame_len; ++n) {
        re += frame[n] * ct[n];
        im -= frame[n] * st[n];
      }
      out.magnitude.at(t, f) = std::hypot(re, im);
      double ph = (re == 0.0 && im == 0.0) ? 0.0 : std::atan2(im, re);
      if (ph == -pi) ph = pi;
      out.phase.at(t, f) = ph;
    }
  }
  return out;
}

// Weighted overlap-add synthesis from magnitude+phase; exact wherever the
// window coverage is nonzero, 0 where it is not (the very first sample).
inline std::vector<double> synth_ola(const Mat& mag, const Mat& phase, const StftConfig& c, int out_len) {
  c.validate();
  if (mag.rows != phase.rows || mag.cols != phase.cols)
    throw ShapeError("magnitude and phase shapes disagree");
  if (mag.cols != c.num_bins()) throw ShapeError("spectrogram bin count does not match config");
  const detail::DftPlan& plan = detail::dft_plan(c);
  std::vector<double> acc(out_len, 0.0);
  std::vector<double> wsum = detail::window_square_sum(c, mag.rows, out_len);
  std::vector<double> frame(c.frame_len);
  for (int t = 0; t < mag.rows; ++t) {
    detail::inverse_frame(plan, &mag.data[static_cast<std::size_t>(t) * mag.cols],
                          &phase.data[static_cast<std::size_t>(t) * phase.cols], frame.data());
    for (int n = 0; n < c.frame_len; ++n) {
      const int j = t * c.hop + n;
      if (j < out_len) acc[j] += plan.window[n] * frame[n];
    }
  }
  for (int j = 0; j < out_len; ++j) acc[j] = wsum[j] > 0.0 ? acc[j] / wsum[j] : 0.0;
  return acc;
}

inline Waveform istft(const Spectrogram& s) {
  Waveform w;
  w.sample_rate = kSampleRate;
  w.samples = synth_ola(s.magnitude, s.phase, s.config, s.config.synthesis_len(s.magnitude.rows));
  return w;
}

inline Waveform reconstruct_with_phase(const Mat& mag, const Mat& phase, const StftConfig& c) {
  for (double v : mag.data)
    if (v < 0.0) throw ContractViolation("reconstruct_with_phase requires nonnegative magnitudes");
  Waveform w;
  w.sample_rate = kSampleRate;
  w.samples = synth_ola(mag, phase, c, c.synthesis_len(mag.rows));
  return w;
}

// Taped variant: same synthesis, recorded as a single linear node so the
// sample-domain loss backpropagates into the magnitude estimate.
inline Tensor reconstruct_with_phase(Tape& tape, Tensor mag, const Mat& phase, const StftConfig& c) {
  c.validate();
  if (mag.shape().size() != 2) throw ShapeError("reconstruct_with_phase expects a T x F magnitude");
  const int t_frames = mag.shape()[0];
  const int bins = mag.shape()[1];
  if (t_frames != phase.rows || bins != phase.cols)
    throw ShapeError("magnitude and phase shapes disagree");
  if (bins != c.num_bins()) throw ShapeError("spectrogram bin count does not match config");
  for (double v : mag.value())
    if (v < 0.0) throw ContractViolation("reconstruct_with_phase requires nonnegative magnitudes");

  const int out_len = c.synthesis_len(t_frames);
  TensorNode* out = tape.new_node("reconstruct_with_phase", {out_len});
  {
    Mat mval(t_frames, bins);
    mval.data = mag.value();
    out->value = synth_ola(mval, phase, c, out_len);
  }
  TensorNode* in = Tape::node(mag);
  const detail::DftPlan* plan = &detail::dft_plan(c);
  auto wsum = std::make_shared<std::vector<double>>(detail::window_square_sum(c, t_frames, out_len));
  // Keep the per-bin cos/sin of the fixed phase for the adjoint.
  auto cph = std::make_shared<std::vector<double>>(phase.data.size());
  auto sph = std::make_shared<std::vector<double>>(phase.data.size());
  for (std::size_t i = 0; i < phase.data.size(); ++i) {
    (*cph)[i] = std::cos(phase.data[i]);
    (*sph)[i] = std::sin(phase.data[i]);
  }
  const int hop = c.hop, frame_len = c.frame_len, fft = c.fft_size;
  return tape.seal(out, {mag}, [out, in, plan, wsum, cph, sph, t_frames, bins, hop, frame_len, fft, out_len] {
    for (int t = 0; t < t_frames; ++t) {
      const double* cp = cph->data() + static_cast<std::size_t>(t) * bins;
      const double* sp = sph->data() + static_cast<std::size_t>(t) * bins;
      double* gm = in->grad.data() + static_cast<std::size_t>(t) * bins;
      for (int n = 0; n < frame_len; ++n) {
        const int j = t * hop + n;
        if (j >= out_len || (*wsum)[j] <= 0.0) continue;
        const double base = plan->window[n] / (*wsum)[j] * out->grad[j];
        if (base == 0.0) continue;
        for (int f = 0; f < bins; ++f) {
          const double basis = cp[f] * plan->cos_row(f)[n] - sp[f] * plan->sin_row(f)[n];
          gm[f] += base * plan->scale[f] * basis / fft;
        }
      }
    }
  });
}

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stdev;
};

// Per-utterance, per-frequency mean/variance normalization; constant columns
// normalize to zero via the epsilon floor.
inline Mat mean_var_normalize(const Mat& m, NormStats* stats = nullptr) {
  Mat out(m.rows, m.cols);
  NormStats local;
  local.mean.assign(m.cols, 0.0);
  local.stdev.assign(m.cols, 0.0);
  for (int c = 0; c < m.cols; ++c) {
    double mu = 0.0;
    for (int r = 0; r < m.rows; ++r) mu += m.at(r, c);
    mu /= m.rows;
    double var = 0.0;
    for (int r = 0; r < m.rows; ++r) {
      const double d = m.at(r, c) - mu;
      var += d * d;
    }
    var /= m.rows;
    const double sd = std::sqrt(var);
    const double denom = sd > 1e-12 ? sd : 1.0;
    for (int r = 0; r < m.rows; ++r) out.at(r, c) = (m.at(r, c) - mu) / denom;
    local.mean[c] = mu;
    local.stdev[c] = sd;
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace qse
