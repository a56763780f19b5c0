#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qse/binio.hpp"
#include "qse/dsp.hpp"
#include "qse/rng.hpp"

namespace qse {

// ---- WAV I/O (PCM 16-bit mono only; no silent resampling) --------------------

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (!is) throw FormatError("binary stream truncated");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace detail

inline Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char tag[4];
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != "RIFF") throw FormatError(path + ": missing RIFF header");
  detail::get_u32(is);  // riff size
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != "WAVE") throw FormatError(path + ": not a WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::vector<double> samples;
  bool have_data = false;
  while (is.read(tag, 4)) {
    const std::uint32_t size = detail::get_u32(is);
    const std::string chunk(tag, 4);
    if (chunk == "fmt ") {
      format = detail::get_u16(is);
      channels = detail::get_u16(is);
      rate = detail::get_u32(is);
      detail::get_u32(is);  // byte rate
      detail::get_u16(is);  // block align
      bits = detail::get_u16(is);
      if (size > 16) is.ignore(size - 16);
      have_fmt = true;
    } else if (chunk == "data") {
      if (!have_fmt) throw FormatError(path + ": data chunk precedes fmt chunk");
      if (format != 1) throw FormatError(path + ": audio format " + std::to_string(format) + " (PCM required)");
      if (channels != 1)
        throw FormatError(path + ": " + std::to_string(channels) + " channels (mono required)");
      if (bits != 16) throw FormatError(path + ": bit depth " + std::to_string(bits) + " (16 required)");
      if (rate != kSampleRate)
        throw FormatError(path + ": sample rate " + std::to_string(rate) + " (" + std::to_string(kSampleRate) +
                          " required)");
      const std::uint32_t count = size / 2;
      samples.resize(count);
      for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t raw = detail::get_u16(is);
        samples[i] = static_cast<std::int16_t>(raw) / 32768.0;
      }
      if (size % 2) is.ignore(1);
      have_data = true;
    } else {
      is.ignore(size + (size % 2));  // chunks are word-aligned
    }
  }
  if (!have_data) throw FormatError(path + ": no data chunk");
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples = std::move(samples);
  return w;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  if (w.sample_rate != kSampleRate)
    throw FormatError("write_wav: sample rate " + std::to_string(w.sample_rate) + " (" +
                      std::to_string(kSampleRate) + " required)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  detail::put_u32(os, 16);
  detail::put_u16(os, 1);  // PCM
  detail::put_u16(os, 1);  // mono
  detail::put_u32(os, kSampleRate);
  detail::put_u32(os, kSampleRate * 2);
  detail::put_u16(os, 2);
  detail::put_u16(os, 16);
  os.write("data", 4);
  detail::put_u32(os, data_bytes);
  for (double v : w.samples) {
    long s = std::lround(v * 32768.0);
    s = std::min(32767l, std::max(-32768l, s));
    detail::put_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
  }
  if (!os) throw FormatError("short write to " + path);
}

// ---- mixing -------------------------------------------------------------------

struct MixResult {
  Waveform mixture;
  double gain = 0.0;  // applied to the noise
};

inline MixResult mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db) {
  if (clean.sample_rate != noise.sample_rate) throw FormatError("mix_at_snr: sample rates disagree");
  if (noise.samples.size() < clean.samples.size())
    throw LengthError("mix_at_snr: noise shorter than clean signal");
  double e_clean = 0.0, e_noise = 0.0;
  for (std::size_t i = 0; i < clean.samples.size(); ++i) {
    e_clean += clean.samples[i] * clean.samples[i];
    e_noise += noise.samples[i] * noise.samples[i];
  }
  if (e_clean <= 0.0) throw DataError("mix_at_snr: clean signal has zero energy");
  if (e_noise <= 0.0) throw DataError("mix_at_snr: noise signal has zero energy");
  const double gain = std::sqrt(e_clean / (e_noise * std::pow(10.0, snr_db / 10.0)));
  MixResult out;
  out.gain = gain;
  out.mixture.sample_rate = clean.sample_rate;
  out.mixture.samples.resize(clean.samples.size());
  for (std::size_t i = 0; i < clean.samples.size(); ++i)
    out.mixture.samples[i] = clean.samples[i] + gain * noise.samples[i];
  return out;
}

// ---- synthetic corpus -----------------------------------------------------------

struct Utterance {
  std::string id;
  Waveform clean, noise, mixture;
  double snr_db = 0.0;
  double gain = 1.0;  // mixture == clean + gain * noise, bit-for-bit
  double mos_label = 0.0;
  std::string split = "train";
};

struct SynthSpec {
  int count = 10;
  double snr_lo = -10.0;
  double snr_hi = 11.0;
  double duration_s = 1.0;
};

inline double pseudo_mos_from_snr(double snr_db) {
  return std::min(10.0, std::max(0.0, 5.0 + snr_db / 3.0));
}

namespace detail {

// Voiced-speech stand-in: a few harmonics under raised-cosine bursts.
inline std::vector<double> harmonic_bursts(int len, Rng& rng) {
  const double pi = std::acos(-1.0);
  const double f0 = rng.uniform(100.0, 250.0);
  const int harmonics = 3 + static_cast<int>(rng.uniform() * 3.0);
  std::vector<double> amp(harmonics);
  for (int h = 0; h < harmonics; ++h) amp[h] = rng.uniform(0.4, 1.0) / (h + 1);
  const int bursts = 2 + static_cast<int>(rng.uniform() * 3.0);
  std::vector<double> env(len, 0.0);
  for (int b = 0; b < bursts; ++b) {
    const int width = static_cast<int>(rng.uniform(0.12, 0.3) * kSampleRate);
    const int start = static_cast<int>(rng.uniform() * std::max(1, len - width));
    for (int i = 0; i < width && start + i < len; ++i)
      env[start + i] += 0.5 * (1.0 - std::cos(2.0 * pi * i / width));
  }
  std::vector<double> x(len, 0.0);
  for (int i = 0; i < len; ++i) {
    double s = 0.0;
    for (int h = 0; h < harmonics; ++h) s += amp[h] * std::sin(2.0 * pi * f0 * (h + 1) * i / kSampleRate);
    x[i] = 0.18 * std::min(1.0, env[i]) * s;
  }
  return x;
}

}  // namespace detail

inline std::vector<Utterance> synth_corpus(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.count < 1 || spec.duration_s <= 0.0 || spec.snr_hi < spec.snr_lo)
    throw ConfigError("synth_corpus: invalid counts or ranges");
  const int len = static_cast<int>(spec.duration_s * kSampleRate);
  Rng root(seed);
  std::vector<Utterance> out(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i) + 1);
    Utterance& u = out[i];
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "utt%04d", i);
    u.id = idbuf;
    // stratified SNR coverage across the requested range
    u.snr_db = spec.snr_lo + (spec.snr_hi - spec.snr_lo) * ((i + 0.5) / spec.count);
    u.mos_label = pseudo_mos_from_snr(u.snr_db);

    std::vector<double> clean = detail::harmonic_bursts(len, rng);
    std::vector<double> noise(len);
    for (double& v : noise) v = 0.05 * rng.normal();

    Waveform cw{clean, kSampleRate}, nw{noise, kSampleRate};
    MixResult mix = mix_at_snr(cw, nw, u.snr_db);
    // headroom so 16-bit storage never clips
    double peak = 0.0;
    for (double v : mix.mixture.samples) peak = std::max(peak, std::fabs(v));
    const double scale = peak > 0.95 ? 0.95 / peak : 1.0;

    u.gain = mix.gain * scale;
    u.noise.sample_rate = kSampleRate;
    u.noise.samples = noise;
    u.mixture.sample_rate = kSampleRate;
    u.mixture.samples.resize(len);
    u.clean.sample_rate = kSampleRate;
    u.clean.samples.resize(len);
    for (int j = 0; j < len; ++j) {
      const double scaled_noise = u.gain * noise[j];
      u.mixture.samples[j] = scale * clean[j] + scaled_noise;
      // define clean as the exact residual so the decomposition is bitwise
      u.clean.samples[j] = u.mixture.samples[j] - scaled_noise;
    }
  }
  // deterministic shuffled 70/10/20 assignment
  std::vector<int> order(spec.count);
  for (int i = 0; i < spec.count; ++i) order[i] = i;
  Rng shuffle_rng = root.fork(0x5eed);
  for (int i = spec.count - 1; i > 0; --i) {
    const int j = static_cast<int>(shuffle_rng.uniform() * (i + 1));
    std::swap(order[i], order[std::min(j, i)]);
  }
  const int n_train = static_cast<int>(std::lround(0.7 * spec.count));
  const int n_val = std::max(1, static_cast<int>(std::lround(0.1 * spec.count)));
  for (int k = 0; k < spec.count; ++k) {
    Utterance& u = out[order[k]];
    u.split = k < n_train ? "train" : (k < n_train + n_val ? "validation" : "test");
  }
  return out;
}

// ---- rating aggregation ----------------------------------------------------------

struct AggregateResult {
  std::vector<double> mos;        // 0-10 scale; meaningful only where !excluded
  std::vector<bool> excluded;     // true when z-pruning removed every rating
};

// Z-score pruning per utterance, then corpus-wide min-max onto [0, 10].
inline AggregateResult aggregate_ratings(const std::vector<std::vector<double>>& ratings, double zmax = 2.5) {
  if (ratings.empty()) throw DataError("aggregate_ratings: no utterances");
  std::vector<std::vector<double>> kept(ratings.size());
  AggregateResult res;
  res.mos.assign(ratings.size(), 0.0);
  res.excluded.assign(ratings.size(), false);
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (std::size_t u = 0; u < ratings.size(); ++u) {
    const auto& rs = ratings[u];
    if (rs.empty()) throw DataError("aggregate_ratings: utterance " + std::to_string(u) + " has no ratings");
    double mean = 0.0;
    for (double r : rs) mean += r;
    mean /= rs.size();
    double var = 0.0;
    for (double r : rs) var += (r - mean) * (r - mean);
    var /= rs.size();
    const double sd = std::sqrt(var);
    for (double r : rs)
      if (sd == 0.0 || std::fabs((r - mean) / sd) <= zmax) kept[u].push_back(r);
    if (kept[u].empty()) {
      res.excluded[u] = true;
      continue;
    }
    for (double r : kept[u]) {
      if (!any) {
        lo = hi = r;
        any = true;
      } else {
        lo = std::min(lo, r);
        hi = std::max(hi, r);
      }
    }
  }
  if (!any) throw DataError("aggregate_ratings: every utterance was pruned away");
  for (std::size_t u = 0; u < ratings.size(); ++u) {
    if (res.excluded[u]) continue;
    double acc = 0.0;
    for (double r : kept[u]) acc += hi == lo ? 5.0 : (r - lo) / (hi - lo) * 10.0;
    res.mos[u] = acc / kept[u].size();
  }
  return res;
}

// ---- manifest ----------------------------------------------------------------------

inline void write_corpus(const std::string& dir, const std::vector<Utterance>& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "wav");
  std::ofstream os(fs::path(dir) / "manifest.txt");
  if (!os) throw FormatError("cannot write corpus manifest in " + dir);
  os << "# qse-corpus v1\n";
  os << "# id clean noise mixture snr_db mos_label split\n";
  char num[32];
  for (const Utterance& u : corpus) {
    const std::string base = "wav/" + u.id;
    write_wav((fs::path(dir) / (base + ".clean.wav")).string(), u.clean);
    write_wav((fs::path(dir) / (base + ".noise.wav")).string(), u.noise);
    write_wav((fs::path(dir) / (base + ".mix.wav")).string(), u.mixture);
    os << u.id << " " << base << ".clean.wav " << base << ".noise.wav " << base << ".mix.wav ";
    std::snprintf(num, sizeof(num), "%.17g", u.snr_db);
    os << num << " ";
    std::snprintf(num, sizeof(num), "%.17g", u.mos_label);
    os << num << " " << u.split << "\n";
  }
  if (!os) throw FormatError("short write to corpus manifest in " + dir);
}

inline std::vector<Utterance> load_corpus(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream is(manifest_path);
  if (!is) throw FormatError("cannot open " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Utterance u;
    std::string clean_p, noise_p, mix_p;
    if (!(ls >> u.id >> clean_p >> noise_p >> mix_p >> u.snr_db >> u.mos_label >> u.split))
      throw FormatError("malformed corpus manifest line: " + line);
    u.clean = read_wav((base / clean_p).string());
    u.noise = read_wav((base / noise_p).string());
    u.mixture = read_wav((base / mix_p).string());
    out.push_back(std::move(u));
  }
  if (out.empty()) throw DataError("corpus manifest " + manifest_path + " lists no utterances");
  return out;
}

}  // namespace qse
