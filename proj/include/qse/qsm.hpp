#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "qse/binio.hpp"
#include "qse/dsp.hpp"
#include "qse/errors.hpp"

namespace qse {

struct Quantizer {
  double range = 100.0;  // r
  double step = 0.0625;  // chi
  int levels = 1600;     // D = r / chi

  static Quantizer paper() { return {100.0, 0.0625, 1600}; }
  static Quantizer desk() { return {100.0, 6.25, 16}; }

  void validate() const {
    if (levels < 2) throw ConfigError("quantizer needs at least 2 levels");
    if (step <= 0.0 || range <= 0.0) throw ConfigError("quantizer range and step must be positive");
    if (std::fabs(range / step - levels) > 1e-9)
      throw ConfigError("quantizer requires levels == range/step exactly");
  }

  int quantize_value(double v) const {
    if (v < 0.0 || v > range)
      throw ContractViolation("quantize input " + std::to_string(v) + " outside [0, r]");
    const int lvl = static_cast<int>(std::floor(v / step));
    return std::min(lvl, levels - 1);
  }

  double center(int level) const { return (level + 0.5) * step; }
};

struct NormState {
  double lo = 0.0;
  double hi = 0.0;
  bool degenerate = false;  // constant input mapped to all-zero
};

// Per-utterance min-max mapping onto [0, r].
inline Mat normalize_scale(const Mat& mag, double r, NormState& state) {
  for (double v : mag.data)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ContractViolation("normalize_scale requires finite nonnegative magnitudes");
  state = NormState{};
  if (mag.data.empty()) {
    state.degenerate = true;
    return mag;
  }
  state.lo = *std::min_element(mag.data.begin(), mag.data.end());
  state.hi = *std::max_element(mag.data.begin(), mag.data.end());
  Mat out(mag.rows, mag.cols);
  if (state.hi == state.lo) {
    state.degenerate = true;
    return out;  // all zero
  }
  // Ratio first: (v - lo) / (hi - lo) <= 1 holds exactly in floating point,
  // so the result never overshoots r.
  const double span = state.hi - state.lo;
  for (std::size_t i = 0; i < mag.data.size(); ++i) out.data[i] = (mag.data[i] - state.lo) / span * r;
  return out;
}

inline double denormalize_value(double scaled, double r, const NormState& state) {
  if (state.degenerate) return state.lo;
  return scaled * (state.hi - state.lo) / r + state.lo;
}

inline Mat denormalize_scale(const Mat& scaled, double r, const NormState& state) {
  Mat out(scaled.rows, scaled.cols);
  for (std::size_t i = 0; i < scaled.data.size(); ++i)
    out.data[i] = denormalize_value(scaled.data[i], r, state);
  return out;
}

struct QuantizedSpectrogram {
  int rows = 0;
  int cols = 0;
  std::vector<int> levels;  // row-major T x F
  NormState norm;

  int at(int r, int c) const { return levels[static_cast<std::size_t>(r) * cols + c]; }
};

inline QuantizedSpectrogram quantize(const Quantizer& q, const Mat& scaled, const NormState& norm) {
  q.validate();
  QuantizedSpectrogram out;
  out.rows = scaled.rows;
  out.cols = scaled.cols;
  out.norm = norm;
  out.levels.resize(scaled.data.size());
  for (std::size_t i = 0; i < scaled.data.size(); ++i) out.levels[i] = q.quantize_value(scaled.data[i]);
  return out;
}

inline QuantizedSpectrogram quantize_magnitude(const Quantizer& q, const Mat& mag) {
  NormState st;
  Mat scaled = normalize_scale(mag, q.range, st);
  return quantize(q, scaled, st);
}

inline Mat dequantize(const Quantizer& q, const QuantizedSpectrogram& qs) {
  Mat out(qs.rows, qs.cols);
  for (std::size_t i = 0; i < qs.levels.size(); ++i)
    out.data[i] = denormalize_value(q.center(qs.levels[i]), q.range, qs.norm);
  return out;
}

// One smoothed bigram row: explicitly-seen successors plus a shared
// probability for every unseen successor.
struct SparseRow {
  std::vector<std::pair<int, double>> seen;  // (level, probability), sorted by level
  double unseen_mass = 0.0;                  // total probability left for unseen successors

  double prob(int level, int num_levels) const {
    auto it = std::lower_bound(seen.begin(), seen.end(), level,
                               [](const std::pair<int, double>& e, int l) { return e.first < l; });
    if (it != seen.end() && it->first == level) return it->second;
    const int unseen = num_levels - static_cast<int>(seen.size());
    return unseen > 0 ? unseen_mass / unseen : 0.0;
  }

  double row_sum(int num_levels) const {
    double s = unseen_mass;
    for (const auto& [lvl, p] : seen) s += p;
    (void)num_levels;
    return s;
  }
};

// Simple Good-Turing over one predecessor's successor counts.
inline SparseRow good_turing_smooth(const std::map<int, long long>& counts, int num_levels) {
  SparseRow row;
  long long total = 0;
  for (const auto& [lvl, c] : counts)
    if (c > 0) total += c;
  if (total == 0) {
    row.unseen_mass = 1.0;  // nothing observed: uniform back-off
    return row;
  }
  std::map<long long, long long> count_of_counts;
  for (const auto& [lvl, c] : counts)
    if (c > 0) ++count_of_counts[c];
  const long long n1 = count_of_counts.count(1) ? count_of_counts.at(1) : 0;
  const int num_seen = [&] {
    int k = 0;
    for (const auto& [lvl, c] : counts)
      if (c > 0) ++k;
    return k;
  }();
  const int num_unseen = num_levels - num_seen;

  double p0;  // total mass reserved for unseen successors
  if (num_unseen == 0) {
    p0 = 0.0;
  } else if (n1 == 0) {
    p0 = 1.0 / (static_cast<double>(total) + 1.0);  // GT gives zero; keep rows strictly positive
  } else if (n1 == total) {
    p0 = static_cast<double>(n1) / (static_cast<double>(total) + 1.0);  // keep seen mass nonzero
  } else {
    p0 = static_cast<double>(n1) / static_cast<double>(total);
  }

  // Adjusted counts r* = (r+1) N_{r+1} / N_r, falling back to the raw count
  // when no level was seen exactly r+1 times.
  double star_sum = 0.0;
  std::vector<std::pair<int, double>> stars;
  for (const auto& [lvl, c] : counts) {
    if (c <= 0) continue;
    const long long nr = count_of_counts.at(c);
    const long long nr1 = count_of_counts.count(c + 1) ? count_of_counts.at(c + 1) : 0;
    const double star = nr1 > 0 ? (static_cast<double>(c) + 1.0) * nr1 / nr : static_cast<double>(c);
    stars.emplace_back(lvl, star);
    star_sum += star;
  }
  row.seen.reserve(stars.size());
  for (const auto& [lvl, star] : stars) row.seen.emplace_back(lvl, (1.0 - p0) * star / star_sum);
  row.unseen_mass = p0;
  return row;
}

struct TransitionModel {
  Quantizer q;
  int bins = 0;                                 // F
  std::uint32_t smoothing_id = 1;               // 1 = simple Good-Turing
  std::vector<std::map<int, SparseRow>> rows;   // rows[f][from_level]

  // P(to | from) at channel f; unobserved predecessors back off to uniform.
  double prob(int f, int from, int to) const {
    const auto& channel = rows[f];
    auto it = channel.find(from);
    if (it == channel.end()) return 1.0 / q.levels;
    return it->second.prob(to, q.levels);
  }
};

inline TransitionModel fit_transitions(const std::vector<QuantizedSpectrogram>& corpus, const Quantizer& q) {
  q.validate();
  int bins = -1;
  bool any_pair = false;
  for (const QuantizedSpectrogram& u : corpus) {
    if (bins < 0) bins = u.cols;
    if (u.cols != bins) throw ShapeError("fit_transitions: utterances disagree on bin count");
    if (u.rows >= 2) any_pair = true;
  }
  if (corpus.empty() || bins <= 0 || !any_pair)
    throw DataError("fit_transitions needs at least one utterance with two or more frames");

  TransitionModel model;
  model.q = q;
  model.bins = bins;
  model.rows.resize(bins);
  std::vector<std::map<int, std::map<int, long long>>> counts(bins);
  for (const QuantizedSpectrogram& u : corpus)
    for (int t = 0; t + 1 < u.rows; ++t)
      for (int f = 0; f < bins; ++f) ++counts[f][u.at(t, f)][u.at(t + 1, f)];
  for (int f = 0; f < bins; ++f)
    for (const auto& [from, succ] : counts[f]) model.rows[f][from] = good_turing_smooth(succ, q.levels);
  return model;
}

// ---- shallow-fusion decoding -------------------------------------------------

struct FusionConfig {
  double mu = 0.01;
  double sigma = -1.0;  // <= 0 means "one quantization step"
  int beam_width = 8;
  int exact_threshold = 64;

  void validate() const {
    if (mu < 0.0) throw ConfigError("fusion mu must be >= 0");
    if (beam_width < 1) throw ConfigError("fusion beam_width must be >= 1");
  }
  double effective_sigma(const Quantizer& q) const { return sigma > 0.0 ? sigma : q.step; }
};

namespace detail {

inline double acoustic_logscore(const Quantizer& q, double observed, int level, double sigma) {
  const double d = q.center(level) - observed;
  return -(d * d) / (2.0 * sigma * sigma);
}

inline double log_prob_floor(double p) { return std::log(p > 1e-300 ? p : 1e-300); }

}  // namespace detail

// Per-frame nearest bin center under the same score and tie rule the decoder
// uses (equal scores resolve to the lower level).
inline int nearest_level(const Quantizer& q, double v, double sigma) {
  const int guess = std::min(std::max(static_cast<int>(std::floor(v / q.step)), 0), q.levels - 1);
  int best = -1;
  double best_score = 0.0;
  for (int lvl = std::max(0, guess - 1); lvl <= std::min(q.levels - 1, guess + 1); ++lvl) {
    const double s = detail::acoustic_logscore(q, v, lvl, sigma);
    if (best < 0 || s > best_score) {
      best = lvl;
      best_score = s;
    }
  }
  return best;
}

// Maximizes sum_t acoustic(t, d_t) + mu * [log 1/D + sum_t log P(d_t | d_{t-1})]
// over level sequences; exact Viterbi at small D (or wide beams), beam search
// otherwise. `channel` may be null only when mu == 0.
inline std::vector<int> fuse_decode(const std::vector<double>& observed, const std::map<int, SparseRow>* channel,
                                    const Quantizer& q, const FusionConfig& cfg) {
  q.validate();
  cfg.validate();
  if (observed.empty()) throw LengthError("fuse_decode on empty sequence");
  if (cfg.mu > 0.0 && channel == nullptr)
    throw ConfigError("fusion weight mu > 0 requires a transition model");
  const int t_len = static_cast<int>(observed.size());
  const int d = q.levels;
  const double sigma = cfg.effective_sigma(q);
  const double log_uniform = std::log(1.0 / d);

  auto transition = [&](int from, int to) -> double {
    if (cfg.mu == 0.0) return 0.0;
    auto it = channel->find(from);
    const double p = it == channel->end() ? 1.0 / d : it->second.prob(to, d);
    return cfg.mu * detail::log_prob_floor(p);
  };

  const bool exact = d <= cfg.exact_threshold || cfg.beam_width >= d;
  const int beam = exact ? d : std::min(cfg.beam_width, d);

  // active states, sorted by (score desc, level asc)
  struct State {
    int level;
    double score;
  };
  std::vector<State> active;
  std::vector<std::vector<int>> backptr(t_len, std::vector<int>());

  std::vector<State> all(d);
  for (int lvl = 0; lvl < d; ++lvl)
    all[lvl] = {lvl, detail::acoustic_logscore(q, observed[0], lvl, sigma) + cfg.mu * log_uniform};
  auto take_top = [&](std::vector<State>& states) {
    std::stable_sort(states.begin(), states.end(), [](const State& a, const State& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.level < b.level;
    });
    if (static_cast<int>(states.size()) > beam) states.resize(beam);
  };
  take_top(all);
  active = all;

  std::vector<std::vector<State>> kept(t_len);
  kept[0] = active;

  for (int t = 1; t < t_len; ++t) {
    backptr[t].assign(d, -1);
    std::vector<double> best_score(d, 0.0);
    std::vector<bool> reached(d, false);
    for (const State& prev : active) {
      for (int lvl = 0; lvl < d; ++lvl) {
        const double s =
            prev.score + detail::acoustic_logscore(q, observed[t], lvl, sigma) + transition(prev.level, lvl);
        if (!reached[lvl] || s > best_score[lvl]) {
          reached[lvl] = true;
          best_score[lvl] = s;
          backptr[t][lvl] = prev.level;
        }
      }
    }
    std::vector<State> next;
    next.reserve(d);
    for (int lvl = 0; lvl < d; ++lvl)
      if (reached[lvl]) next.push_back({lvl, best_score[lvl]});
    take_top(next);
    active = next;
    kept[t] = active;
  }

  // trace back from the best final state
  std::vector<int> path(t_len);
  path[t_len - 1] = active.front().level;
  for (int t = t_len - 1; t > 0; --t) path[t - 1] = backptr[t][path[t]];
  return path;
}

// Decoded best-path score, accumulated in the same left-to-right order the
// decoder uses (handy for exactness checks against enumeration).
inline double path_score(const std::vector<double>& observed, const std::vector<int>& path,
                         const std::map<int, SparseRow>* channel, const Quantizer& q, const FusionConfig& cfg) {
  const double sigma = cfg.effective_sigma(q);
  const int d = q.levels;
  double s = detail::acoustic_logscore(q, observed[0], path[0], sigma) + cfg.mu * std::log(1.0 / d);
  for (std::size_t t = 1; t < path.size(); ++t) {
    double tr = 0.0;
    if (cfg.mu != 0.0) {
      auto it = channel->find(path[t - 1]);
      const double p = it == channel->end() ? 1.0 / d : it->second.prob(path[t], d);
      tr = cfg.mu * detail::log_prob_floor(p);
    }
    s += detail::acoustic_logscore(q, observed[t], path[t], sigma) + tr;
  }
  return s;
}

// ---- model file --------------------------------------------------------------

constexpr std::uint32_t kQsmFormatVersion = 1;

inline void save_qsm(const std::string& path, const TransitionModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write("QSMF", 4);
  detail::put_u32(os, kQsmFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(model.bins));
  detail::put_u32(os, static_cast<std::uint32_t>(model.q.levels));
  detail::put_f64(os, model.q.range);
  detail::put_f64(os, model.q.step);
  detail::put_u32(os, model.smoothing_id);
  for (int f = 0; f < model.bins; ++f) {
    const auto& channel = model.rows[f];
    detail::put_u32(os, static_cast<std::uint32_t>(channel.size()));
    for (const auto& [from, row] : channel) {
      detail::put_u32(os, static_cast<std::uint32_t>(from));
      detail::put_u32(os, static_cast<std::uint32_t>(row.seen.size()));
      detail::put_f64(os, row.unseen_mass);
      for (const auto& [lvl, p] : row.seen) {
        detail::put_u32(os, static_cast<std::uint32_t>(lvl));
        detail::put_f64(os, p);
      }
    }
  }
  if (!os) throw FormatError("short write to " + path);
}

inline TransitionModel load_qsm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "QSMF") throw FormatError(path + " is not a qsm model file");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kQsmFormatVersion)
    throw ConfigError("qsm format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kQsmFormatVersion) + ")");
  TransitionModel model;
  model.bins = static_cast<int>(detail::get_u32(is));
  model.q.levels = static_cast<int>(detail::get_u32(is));
  model.q.range = detail::get_f64(is);
  model.q.step = detail::get_f64(is);
  model.smoothing_id = detail::get_u32(is);
  model.q.validate();
  model.rows.resize(model.bins);
  for (int f = 0; f < model.bins; ++f) {
    const std::uint32_t nrows = detail::get_u32(is);
    for (std::uint32_t i = 0; i < nrows; ++i) {
      const int from = static_cast<int>(detail::get_u32(is));
      const std::uint32_t nseen = detail::get_u32(is);
      SparseRow row;
      row.unseen_mass = detail::get_f64(is);
      row.seen.reserve(nseen);
      for (std::uint32_t k = 0; k < nseen; ++k) {
        const int lvl = static_cast<int>(detail::get_u32(is));
        const double p = detail::get_f64(is);
        row.seen.emplace_back(lvl, p);
      }
      model.rows[f][from] = std::move(row);
    }
  }
  return model;
}

}  // namespace qse
