#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "qse/corpus.hpp"
#include "qse/qsm.hpp"
#include "qse/training.hpp"

namespace qse {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

namespace detail {

inline std::vector<double> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.uniform(-1.0, 1.0);
  return v;
}

inline CheckResult check_gradients() {
  CheckResult res{"gradients", true, ""};
  Rng rng(20240901);
  auto expect = [&](const GradCheckResult& g, double tol, const char* what) {
    if (!g.ok || g.max_rel_error > tol) {
      res.ok = false;
      res.detail += std::string(res.detail.empty() ? "" : "; ") + what + " max_rel_error " +
                    std::to_string(g.max_rel_error) + (g.issue.empty() ? "" : " (" + g.issue + ")");
    }
  };

  // affine + tanh chain
  {
    std::vector<double> w = random_vec(rng, 12), x0 = random_vec(rng, 4);
    auto f = [&](Tape& t, Tensor x) {
      Tensor wm = t.constant({3, 4}, w);
      return t.sum(t.tanh_(t.matvec(wm, x)));
    };
    expect(grad_check(f, {4}, x0, 1e-5), 1e-6, "affine-tanh");
  }
  // one LSTM step w.r.t. its input
  {
    LstmCell cell = LstmCell::init("chk", 3, 4, rng);
    std::vector<double> x0 = random_vec(rng, 3);
    auto f = [&](Tape& t, Tensor x) {
      Binder b(t);
      BoundLstm bc = bind_lstm(b, cell, false);
      LstmState st{t.zeros({4}), t.zeros({4})};
      st = lstm_step(t, bc, x, st);
      return t.sum(st.h);
    };
    expect(grad_check(f, {3}, x0, 1e-5), 1e-4, "lstm-step");
  }
  // self-attention w.r.t. the bilinear form
  {
    std::vector<double> hdata = random_vec(rng, 3 * 4), q0 = random_vec(rng, 16);
    auto f = [&](Tape& t, Tensor q) {
      Tensor h = t.constant({3, 4}, hdata);
      return t.sum(pmos_attend(t, h, q));
    };
    expect(grad_check(f, {4, 4}, q0, 1e-5), 1e-4, "attention-q");
  }
  // clipped SDR w.r.t. the estimate
  {
    std::vector<double> ref = random_vec(rng, 16), e0 = random_vec(rng, 16);
    auto f = [&](Tape& t, Tensor est) { return sdr_loss(t, est, ref, 20.0); };
    expect(grad_check(f, {16}, e0, 1e-6), 1e-4, "sdr-loss");
  }
  // overlap-add resynthesis w.r.t. magnitudes (linear, so near-exact)
  {
    StftConfig c{8, 4, 8};
    Mat phase(3, 5);
    for (double& v : phase.data) v = rng.uniform(-3.0, 3.0);
    std::vector<double> m0(3 * 5);
    for (double& v : m0) v = rng.uniform(0.1, 2.0);
    auto f = [&](Tape& t, Tensor mag) { return t.sum(reconstruct_with_phase(t, mag, phase, c)); };
    expect(grad_check(f, {3, 5}, m0, 1e-5), 1e-6, "resynthesis");
  }
  // combined loss w.r.t. the magnitude estimate
  {
    StftConfig c{8, 4, 8};
    Mat phase(3, 5), ref_mag(3, 5);
    for (double& v : phase.data) v = rng.uniform(-3.0, 3.0);
    for (double& v : ref_mag.data) v = rng.uniform(0.0, 2.0);
    std::vector<double> ref_wave = random_vec(rng, c.synthesis_len(3));
    std::vector<double> m0(3 * 5);
    for (double& v : m0) v = rng.uniform(0.1, 2.0);
    LossConfig lc;
    lc.stage = "joint";
    auto f = [&](Tape& t, Tensor mag) {
      Tensor wave = reconstruct_with_phase(t, mag, phase, c);
      Tensor mos = t.scalar_const(4.2);
      return compute_losses(t, mag, ref_mag, wave, ref_wave, mos, 5.0, lc).combined;
    };
    expect(grad_check(f, {3, 5}, m0, 1e-5), 1e-4, "combined-loss");
  }
  if (res.ok) res.detail = "6 gradient suites within tolerance";
  return res;
}

inline CheckResult check_stft_round_trip() {
  CheckResult res{"stft-round-trip", true, ""};
  Rng rng(7);
  for (const StftConfig& c : {StftConfig::se(), StftConfig::pmos()}) {
    for (int trial = 0; trial < 5; ++trial) {
      Waveform w;
      w.samples = random_vec(rng, 4000 + 320 * trial, 0.5);
      Spectrogram s = stft(w, c);
      Waveform back = istft(s);
      double num = 0.0, den = 0.0;
      for (int i = c.frame_len; i < static_cast<int>(back.samples.size()) - c.frame_len; ++i) {
        const double d = back.samples[i] - w.samples[i];
        num += d * d;
        den += w.samples[i] * w.samples[i];
      }
      const double rel = std::sqrt(num / den);
      if (!(rel <= 1e-6)) {
        res.ok = false;
        res.detail = "interior relative error " + std::to_string(rel);
        return res;
      }
    }
  }
  res.detail = "both configs within 1e-6";
  return res;
}

inline CheckResult check_viterbi() {
  CheckResult res{"viterbi-exact", true, ""};
  Rng rng(99);
  for (int trial = 0; trial < 25; ++trial) {
    Quantizer q;
    q.levels = 2 + static_cast<int>(rng.uniform() * 3.0);  // 2..4
    q.range = 100.0;
    q.step = q.range / q.levels;
    const int t_len = 2 + static_cast<int>(rng.uniform() * 5.0);  // 2..6
    std::map<int, std::map<int, long long>> counts;
    for (int i = 0; i < q.levels; ++i)
      for (int j = 0; j < q.levels; ++j)
        if (rng.uniform() < 0.7) counts[i][j] = 1 + static_cast<int>(rng.uniform() * 4.0);
    std::map<int, SparseRow> channel;
    for (const auto& [from, succ] : counts) channel[from] = good_turing_smooth(succ, q.levels);
    std::vector<double> obs(t_len);
    for (double& v : obs) v = rng.uniform(0.0, q.range);
    FusionConfig cfg;
    cfg.mu = trial % 3 == 0 ? 0.0 : rng.uniform(0.05, 1.5);
    std::vector<int> got = fuse_decode(obs, &channel, q, cfg);
    // exhaustive argmax via the shared scorer
    std::vector<int> path(t_len, 0), best_path;
    double best = 0.0;
    bool first = true;
    while (true) {
      const double s = path_score(obs, path, &channel, q, cfg);
      if (first || s > best) {
        best = s;
        best_path = path;
        first = false;
      }
      int pos = t_len - 1;
      while (pos >= 0 && ++path[pos] == q.levels) path[pos--] = 0;
      if (pos < 0) break;
    }
    if (got != best_path) {
      res.ok = false;
      res.detail = "trial " + std::to_string(trial) + " diverged from enumeration";
      return res;
    }
  }
  res.detail = "25 instances match exhaustive search";
  return res;
}

inline CheckResult check_qsm_rows() {
  CheckResult res{"qsm-model", true, ""};
  Rng rng(123);
  Quantizer q = Quantizer::desk();
  std::vector<QuantizedSpectrogram> corpus;
  for (int u = 0; u < 3; ++u) {
    QuantizedSpectrogram qs;
    qs.rows = 12;
    qs.cols = 5;
    qs.levels.resize(12 * 5);
    for (int& lvl : qs.levels) lvl = static_cast<int>(rng.uniform() * q.levels);
    corpus.push_back(qs);
  }
  TransitionModel model = fit_transitions(corpus, q);
  for (int f = 0; f < model.bins; ++f)
    for (const auto& [from, row] : model.rows[f]) {
      if (std::fabs(row.row_sum(q.levels) - 1.0) > 1e-9) {
        res.ok = false;
        res.detail = "row sum off at channel " + std::to_string(f);
        return res;
      }
      for (int to = 0; to < q.levels; ++to)
        if (!(model.prob(f, from, to) > 0.0)) {
          res.ok = false;
          res.detail = "zero probability at channel " + std::to_string(f);
          return res;
        }
    }
  const std::string tmp = (std::filesystem::temp_directory_path() / "qse_selfcheck.qsm").string();
  save_qsm(tmp, model);
  TransitionModel back = load_qsm(tmp);
  std::string tmp2 = tmp + "2";
  save_qsm(tmp2, back);
  std::ifstream a(tmp, std::ios::binary), b(tmp2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  std::filesystem::remove(tmp);
  std::filesystem::remove(tmp2);
  if (sa != sb || sa.empty()) {
    res.ok = false;
    res.detail = "file round trip not bit-exact";
    return res;
  }
  res.detail = "rows stochastic and file round trip bit-exact";
  return res;
}

inline CheckResult check_determinism() {
  CheckResult res{"determinism", true, ""};
  SynthSpec spec;
  spec.count = 3;
  spec.duration_s = 0.25;
  std::vector<Utterance> a = synth_corpus(spec, 42), b = synth_corpus(spec, 42);
  for (int i = 0; i < spec.count; ++i)
    if (a[i].mixture.samples != b[i].mixture.samples || a[i].clean.samples != b[i].clean.samples) {
      res.ok = false;
      res.detail = "synth_corpus not reproducible";
      return res;
    }
  Rng rng(5);
  PmosModel m = PmosModel::init(PmosConfig::desk(), rng);
  const double p1 = pmos_predict(m, a[0].mixture);
  const double p2 = pmos_predict(m, a[0].mixture);
  if (p1 != p2) {
    res.ok = false;
    res.detail = "pmos_predict not reproducible";
    return res;
  }
  res.detail = "corpus synthesis and inference reproducible";
  return res;
}

}  // namespace detail

inline std::vector<CheckResult> run_self_checks() {
  return {detail::check_gradients(), detail::check_stft_round_trip(), detail::check_viterbi(),
          detail::check_qsm_rows(), detail::check_determinism()};
}

}  // namespace qse
