// End-to-end acceptance checks. Each criterion prints exactly one PASS/FAIL
// line; the process exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "qse/cli.hpp"

using namespace qse;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename... Args>
std::string fmt(const char* pattern, Args... args) {
  char buf[200];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return buf;
}

int failures = 0;

void report(int criterion, bool ok, const std::string& label, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion-" << criterion << " " << label << ": " << detail << "\n";
  if (!ok) ++failures;
}

// ---- criterion 1: gradient correctness --------------------------------------------

struct GradTally {
  int instances = 0;
  int skipped = 0;
  double worst = 0.0;
  bool ok = true;
  std::string first_issue;

  void add(const GradCheckResult& r, const char* what) {
    ++instances;
    skipped += r.skipped;
    worst = std::max(worst, r.max_rel_error);
    if (!r.ok || r.max_rel_error > 1e-4) {
      if (ok) first_issue = std::string(what) + ": " + (r.issue.empty() ? fmt("err %.3g", r.max_rel_error) : r.issue);
      ok = false;
    }
  }
};

PmosConfig grad_pmos_cfg() {
  PmosConfig c;
  c.stft = {16, 8, 16};
  c.front_dim = 4;
  c.pblstm_hidden = {3, 2};
  c.fc_hidden = 3;
  return c;
}

SeConfig grad_se_cfg() {
  SeConfig c;
  c.stft = {16, 8, 16};
  c.enc_hidden = 2;
  c.enc_layers = 1;
  c.attn_dim = 3;
  c.dec_pre = 4;
  c.dec_hidden = 2;
  c.dec_layers = 1;
  return c;
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  GradTally tally;
  for (std::uint64_t seed = 1; seed <= 21 && tally.ok; ++seed) {
    Rng rng(seed);

    {  // single lstm cell chained over three steps
      LstmCell cell = LstmCell::init("c", 3, 3, rng);
      const std::vector<double> w = testutil::random_vec(rng, 3);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundLstm bc = bind_lstm(b, cell, false);
            LstmState st{tape.zeros({3}), tape.zeros({3})};
            for (int t = 0; t < 3; ++t) st = lstm_step(tape, bc, tape.row(x, t), st);
            return tape.mean(tape.mul(st.h, tape.constant({3}, w)));
          },
          {3, 3}, testutil::random_vec(rng, 9), 1e-5);
      tally.add(r, "lstm");
    }
    {  // one blstm layer
      BlstmLayer layer = BlstmLayer::init("b", 2, 2, rng);
      const std::vector<double> w = testutil::random_vec(rng, 16);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundBlstm bb = bind_blstm(b, layer, false);
            std::vector<Tensor> rows(4);
            for (int t = 0; t < 4; ++t) rows[t] = tape.row(x, t);
            Tensor out = tape.stack_rows(blstm_forward(tape, bb, rows));
            return tape.mean(tape.mul(out, tape.constant({4, 4}, w)));
          },
          {4, 2}, testutil::random_vec(rng, 8), 1e-5);
      tally.add(r, "blstm");
    }
    {  // two pyramid layers with an odd tail
      PblstmStack stack = PblstmStack::init("p", 2, {3, 2}, 2, rng);
      const std::vector<double> w = testutil::random_vec(rng, 8);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundPblstm bp = bind_pblstm(b, stack, false);
            std::vector<Tensor> rows(5);
            for (int t = 0; t < 5; ++t) rows[t] = tape.row(x, t);
            Tensor out = tape.stack_rows(pblstm_forward(tape, bp, rows));
            return tape.mean(tape.mul(out, tape.constant({2, 4}, w)));
          },
          {5, 2}, testutil::random_vec(rng, 10), 1e-5);
      tally.add(r, "pblstm");
    }
    {  // affine layer
      LinearLayer lin = LinearLayer::init("l", 4, 3, rng);
      const std::vector<double> w = testutil::random_vec(rng, 3);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundLinear bl = bind_linear(b, lin, false);
            return tape.mean(tape.mul(linear_apply(tape, bl, x), tape.constant({3}, w)));
          },
          {4}, testutil::random_vec(rng, 4), 1e-5);
      tally.add(r, "linear");
    }
    {  // self-attention wrt the embeddings
      const std::vector<double> qv = testutil::random_vec(rng, 9);
      const std::vector<double> w = testutil::random_vec(rng, 12);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Tensor q = tape.constant({3, 3}, qv);
            return tape.mean(tape.mul(pmos_attend(tape, x, q), tape.constant({4, 3}, w)));
          },
          {4, 3}, testutil::random_vec(rng, 12), 1e-5);
      tally.add(r, "pmos-attend");
    }
    {  // whole MOS model + squared error, gradient taken at the network entrance
      // so it flows through the front layer, the pyramid, attention, and head
      PmosModel model = PmosModel::init(grad_pmos_cfg(), rng);
      Mat feats(6, model.cfg.bins());
      feats.data = testutil::random_vec(rng, feats.data.size());
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundPmos bp = bind_pmos(b, model, false);
            bp.front.w = x;
            Tensor d = tape.sub(pmos_forward(tape, bp, feats), 5.0);
            return tape.mul(d, d);
          },
          model.front.w.shape, model.front.w.value, 1e-5);
      tally.add(r, "pmos-forward");
    }
    {  // cross attention wrt the decoder-side states
      SeModel model = SeModel::init(grad_se_cfg(), rng);
      const std::vector<double> hv = testutil::random_vec(rng, 12);
      const std::vector<double> w = testutil::random_vec(rng, 9);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundSe bs = bind_se(b, model, false);
            Tensor h = tape.constant({4, 3}, hv);
            Tensor c = cross_attend(tape, x, h, bs.w, bs.ell);
            return tape.mean(tape.mul(c, tape.constant({3, 3}, w)));
          },
          {3, 4}, testutil::random_vec(rng, 12), 1e-5);
      tally.add(r, "cross-attend");
    }
    {  // spectral decoder wrt the attention contexts
      SeModel model = SeModel::init(grad_se_cfg(), rng);
      const std::vector<double> gv = testutil::random_vec(rng, 12);
      const std::vector<double> w = testutil::random_vec(rng, 27);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Binder b(tape);
            BoundSe bs = bind_se(b, model, false);
            Tensor g = tape.constant({3, 4}, gv);
            Tensor out = se_decode(tape, bs, x, g);
            return tape.mean(tape.mul(out, tape.constant({3, 9}, w)));
          },
          {3, 3}, testutil::random_vec(rng, 9), 1e-5);
      tally.add(r, "se-decode");
    }
    {  // overlap-add resynthesis wrt the magnitudes
      const StftConfig cfg{8, 4, 8};
      Mat phase(3, 5);
      phase.data = testutil::random_vec(rng, 15, -3.0, 3.0);
      const std::vector<double> w = testutil::random_vec(rng, cfg.synthesis_len(3));
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) {
            Tensor y = reconstruct_with_phase(tape, x, phase, cfg);
            return tape.mean(tape.mul(y, tape.constant({cfg.synthesis_len(3)}, w)));
          },
          {3, 5}, testutil::random_vec(rng, 15, 0.0, 2.0), 1e-5);
      tally.add(r, "ola");
    }
    {  // combined loss wrt each estimated quantity
      Mat ref_mag(2, 3);
      ref_mag.data = testutil::random_vec(rng, 6, 0.0, 2.0);
      const std::vector<double> ref_wave = testutil::random_vec(rng, 6);
      LossConfig loss;
      loss.lambda1 = 0.7;
      loss.lambda2 = 0.4;
      GradCheckResult rm = grad_check(
          [&](Tape& tape, Tensor x) {
            Tensor mos = tape.constant({1}, {4.0});
            return compute_losses(tape, x, ref_mag, tape.constant({6}, ref_wave), ref_wave, mos, 5.0, loss)
                .combined;
          },
          {2, 3}, testutil::random_vec(rng, 6, 0.0, 2.0), 1e-5);
      tally.add(rm, "loss-mag");
      GradCheckResult rw = grad_check(
          [&](Tape& tape, Tensor x) {
            Tensor mag = tape.constant({2, 3}, ref_mag.data);
            Tensor mos = tape.constant({1}, {4.0});
            return compute_losses(tape, mag, ref_mag, x, ref_wave, mos, 5.0, loss).combined;
          },
          {6}, testutil::random_vec(rng, 6), 1e-5);
      tally.add(rw, "loss-wave");
      GradCheckResult ro = grad_check(
          [&](Tape& tape, Tensor x) {
            Tensor mag = tape.constant({2, 3}, ref_mag.data);
            return compute_losses(tape, mag, ref_mag, tape.constant({6}, ref_wave), ref_wave, x, 5.0, loss)
                .combined;
          },
          {1}, testutil::random_vec(rng, 1, 0.0, 10.0), 1e-5);
      tally.add(ro, "loss-mos");
    }
    {  // clipped SDR wrt the estimate
      const std::vector<double> ref = testutil::random_vec(rng, 6);
      GradCheckResult r = grad_check(
          [&](Tape& tape, Tensor x) { return sdr_loss(tape, x, ref); }, {6},
          testutil::random_vec(rng, 6), 1e-5);
      tally.add(r, "sdr");
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = tally.ok && tally.instances >= 21 * 13 && secs < 120.0;
  report(1, ok, "gradients",
         tally.ok ? fmt("%d finite-difference checks, worst rel err %.2e, ", tally.instances, tally.worst) +
                        fmt("%d kink coordinates skipped (%.1f s)", tally.skipped, secs)
                  : tally.first_issue);
}

// ---- criterion 2: stft round trip ---------------------------------------------------

void criterion_stft() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int count = 0;
  Rng rng(2024);
  for (const StftConfig& cfg : {StftConfig::se(), StftConfig::pmos()}) {
    for (int i = 0; i < 25; ++i) {
      const int n = 3 * cfg.frame_len + static_cast<int>(rng.uniform(0.0, 8000.0));
      Waveform w;
      w.samples = testutil::random_vec(rng, n, -0.9, 0.9);
      const Waveform back = istft(stft(w, cfg));
      double num = 0.0, den = 0.0;
      for (int j = cfg.frame_len; j < static_cast<int>(back.samples.size()) - cfg.frame_len; ++j) {
        const double d = back.samples[j] - w.samples[j];
        num += d * d;
        den += w.samples[j] * w.samples[j];
      }
      worst = std::max(worst, std::sqrt(num / den));
      ++count;
    }
  }
  report(2, worst <= 1e-6 && count == 50, "stft-round-trip",
         fmt("50 signals, worst interior rel err %.2e (%.1f s)", worst, seconds_since(t0)));
}

// ---- criterion 3: pyramid reduction -------------------------------------------------

void criterion_pyramid() {
  Rng rng(3);
  int checked = 0;
  for (int reduction : {2, 3}) {
    for (int num_layers = 1; num_layers <= 3; ++num_layers) {
      PblstmStack stack = PblstmStack::init("p", 2, std::vector<int>(num_layers, 2), reduction, rng);
      for (int t_len = 1; t_len <= 64; ++t_len) {
        Tape tape;
        Binder b(tape);
        BoundPblstm bp = bind_pblstm(b, stack, false);
        std::vector<Tensor> rows(t_len);
        for (int t = 0; t < t_len; ++t) rows[t] = tape.constant({2}, testutil::random_vec(rng, 2));
        const std::size_t got = pblstm_forward(tape, bp, rows).size();
        std::size_t want = t_len;
        for (int l = 0; l < num_layers; ++l) want = (want + reduction - 1) / reduction;
        if (got != want) {
          report(3, false, "pyramid-lengths",
                 "T=" + std::to_string(t_len) + " reduction=" + std::to_string(reduction) + " layers=" +
                     std::to_string(num_layers) + ": got " + std::to_string(got) + ", want " + std::to_string(want));
          return;
        }
        ++checked;
      }
    }
  }
  report(3, true, "pyramid-lengths", std::to_string(checked) + " (T, reduction, depth) combinations match the ceil chain");
}

// ---- criterion 4: attention normalization -------------------------------------------

void criterion_attention() {
  double worst = 0.0;
  bool uniform_ok = true;
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const int t_len = 2 + static_cast<int>(rng.uniform(0.0, 5.0));
    const int dim = 2 + static_cast<int>(rng.uniform(0.0, 3.0));
    {
      Tape tape;
      Tensor h = tape.constant({t_len, dim}, testutil::random_vec(rng, t_len * dim));
      Tensor q = tape.constant({dim, dim}, testutil::random_vec(rng, dim * dim));
      Tensor alpha;
      pmos_attend(tape, h, q, &alpha);
      for (int i = 0; i < t_len; ++i) {
        double s = 0.0;
        for (int k = 0; k < t_len; ++k) s += alpha.value()[i * t_len + k];
        worst = std::max(worst, std::fabs(s - 1.0));
      }
      Tensor zq = tape.zeros({dim, dim});
      Tensor alpha0;
      pmos_attend(tape, h, zq, &alpha0);
      for (double v : alpha0.value()) uniform_ok = uniform_ok && v == 1.0 / t_len;
    }
    {
      const int p_len = 2 + static_cast<int>(rng.uniform(0.0, 4.0));
      const int dg = 4, dh = 3;
      Tape tape;
      Binder b(tape);
      SeModel model = SeModel::init(grad_se_cfg(), rng);
      BoundSe bs = bind_se(b, model, false);
      Tensor g = tape.constant({t_len, dg}, testutil::random_vec(rng, t_len * dg));
      Tensor h = tape.constant({p_len, dh}, testutil::random_vec(rng, p_len * dh));
      Tensor alpha;
      cross_attend(tape, g, h, bs.w, bs.ell, &alpha);
      for (int i = 0; i < t_len; ++i) {
        double s = 0.0;
        for (int k = 0; k < p_len; ++k) s += alpha.value()[i * p_len + k];
        worst = std::max(worst, std::fabs(s - 1.0));
      }
      Tensor zw = tape.zeros({dg, dh});
      Tensor alpha0;
      cross_attend(tape, g, h, zw, bs.ell, &alpha0);
      for (double v : alpha0.value()) uniform_ok = uniform_ok && v == 1.0 / p_len;
    }
  }
  report(4, worst <= 1e-12 && uniform_ok, "attention-rows",
         fmt("40 instances, worst row-sum deviation %.2e, zero-form weights exactly uniform: ", worst) +
             (uniform_ok ? "yes" : "NO"));
}

// ---- criterion 5: qsm soundness ------------------------------------------------------

std::map<int, double> gt_oracle(const std::map<int, long long>& counts, int num_levels, double* unseen_per_level) {
  long long total = 0;
  std::map<long long, long long> nr;
  for (const auto& [lvl, c] : counts) {
    total += c;
    ++nr[c];
  }
  const long long n1 = nr.count(1) ? nr[1] : 0;
  const int unseen = num_levels - static_cast<int>(counts.size());
  double p0;
  if (unseen == 0)
    p0 = 0.0;
  else if (n1 == 0)
    p0 = 1.0 / (total + 1.0);
  else if (n1 == total)
    p0 = static_cast<double>(n1) / (total + 1.0);
  else
    p0 = static_cast<double>(n1) / total;
  double star_sum = 0.0;
  std::map<int, double> stars;
  for (const auto& [lvl, c] : counts) {
    const long long nr1 = nr.count(c + 1) ? nr[c + 1] : 0;
    stars[lvl] = nr1 > 0 ? (c + 1.0) * nr1 / nr[c] : static_cast<double>(c);
    star_sum += stars[lvl];
  }
  std::map<int, double> probs;
  for (auto& [lvl, st] : stars) probs[lvl] = (1.0 - p0) * st / star_sum;
  *unseen_per_level = unseen > 0 ? p0 / unseen : 0.0;
  return probs;
}

void criterion_qsm() {
  const Quantizer q = Quantizer::desk();
  Rng rng(5);
  std::vector<QuantizedSpectrogram> corpus;
  for (int u = 0; u < 4; ++u) {
    Mat m(20, 6);
    m.data = testutil::random_vec(rng, m.data.size(), 0.0, 3.0);
    corpus.push_back(quantize_magnitude(q, m));
  }
  const TransitionModel model = fit_transitions(corpus, q);

  double worst_sum = 0.0;
  bool positive = true;
  int rows = 0;
  for (const auto& channel : model.rows)
    for (const auto& [from, row] : channel) {
      ++rows;
      worst_sum = std::max(worst_sum, std::fabs(row.row_sum(q.levels) - 1.0));
      for (int lvl = 0; lvl < q.levels; ++lvl) positive = positive && row.prob(lvl, q.levels) > 0.0;
    }

  bool oracle_ok = true;
  const std::vector<std::map<int, long long>> hand_cases = {
      {{0, 3}, {1, 1}, {2, 1}}, {{2, 1}}, {{0, 2}, {3, 2}}, {{0, 1}, {1, 1}}};
  for (const auto& counts : hand_cases) {
    double unseen = 0.0;
    const auto want = gt_oracle(counts, 16, &unseen);
    const SparseRow row = good_turing_smooth(counts, 16);
    for (const auto& [lvl, p] : want) oracle_ok = oracle_ok && std::fabs(row.prob(lvl, 16) - p) <= 1e-12;
    for (int lvl = 0; lvl < 16; ++lvl)
      if (!want.count(lvl)) oracle_ok = oracle_ok && std::fabs(row.prob(lvl, 16) - unseen) <= 1e-12;
  }

  testutil::TempDir tmp("accept-qsm");
  save_qsm(tmp.path("a.qsm"), model);
  const TransitionModel loaded = load_qsm(tmp.path("a.qsm"));
  save_qsm(tmp.path("b.qsm"), loaded);
  const bool bytes_ok = testutil::slurp(tmp.path("a.qsm")) == testutil::slurp(tmp.path("b.qsm"));

  report(5, worst_sum <= 1e-9 && positive && oracle_ok && bytes_ok, "qsm-soundness",
         fmt("%d smoothed rows, worst sum deviation %.2e; ", rows, worst_sum) +
             std::string(positive ? "all entries positive" : "ZERO ENTRY FOUND") +
             (oracle_ok ? ", oracle matched" : ", ORACLE MISMATCH") +
             (bytes_ok ? ", file round trip byte-exact" : ", FILE ROUND TRIP DIFFERS"));
}

// ---- criterion 6: decoder exactness --------------------------------------------------

std::pair<std::vector<int>, double> enumerate_best(const std::vector<double>& observed,
                                                   const std::map<int, SparseRow>* channel, const Quantizer& q,
                                                   const FusionConfig& cfg) {
  const int t_len = static_cast<int>(observed.size());
  std::vector<int> idx(t_len, 0), best;
  double best_score = -std::numeric_limits<double>::infinity();
  while (true) {
    const double s = path_score(observed, idx, channel, q, cfg);
    if (s > best_score) {
      best_score = s;
      best = idx;
    }
    int pos = t_len - 1;
    while (pos >= 0 && ++idx[pos] == q.levels) idx[pos--] = 0;
    if (pos < 0) break;
  }
  return {best, best_score};
}

void criterion_decode() {
  const auto t0 = Clock::now();
  Rng rng(6);
  int enumerated = 0;
  bool paths_ok = true, mu0_ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    const int d = 2 + static_cast<int>(rng.uniform(0.0, 3.0));
    const int t_len = 2 + static_cast<int>(rng.uniform(0.0, 5.0));
    const Quantizer q{static_cast<double>(d), 1.0, d};
    std::map<int, SparseRow> channel;
    for (int from = 0; from < d; ++from) {
      if (rng.uniform() < 0.15) continue;
      std::map<int, long long> counts;
      for (int to = 0; to < d; ++to)
        if (rng.uniform() < 0.7) counts[to] = 1 + static_cast<int>(rng.uniform(0.0, 6.0));
      if (counts.empty()) counts[from] = 1;
      channel[from] = good_turing_smooth(counts, d);
    }
    FusionConfig cfg;
    cfg.mu = (rep % 4 == 0) ? 0.0 : rng.uniform(0.05, 1.5);
    cfg.sigma = rng.uniform(0.3, 2.0);
    const std::vector<double> observed = testutil::random_vec(rng, t_len, 0.0, q.range);

    const std::vector<int> got = fuse_decode(observed, &channel, q, cfg);
    const auto [best, best_score] = enumerate_best(observed, &channel, q, cfg);
    paths_ok = paths_ok && got == best && path_score(observed, got, &channel, q, cfg) == best_score;
    ++enumerated;

    if (cfg.mu == 0.0) {
      const double sigma = cfg.effective_sigma(q);
      for (std::size_t t = 0; t < observed.size(); ++t)
        mu0_ok = mu0_ok && got[t] == nearest_level(q, observed[t], sigma);
    }
  }
  const double secs = seconds_since(t0);
  report(6, paths_ok && mu0_ok && enumerated == 100 && secs < 60.0, "decoder-exactness",
         std::string(paths_ok ? "100 instances match brute-force enumeration" : "ENUMERATION MISMATCH") +
             (mu0_ok ? ", mu=0 equals nearest-level bit-exactly" : ", MU=0 MISMATCH") + fmt(" (%.1f s)", secs));
}

// ---- criterion 7: loss algebra -------------------------------------------------------

void criterion_losses() {
  Rng rng(7);
  Mat ref_mag(2, 3);
  ref_mag.data = testutil::random_vec(rng, 6, 0.0, 2.0);
  const std::vector<double> est_mag = testutil::random_vec(rng, 6, 0.0, 2.0);
  const std::vector<double> ref_wave = testutil::random_vec(rng, 5);
  const std::vector<double> est_wave = testutil::random_vec(rng, 5);
  const double est_mos = 6.3, ref_mos = 4.1;

  double l_mse = 0.0, l_sa = 0.0;
  for (int i = 0; i < 6; ++i) l_mse += (est_mag[i] - ref_mag.data[i]) * (est_mag[i] - ref_mag.data[i]);
  l_mse /= 6.0;
  for (int i = 0; i < 5; ++i) l_sa += (est_wave[i] - ref_wave[i]) * (est_wave[i] - ref_wave[i]);
  l_sa /= 5.0;
  const double l_mos = (est_mos - ref_mos) * (est_mos - ref_mos);

  double worst = 0.0;
  for (double lambda1 : {0.0, 0.25, 0.5, 0.75, 1.0})
    for (double lambda2 : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      LossConfig cfg;
      cfg.lambda1 = lambda1;
      cfg.lambda2 = lambda2;
      Tape tape;
      TapedLosses got = compute_losses(tape, tape.leaf({2, 3}, est_mag, true), ref_mag,
                                       tape.leaf({5}, est_wave, true), ref_wave,
                                       tape.leaf({1}, {est_mos}, true), ref_mos, cfg);
      const double want = lambda1 * (lambda2 * l_mse + (1.0 - lambda2) * l_sa) + (1.0 - lambda1) * l_mos;
      worst = std::max(worst, std::fabs(got.values().combined - want));
    }

  bool sdr_ok = std::fabs(sdr_loss({10.0, 0.0}, {10.0, 1.0}) - 20.0 * std::tanh(1.0)) <= 1e-12;
  sdr_ok = sdr_ok && std::fabs(sdr_loss({1.0, 0.0}, {1.0, 1.0})) <= 1e-15;
  for (int rep = 0; rep < 40; ++rep) {
    const double v = sdr_loss(testutil::random_vec(rng, 12), testutil::random_vec(rng, 12, -50.0, 50.0));
    sdr_ok = sdr_ok && v > -20.0 && v < 20.0;
  }
  report(7, worst <= 1e-12 && sdr_ok, "loss-algebra",
         fmt("25-point lambda grid, worst deviation %.2e; ", worst) +
             (sdr_ok ? "sdr clipped strictly inside [-20, 20], hand values exact" : "SDR PROPERTY VIOLATED"));
}

// ---- criteria 8 and 9: staged overfit on the desk profile ---------------------------

double eval_split_loss(PmosModel& pmos, SeModel* se, const std::vector<TrainItem>& items,
                       const LossConfig& loss) {
  double sum = 0.0;
  for (const TrainItem& item : items) {
    Tape tape;
    Binder binder(tape);
    BoundPmos bp = bind_pmos(binder, pmos, false);
    Tensor h = pmos_encode(tape, bp, item.pmos_feats);
    Tensor est_mos = pmos_head(tape, bp, pmos_attend(tape, h, bp.q));
    Tensor est_mag, est_wave;
    if (se) {
      BoundSe bs = bind_se(binder, *se, false);
      Tensor g = se_encode(tape, bs, item.se_mag);
      Tensor c = cross_attend(tape, g, h, bs.w, bs.ell);
      est_mag = se_decode(tape, bs, c, g);
      est_wave = reconstruct_with_phase(tape, est_mag, item.se_phase, se->cfg.stft);
    }
    sum += compute_losses(tape, est_mag, item.clean_mag, est_wave, item.clean_wave, est_mos, item.mos_label, loss)
               .values()
               .combined;
  }
  return sum / items.size();
}

void criterion_overfit_and_freeze() {
  const auto t0 = Clock::now();
  SynthSpec spec;
  spec.count = 10;
  spec.duration_s = 1.0;
  spec.snr_hi = -2.0;  // noisy mixtures leave headroom under the noisy-phase ceiling
  const std::vector<Utterance> corpus = synth_corpus(spec, 2718);
  const cli::ProfileDims dims = cli::resolve_profile("desk");

  Rng root(2718);
  Rng pmos_rng = root.fork(1), se_rng = root.fork(2);
  PmosModel pmos = PmosModel::init(dims.pmos, pmos_rng);
  SeConfig se_cfg = dims.se;
  se_cfg.attn_dim = pmos.cfg.embed_dim();
  SeModel se = SeModel::init(se_cfg, se_rng);

  // This is an overfit demonstration: the measured quantities live on the
  // training split, so the stage 1/2 best snapshots are selected on it too.
  const std::vector<TrainItem> train = prepare_items(corpus, "train", pmos.cfg.stft, se.cfg.stft);
  const std::vector<TrainItem> val = prepare_items(corpus, "validation", pmos.cfg.stft, se.cfg.stft);

  // stage 1: MOS predictor alone
  StageOptions s1;
  s1.loss.stage = "pmos-only";
  s1.loss.lambda1 = 0.0;
  s1.lr = 0.02;
  s1.max_epochs = 350;
  s1.patience = 350;
  run_training_stage(s1, pmos, nullptr, train, train);

  std::vector<const Utterance*> train_utts;
  for (const Utterance& u : corpus)
    if (u.split == "train") train_utts.push_back(&u);
  double mae = 0.0;
  for (const Utterance* u : train_utts) mae += std::fabs(pmos_predict(pmos, u->mixture) - u->mos_label);
  mae /= train_utts.size();

  // stage 2: enhancer with the predictor frozen; pure spectral objective.
  // A gentle warmup segment matters: hot starts settle into a basin whose
  // floor is two orders of magnitude worse.
  std::vector<Param*> pmos_params;
  pmos.collect(pmos_params);
  std::vector<double> frozen_before;
  for (const Param* p : pmos_params) frozen_before.insert(frozen_before.end(), p->value.begin(), p->value.end());

  StageOptions s2;
  s2.loss.stage = "se-only";
  s2.loss.lambda1 = 1.0;
  s2.loss.lambda2 = 1.0;
  double mse_first = -1.0, mse_best = std::numeric_limits<double>::infinity();
  const double seg_lr[] = {0.001, 0.005, 0.002, 0.001};
  const int seg_epochs[] = {100, 700, 700, 500};
  for (int seg = 0; seg < 4; ++seg) {
    s2.lr = seg_lr[seg];
    s2.max_epochs = seg_epochs[seg];
    s2.patience = seg_epochs[seg];
    const TrainResult r = run_training_stage(s2, pmos, &se, train, train);
    if (mse_first < 0.0) mse_first = r.history.front().l_mse;
    mse_best = std::min(mse_best, r.history[r.best_epoch - 1].l_mse);
  }
  const double mse_drop = 1.0 - mse_best / mse_first;

  std::vector<double> frozen_after;
  for (const Param* p : pmos_params) frozen_after.insert(frozen_after.end(), p->value.begin(), p->value.end());
  const bool frozen_ok = frozen_before == frozen_after;

  // enhanced training utterances against their mixtures
  FusionConfig no_fusion;
  no_fusion.mu = 0.0;
  bool sdr_ok = true;
  double mean_gain = 0.0;
  for (const Utterance* u : train_utts) {
    EnhancedUtterance enhanced = enhance(pmos, se, u->mixture, nullptr, no_fusion);
    const std::size_t n = enhanced.waveform.samples.size();
    const std::vector<double> clean(u->clean.samples.begin(), u->clean.samples.begin() + n);
    const std::vector<double> mix(u->mixture.samples.begin(), u->mixture.samples.begin() + n);
    const double before = si_sdr(clean, mix);
    const double after = si_sdr(clean, enhanced.waveform.samples);
    sdr_ok = sdr_ok && after > before;
    mean_gain += after - before;
  }
  mean_gain /= train_utts.size();

  // stage 3: joint fine-tune must not degrade the stage-2 objective on the
  // validation split by more than 5%
  const double val_before = eval_split_loss(pmos, &se, val, s2.loss);
  StageOptions s3;
  s3.loss.stage = "joint";
  s3.loss.lambda1 = 0.8;
  s3.loss.lambda2 = 1.0;
  s3.lr = 0.0003;
  s3.max_epochs = 40;
  s3.patience = 40;
  run_training_stage(s3, pmos, &se, train, val);
  const double val_after = eval_split_loss(pmos, &se, val, s2.loss);
  const double ratio = val_after / val_before;

  const double secs = seconds_since(t0);
  const bool a = mae <= 0.1, b = mse_drop >= 0.9, d = ratio <= 1.05;
  report(8, a && b && sdr_ok && d && secs <= 900.0, "desk-overfit",
         fmt("train MAE %.3f, ", mae) + fmt("spectral MSE drop %.1f%%, ", 100.0 * mse_drop) +
             fmt("mean SI-SDR gain %.2f dB", mean_gain) + (sdr_ok ? " (every utterance improved)" : " (REGRESSION)") +
             fmt(", joint/stage-2 val ratio %.3f (%.0f s)", ratio, secs));
  report(9, frozen_ok, "pmos-freeze",
         frozen_ok ? std::to_string(frozen_before.size()) + " parameters bit-identical through stage 2"
                   : "PMOS PARAMETERS CHANGED during se-only training");
}

// ---- criterion 10: end-to-end determinism --------------------------------------------

bool run_pipeline(const std::string& dir, std::string& why) {
  std::ostringstream out, err;
  auto cli = [&](const std::vector<std::string>& args) {
    const int code = run_cli(args, out, err);
    if (code != 0) why = "exit " + std::to_string(code) + ": " + err.str();
    return code == 0;
  };
  const std::string data = dir + "/data", manifest = dir + "/data/manifest.txt";
  return cli({"synth-data", "--out", data, "--synth.count", "6", "--synth.duration", "0.35", "--seed", "17"}) &&
         cli({"train-pmos", "--corpus.manifest", manifest, "--out", dir + "/s1", "--train.max-epochs", "3",
              "--train.patience", "3", "--seed", "17"}) &&
         cli({"train-se", "--corpus.manifest", manifest, "--out", dir + "/s2", "--pmos.checkpoint",
              dir + "/s1/pmos.ckpt", "--train.max-epochs", "3", "--train.patience", "3", "--seed", "17"}) &&
         cli({"train-joint", "--corpus.manifest", manifest, "--out", dir + "/s3", "--pmos.checkpoint",
              dir + "/s1/pmos.ckpt", "--se.checkpoint", dir + "/s2/se.ckpt", "--train.max-epochs", "2",
              "--train.patience", "2", "--seed", "17"}) &&
         cli({"build-qsm", "--corpus.manifest", manifest, "--out", dir + "/model.qsm"}) &&
         cli({"evaluate", "--corpus.manifest", manifest, "--pmos.checkpoint", dir + "/s3/pmos.ckpt",
              "--se.checkpoint", dir + "/s3/se.ckpt", "--qsm.file", dir + "/model.qsm", "--mu", "0.25", "--out",
              dir + "/report.txt"});
}

void criterion_determinism() {
  const auto t0 = Clock::now();
  testutil::TempDir tmp("accept-repro");
  std::string why;
  if (!run_pipeline(tmp.path("a"), why) || !run_pipeline(tmp.path("b"), why)) {
    report(10, false, "determinism", "pipeline failed: " + why);
    return;
  }
  const std::vector<std::string> artifacts = {"/s1/pmos.ckpt",  "/s2/se.ckpt",          "/s3/pmos.ckpt",
                                              "/s3/se.ckpt",    "/s1/history-pmos-only.txt", "/model.qsm",
                                              "/report.txt"};
  for (const std::string& a : artifacts) {
    if (testutil::slurp(tmp.path("a") + a) != testutil::slurp(tmp.path("b") + a)) {
      report(10, false, "determinism", "artifact differs between runs: " + a);
      return;
    }
  }
  report(10, true, "determinism",
         fmt("two pipeline runs, %d artifacts byte-identical (%.0f s)", static_cast<int>(artifacts.size()), seconds_since(t0)));
}

}  // namespace

int main() {
  criterion_gradients();
  criterion_stft();
  criterion_pyramid();
  criterion_attention();
  criterion_qsm();
  criterion_decode();
  criterion_losses();
  criterion_overfit_and_freeze();
  criterion_determinism();
  if (failures) {
    std::cout << failures << " criterion(s) FAILED\n";
    return 1;
  }
  std::cout << "all criteria passed\n";
  return 0;
}
