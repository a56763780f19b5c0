#pragma once

#include <string>
#include <vector>

#include "qse/dsp.hpp"
#include "qse/layers.hpp"
#include "qse/pmos.hpp"
#include "qse/qsm.hpp"

namespace qse {

struct SeConfig {
  StftConfig stft = StftConfig::se();
  int enc_hidden = 200;  // per direction
  int enc_layers = 2;
  int attn_dim = 64;     // must equal the PMOS embedding dim
  int dec_pre = 400;     // first decoder linear width (tanh)
  int dec_hidden = 200;  // per direction
  int dec_layers = 2;

  static SeConfig paper() { return {}; }
  static SeConfig desk() {
    SeConfig c;
    c.enc_hidden = 16;
    c.attn_dim = 8;
    c.dec_pre = 32;
    c.dec_hidden = 16;
    return c;
  }

  int bins() const { return stft.num_bins(); }
  int embed_dim() const { return 2 * enc_hidden; }  // d_g
  void validate() const {
    stft.validate();
    if (enc_hidden < 1 || enc_layers < 1 || attn_dim < 1 || dec_pre < 1 || dec_hidden < 1 || dec_layers < 1)
      throw ConfigError("se config dimensions must be positive");
  }
};

struct SeModel {
  SeConfig cfg;
  std::vector<BlstmLayer> encoder;
  Param w;             // d_g x d_h alignment form
  LinearLayer ell;     // d_h -> d_h, purely affine
  LinearLayer dec_in;  // (d_h + d_g) -> dec_pre, tanh
  std::vector<BlstmLayer> dec_rnn;
  LinearLayer out;     // 2*dec_hidden -> bins, ReLU

  static SeModel init(const SeConfig& cfg, Rng& rng) {
    cfg.validate();
    SeModel m;
    m.cfg = cfg;
    int d = cfg.bins();
    for (int i = 0; i < cfg.enc_layers; ++i) {
      m.encoder.push_back(BlstmLayer::init("se.enc.l" + std::to_string(i), d, cfg.enc_hidden, rng));
      d = 2 * cfg.enc_hidden;
    }
    m.w = Param::init_uniform("se.w", {cfg.embed_dim(), cfg.attn_dim}, cfg.embed_dim(), rng);
    m.ell = LinearLayer::init("se.ell", cfg.attn_dim, cfg.attn_dim, rng);
    m.dec_in = LinearLayer::init("se.dec_in", cfg.attn_dim + cfg.embed_dim(), cfg.dec_pre, rng);
    d = cfg.dec_pre;
    for (int i = 0; i < cfg.dec_layers; ++i) {
      m.dec_rnn.push_back(BlstmLayer::init("se.dec.l" + std::to_string(i), d, cfg.dec_hidden, rng));
      d = 2 * cfg.dec_hidden;
    }
    m.out = LinearLayer::init("se.out", d, cfg.bins(), rng);
    return m;
  }

  void collect(std::vector<Param*>& out_params) {
    for (BlstmLayer& l : encoder) l.collect(out_params);
    out_params.push_back(&w);
    ell.collect(out_params);
    dec_in.collect(out_params);
    for (BlstmLayer& l : dec_rnn) l.collect(out_params);
    out.collect(out_params);
  }
};

struct BoundSe {
  std::vector<BoundBlstm> encoder;
  Tensor w;
  BoundLinear ell, dec_in;
  std::vector<BoundBlstm> dec_rnn;
  BoundLinear out;
};

inline BoundSe bind_se(Binder& b, SeModel& m, bool trainable) {
  BoundSe t;
  for (BlstmLayer& l : m.encoder) t.encoder.push_back(bind_blstm(b, l, trainable));
  t.w = b.bind(m.w, trainable);
  t.ell = bind_linear(b, m.ell, trainable);
  t.dec_in = bind_linear(b, m.dec_in, trainable);
  for (BlstmLayer& l : m.dec_rnn) t.dec_rnn.push_back(bind_blstm(b, l, trainable));
  t.out = bind_linear(b, m.out, trainable);
  return t;
}

// Mixture magnitudes in, one embedding row per frame out (no time reduction).
inline Tensor se_encode(Tape& tape, const BoundSe& m, const Mat& mag) {
  if (mag.rows < 1) throw LengthError("se_encode on empty spectrogram");
  std::vector<Tensor> frames(mag.rows);
  for (int t = 0; t < mag.rows; ++t) {
    std::vector<double> v(mag.data.begin() + static_cast<std::size_t>(t) * mag.cols,
                          mag.data.begin() + static_cast<std::size_t>(t + 1) * mag.cols);
    frames[t] = tape.constant({mag.cols}, v);
  }
  for (const BoundBlstm& layer : m.encoder) frames = blstm_forward(tape, layer, frames);
  return tape.stack_rows(frames);
}

// Cross attention: alpha_{t,tau} = softmax_tau(g_t^T W h_tau); c_t = sum alpha * ell(h_tau).
inline Tensor cross_attend(Tape& tape, Tensor g, Tensor h, Tensor w, const BoundLinear& ell,
                           Tensor* alpha_out = nullptr) {
  Tensor scores = tape.matmul(tape.matmul(g, w), tape.transpose(h));
  Tensor alpha = tape.softmax_last_axis(scores);
  if (alpha_out) *alpha_out = alpha;
  return tape.matmul(alpha, linear_apply_rows(tape, ell, h));
}

inline Tensor se_decode(Tape& tape, const BoundSe& m, Tensor contexts, Tensor g) {
  Tensor x = tape.tanh_(linear_apply_rows(tape, m.dec_in, tape.concat_cols(contexts, g)));
  std::vector<Tensor> frames(x.shape()[0]);
  for (int t = 0; t < x.shape()[0]; ++t) frames[t] = tape.row(x, t);
  for (const BoundBlstm& layer : m.dec_rnn) frames = blstm_forward(tape, layer, frames);
  return tape.relu(linear_apply_rows(tape, m.out, tape.stack_rows(frames)));
}

// Full SE forward: mixture magnitude + PMOS embeddings -> estimated magnitude.
inline Tensor se_forward(Tape& tape, const BoundSe& m, const Mat& mixture_mag, Tensor pmos_h) {
  Tensor g = se_encode(tape, m, mixture_mag);
  Tensor c = cross_attend(tape, g, pmos_h, m.w, m.ell);
  return se_decode(tape, m, c, g);
}

struct EnhancedUtterance {
  Mat est_magnitude;            // raw decoder output, T x F
  Mat fused_magnitude;          // present (nonempty) only when QSM fusion ran
  QuantizedSpectrogram levels;  // fused level trajectory, empty without fusion
  Waveform waveform;            // reconstruction with the noisy phase
  bool fused = false;
};

// End-to-end enhancement; `qsm` may be null when fusion.mu == 0.
inline EnhancedUtterance enhance(PmosModel& pmos, SeModel& se, const Waveform& mixture,
                                 const TransitionModel* qsm = nullptr, const FusionConfig& fusion = {0.0}) {
  if (mixture.sample_rate != kSampleRate)
    throw FormatError("expected " + std::to_string(kSampleRate) + " Hz input, got " +
                      std::to_string(mixture.sample_rate));
  if (se.cfg.attn_dim != pmos.cfg.embed_dim())
    throw ConfigError("se attention dim " + std::to_string(se.cfg.attn_dim) +
                      " does not match pmos embedding dim " + std::to_string(pmos.cfg.embed_dim()));
  fusion.validate();
  if (fusion.mu > 0.0 && qsm == nullptr)
    throw ConfigError("fusion mu > 0 requires a trained qsm model (set mu to zero without one)");

  Mat pm_feats = pmos_features(mixture, pmos.cfg.stft);
  Spectrogram mix_spec = stft(mixture, se.cfg.stft);

  Tape tape;
  Binder binder(tape);
  BoundPmos bp = bind_pmos(binder, pmos, false);
  BoundSe bs = bind_se(binder, se, false);
  Tensor h = pmos_encode(tape, bp, pm_feats);
  Tensor est = se_forward(tape, bs, mix_spec.magnitude, h);

  EnhancedUtterance out;
  out.est_magnitude = Mat(est.shape()[0], est.shape()[1]);
  out.est_magnitude.data = est.value();

  const Mat* mag_for_wave = &out.est_magnitude;
  if (fusion.mu > 0.0) {
    if (qsm->bins != out.est_magnitude.cols)
      throw ConfigError("qsm model has " + std::to_string(qsm->bins) + " channels, spectrogram has " +
                        std::to_string(out.est_magnitude.cols));
    NormState norm;
    Mat scaled = normalize_scale(out.est_magnitude, qsm->q.range, norm);
    QuantizedSpectrogram fused_levels;
    fused_levels.rows = scaled.rows;
    fused_levels.cols = scaled.cols;
    fused_levels.norm = norm;
    fused_levels.levels.assign(scaled.data.size(), 0);
    std::vector<double> column(scaled.rows);
    for (int f = 0; f < scaled.cols; ++f) {
      for (int t = 0; t < scaled.rows; ++t) column[t] = scaled.at(t, f);
      std::vector<int> path = fuse_decode(column, &qsm->rows[f], qsm->q, fusion);
      for (int t = 0; t < scaled.rows; ++t)
        fused_levels.levels[static_cast<std::size_t>(t) * scaled.cols + f] = path[t];
    }
    out.levels = fused_levels;
    out.fused_magnitude = dequantize(qsm->q, fused_levels);
    out.fused = true;
    mag_for_wave = &out.fused_magnitude;
  }

  out.waveform = reconstruct_with_phase(*mag_for_wave, mix_spec.phase, se.cfg.stft);
  return out;
}

}  // namespace qse
