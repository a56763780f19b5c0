#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "qse/dsp.hpp"
#include "qse/layers.hpp"

namespace qse {

struct PmosConfig {
  StftConfig stft = StftConfig::pmos();
  int front_dim = 256;
  std::vector<int> pblstm_hidden = {128, 64, 32};
  int reduction = 2;
  int fc_hidden = 32;

  static PmosConfig paper() { return {}; }
  static PmosConfig desk() {
    PmosConfig c;
    c.front_dim = 24;
    c.pblstm_hidden = {8, 6, 4};
    c.fc_hidden = 16;
    return c;
  }

  int bins() const { return stft.num_bins(); }
  int embed_dim() const { return 2 * pblstm_hidden.back(); }
  void validate() const {
    stft.validate();
    if (front_dim < 1 || fc_hidden < 1 || pblstm_hidden.empty())
      throw ConfigError("pmos config dimensions must be positive");
  }
};

struct PmosModel {
  PmosConfig cfg;
  LinearLayer front;   // F -> front_dim
  PblstmStack encoder;
  Param q;             // embed x embed bilinear attention form
  LinearLayer fc1;     // embed -> fc_hidden
  LinearLayer fc2;     // fc_hidden -> 1

  static PmosModel init(const PmosConfig& cfg, Rng& rng) {
    cfg.validate();
    PmosModel m;
    m.cfg = cfg;
    m.front = LinearLayer::init("pmos.front", cfg.bins(), cfg.front_dim, rng);
    m.encoder = PblstmStack::init("pmos.enc", cfg.front_dim, cfg.pblstm_hidden, cfg.reduction, rng);
    const int d = cfg.embed_dim();
    m.q = Param::init_uniform("pmos.q", {d, d}, d, rng);
    m.fc1 = LinearLayer::init("pmos.fc1", d, cfg.fc_hidden, rng);
    m.fc2 = LinearLayer::init("pmos.fc2", cfg.fc_hidden, 1, rng);
    return m;
  }

  void collect(std::vector<Param*>& out) {
    front.collect(out);
    encoder.collect(out);
    out.push_back(&q);
    fc1.collect(out);
    fc2.collect(out);
  }
};

struct BoundPmos {
  BoundLinear front;
  BoundPblstm encoder;
  Tensor q;
  BoundLinear fc1, fc2;
};

inline BoundPmos bind_pmos(Binder& b, PmosModel& m, bool trainable) {
  BoundPmos t;
  t.front = bind_linear(b, m.front, trainable);
  t.encoder = bind_pblstm(b, m.encoder, trainable);
  t.q = b.bind(m.q, trainable);
  t.fc1 = bind_linear(b, m.fc1, trainable);
  t.fc2 = bind_linear(b, m.fc2, trainable);
  return t;
}

// Mean/variance-normalized magnitude features on the PMOS framing.
inline Mat pmos_features(const Waveform& w, const StftConfig& c, NormStats* stats = nullptr) {
  if (w.sample_rate != kSampleRate)
    throw FormatError("expected " + std::to_string(kSampleRate) + " Hz input, got " +
                      std::to_string(w.sample_rate));
  return mean_var_normalize(stft(w, c).magnitude, stats);
}

// Encoder embeddings H: one row per reduced step, dim 2 * last hidden width.
inline Tensor pmos_encode(Tape& tape, const BoundPmos& m, const Mat& feats) {
  if (feats.rows < 1) throw LengthError("pmos_encode on empty feature matrix");
  std::vector<Tensor> frames(feats.rows);
  for (int t = 0; t < feats.rows; ++t) {
    std::vector<double> v(feats.data.begin() + static_cast<std::size_t>(t) * feats.cols,
                          feats.data.begin() + static_cast<std::size_t>(t + 1) * feats.cols);
    frames[t] = linear_apply(tape, m.front, tape.constant({feats.cols}, v));
  }
  return tape.stack_rows(pblstm_forward(tape, m.encoder, frames));
}

// Bilinear self-attention: alpha_{i,k} = softmax_k(h_i^T Q h_k), c_i = sum_k alpha h_k.
inline Tensor pmos_attend(Tape& tape, Tensor h, Tensor q, Tensor* alpha_out = nullptr) {
  Tensor scores = tape.matmul(tape.matmul(h, q), tape.transpose(h));
  Tensor alpha = tape.softmax_last_axis(scores);
  if (alpha_out) *alpha_out = alpha;
  return tape.matmul(alpha, h);
}

// Contexts are mean-pooled before the FC head; output is left unclamped so
// the MOS loss keeps its gradient.
inline Tensor pmos_head(Tape& tape, const BoundPmos& m, Tensor contexts) {
  Tensor pooled = tape.mean_rows(contexts);
  Tensor hidden = tape.tanh_(linear_apply(tape, m.fc1, pooled));
  return linear_apply(tape, m.fc2, hidden);
}

inline Tensor pmos_forward(Tape& tape, const BoundPmos& m, const Mat& feats) {
  Tensor h = pmos_encode(tape, m, feats);
  Tensor contexts = pmos_attend(tape, h, m.q);
  return pmos_head(tape, m, contexts);
}

inline double clamp_mos(double v) { return std::min(10.0, std::max(0.0, v)); }

inline double pmos_predict(PmosModel& model, const Waveform& w) {
  Mat feats = pmos_features(w, model.cfg.stft);
  Tape tape;
  Binder binder(tape);
  BoundPmos bound = bind_pmos(binder, model, false);
  return clamp_mos(pmos_forward(tape, bound, feats).scalar());
}

}  // namespace qse
