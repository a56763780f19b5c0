#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "qse/corpus.hpp"
#include "qse/pmos.hpp"
#include "qse/se.hpp"

namespace qse {

struct LossConfig {
  double lambda1 = 0.8;
  double lambda2 = 0.5;
  double sdr_theta = 20.0;
  std::string stage = "joint";  // pmos-only | se-only | joint

  void validate() const {
    if (lambda1 < 0.0 || lambda1 > 1.0 || lambda2 < 0.0 || lambda2 > 1.0)
      throw ConfigError("lambda weights must lie in [0, 1]");
    if (sdr_theta <= 0.0) throw ConfigError("sdr theta must be positive");
    if (stage == "pmos-only") {
      if (lambda1 != 0.0) throw ConfigError("pmos-only stage requires lambda1 == 0");
    } else if (stage == "se-only") {
      if (lambda1 != 1.0) throw ConfigError("se-only stage requires lambda1 == 1");
    } else if (stage == "joint") {
      if (!(lambda1 > 0.0 && lambda1 < 1.0)) throw ConfigError("joint stage requires 0 < lambda1 < 1");
    } else {
      throw ConfigError("unknown stage '" + stage + "'");
    }
  }
};

struct LossBreakdown {
  double l_mse = 0.0, l_sa = 0.0, l_mos = 0.0, combined = 0.0;
};

struct TapedLosses {
  Tensor l_mse, l_sa, l_mos, combined;

  LossBreakdown values() const {
    return {l_mse.scalar(), l_sa.scalar(), l_mos.scalar(), combined.scalar()};
  }
};

// The staged combined loss, assembled literally. Invalid tensors stand for absent pipeline parts
// (e.g. no SE pass in the pmos-only stage) and contribute exact zeros.
inline TapedLosses compute_losses(Tape& tape, Tensor est_mag, const Mat& ref_mag, Tensor est_wave,
                                  const std::vector<double>& ref_wave, Tensor est_mos, double ref_mos,
                                  const LossConfig& cfg) {
  TapedLosses out;
  if (est_mag.valid()) {
    if (est_mag.shape() != Shape{ref_mag.rows, ref_mag.cols})
      throw ShapeError("spectral loss shapes disagree: estimate " + shape_to_string(est_mag.shape()) +
                       ", reference [" + std::to_string(ref_mag.rows) + "x" + std::to_string(ref_mag.cols) + "]");
    Tensor ref = tape.constant({ref_mag.rows, ref_mag.cols}, ref_mag.data);
    Tensor d = tape.sub(est_mag, ref);
    out.l_mse = tape.mean(tape.mul(d, d));
  } else {
    out.l_mse = tape.scalar_const(0.0);
  }
  if (est_wave.valid()) {
    const std::size_t n = est_wave.numel();
    if (ref_wave.size() < n)
      throw ShapeError("reference waveform (" + std::to_string(ref_wave.size()) +
                       " samples) shorter than synthesized estimate (" + std::to_string(n) + ")");
    Tensor ref = tape.constant({static_cast<int>(n)}, std::vector<double>(ref_wave.begin(), ref_wave.begin() + n));
    Tensor d = tape.sub(est_wave, ref);
    out.l_sa = tape.mean(tape.mul(d, d));
  } else {
    out.l_sa = tape.scalar_const(0.0);
  }
  if (est_mos.valid()) {
    Tensor d = tape.sub(est_mos, ref_mos);
    out.l_mos = tape.mul(d, d);
  } else {
    out.l_mos = tape.scalar_const(0.0);
  }
  Tensor se_part = tape.add(tape.mul(out.l_mse, cfg.lambda2), tape.mul(out.l_sa, 1.0 - cfg.lambda2));
  out.combined = tape.add(tape.mul(se_part, cfg.lambda1), tape.mul(out.l_mos, 1.0 - cfg.lambda1));
  return out;
}

// Clipped SDR objective K_theta(10 log10 ||s||^2 / max(||s - s_hat||^2, eps)).
inline Tensor sdr_loss(Tape& tape, Tensor est_wave, const std::vector<double>& ref_wave, double theta = 20.0) {
  if (theta <= 0.0) throw ConfigError("sdr theta must be positive");
  const std::size_t n = est_wave.numel();
  if (ref_wave.size() != n)
    throw ShapeError("sdr_loss lengths disagree: " + std::to_string(ref_wave.size()) + " vs " + std::to_string(n));
  double ref_energy = 0.0;
  for (double v : ref_wave) ref_energy += v * v;
  if (ref_energy <= 0.0) throw DataError("sdr_loss: reference has zero energy");
  Tensor ref = tape.constant({static_cast<int>(n)}, ref_wave);
  Tensor d = tape.sub(est_wave, ref);
  Tensor err = tape.max_scalar(tape.sum(tape.mul(d, d)), 1e-12);
  Tensor ratio = tape.div(tape.scalar_const(ref_energy), err);
  Tensor sdr_db = tape.mul(tape.log_(ratio), 10.0 / std::log(10.0));
  return tape.mul(tape.tanh_(tape.div(sdr_db, theta)), theta);
}

inline double sdr_loss(const std::vector<double>& ref_wave, const std::vector<double>& est_wave,
                       double theta = 20.0) {
  Tape tape;
  Tensor est = tape.constant({static_cast<int>(est_wave.size())}, est_wave);
  return sdr_loss(tape, est, ref_wave, theta).scalar();
}

// ---- Adam ------------------------------------------------------------------------

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<Param*>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const Param* p : params) {
      m.emplace_back(p->value.size(), 0.0);
      v.emplace_back(p->value.size(), 0.0);
    }
  }
};

inline void adam_step(const std::vector<Param*>& params, AdamState& st) {
  if (st.m.size() != params.size()) throw ContractViolation("adam state does not match parameter list");
  for (const Param* p : params)
    for (double g : p->grad)
      if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient in " + p->name);
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      st.m[i][k] = st.beta1 * st.m[i][k] + (1.0 - st.beta1) * g;
      st.v[i][k] = st.beta2 * st.v[i][k] + (1.0 - st.beta2) * g * g;
      const double mhat = st.m[i][k] / bc1;
      const double vhat = st.v[i][k] / bc2;
      p.value[k] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

// ---- staged training ----------------------------------------------------------------

// Per-utterance features, computed once and reused every epoch.
struct TrainItem {
  std::string id;
  Mat pmos_feats;                  // mean/var-normalized PMOS-config magnitudes
  Mat se_mag, se_phase;            // mixture on the SE config
  Mat clean_mag;                   // clean reference magnitudes, SE config
  std::vector<double> clean_wave;  // clean reference samples
  double mos_label = 0.0;
};

inline TrainItem prepare_item(const Utterance& u, const StftConfig& pmos_stft, const StftConfig& se_stft) {
  TrainItem item;
  item.id = u.id;
  item.pmos_feats = pmos_features(u.mixture, pmos_stft);
  Spectrogram mix = stft(u.mixture, se_stft);
  item.se_mag = std::move(mix.magnitude);
  item.se_phase = std::move(mix.phase);
  item.clean_mag = stft(u.clean, se_stft).magnitude;
  item.clean_wave = u.clean.samples;
  item.mos_label = u.mos_label;
  return item;
}

inline std::vector<TrainItem> prepare_items(const std::vector<Utterance>& corpus, const std::string& split,
                                            const StftConfig& pmos_stft, const StftConfig& se_stft) {
  std::vector<TrainItem> out;
  for (const Utterance& u : corpus)
    if (u.split == split) out.push_back(prepare_item(u, pmos_stft, se_stft));
  return out;
}

struct StageOptions {
  LossConfig loss;
  double lr = 0.001;
  int max_epochs = 50;
  int patience = 5;
};

struct EpochRecord {
  int epoch = 0;
  std::string stage;
  double l_mse = 0.0, l_sa = 0.0, l_mos = 0.0, combined = 0.0, val_combined = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
};

namespace detail {

inline LossBreakdown stage_forward(PmosModel& pmos, SeModel* se, const TrainItem& item, const LossConfig& loss,
                                   bool train_pmos, bool train_se, const std::vector<Param*>& trainable,
                                   AdamState* opt) {
  Tape tape;
  Binder binder(tape);
  BoundPmos bp = bind_pmos(binder, pmos, train_pmos);
  Tensor h = pmos_encode(tape, bp, item.pmos_feats);
  Tensor est_mos = pmos_head(tape, bp, pmos_attend(tape, h, bp.q));
  Tensor est_mag, est_wave;
  if (se) {
    BoundSe bs = bind_se(binder, *se, train_se);
    Tensor g = se_encode(tape, bs, item.se_mag);
    Tensor c = cross_attend(tape, g, h, bs.w, bs.ell);
    est_mag = se_decode(tape, bs, c, g);
    est_wave = reconstruct_with_phase(tape, est_mag, item.se_phase, se->cfg.stft);
  }
  TapedLosses losses = compute_losses(tape, est_mag, item.clean_mag, est_wave, item.clean_wave, est_mos,
                                      item.mos_label, loss);
  LossBreakdown vals = losses.values();
  if (opt) {
    tape.backward(losses.combined);
    binder.collect_grads();
    adam_step(trainable, *opt);
  }
  return vals;
}

struct Snapshot {
  std::vector<std::vector<double>> values;

  static Snapshot take(const std::vector<Param*>& params) {
    Snapshot s;
    s.values.reserve(params.size());
    for (const Param* p : params) s.values.push_back(p->value);
    return s;
  }
  void restore(const std::vector<Param*>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
  }
};

}  // namespace detail

// One stage of the §II-D schedule. `se` must be null exactly when the stage is
// pmos-only; the PMOS model is frozen (bit-identical) through se-only.
inline TrainResult run_training_stage(const StageOptions& opt, PmosModel& pmos, SeModel* se,
                                      const std::vector<TrainItem>& train, const std::vector<TrainItem>& val) {
  opt.loss.validate();
  const std::string& stage = opt.loss.stage;
  if ((stage == "pmos-only") != (se == nullptr))
    throw ConfigError("stage '" + stage + "' " + (se ? "does not use" : "requires") + " an SE model");
  if (se && se->cfg.attn_dim != pmos.cfg.embed_dim())
    throw ConfigError("se attention dim " + std::to_string(se->cfg.attn_dim) +
                      " does not match pmos embedding dim " + std::to_string(pmos.cfg.embed_dim()));
  if (train.empty()) throw DataError("training stage has no training utterances");
  if (opt.max_epochs < 1 || opt.patience < 1) throw ConfigError("max_epochs and patience must be >= 1");

  const bool train_pmos = stage != "se-only";
  const bool train_se = se != nullptr;
  std::vector<Param*> trainable, all_params;
  if (train_pmos) pmos.collect(trainable);
  if (train_se) se->collect(trainable);
  pmos.collect(all_params);
  if (se) se->collect(all_params);

  AdamState adam;
  adam.lr = opt.lr;
  adam.init(trainable);

  TrainResult res;
  detail::Snapshot best = detail::Snapshot::take(all_params);
  int since_best = 0;
  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage;
    for (const TrainItem& item : train) {
      LossBreakdown step =
          detail::stage_forward(pmos, se, item, opt.loss, train_pmos, train_se, trainable, &adam);
      rec.l_mse += step.l_mse;
      rec.l_sa += step.l_sa;
      rec.l_mos += step.l_mos;
      rec.combined += step.combined;
    }
    rec.l_mse /= train.size();
    rec.l_sa /= train.size();
    rec.l_mos /= train.size();
    rec.combined /= train.size();

    double val_sum = 0.0;
    const std::vector<TrainItem>& val_set = val.empty() ? train : val;
    for (const TrainItem& item : val_set)
      val_sum += detail::stage_forward(pmos, se, item, opt.loss, false, false, {}, nullptr).combined;
    rec.val_combined = val_sum / val_set.size();
    res.history.push_back(rec);

    if (rec.val_combined < res.best_val) {
      res.best_val = rec.val_combined;
      res.best_epoch = epoch;
      best = detail::Snapshot::take(all_params);
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  best.restore(all_params);
  return res;
}

inline void write_history(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << "# qse-training v1\n";
  os << "# epoch stage l_mse l_sa l_mos combined val_combined\n";
  char num[32];
  for (const EpochRecord& r : history) {
    os << r.epoch << " " << r.stage;
    for (double v : {r.l_mse, r.l_sa, r.l_mos, r.combined, r.val_combined}) {
      std::snprintf(num, sizeof(num), "%.17g", v);
      os << " " << num;
    }
    os << "\n";
  }
  if (!os) throw FormatError("short write to " + path);
}

}  // namespace qse
