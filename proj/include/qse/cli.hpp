#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qse/checkpoint.hpp"
#include "qse/corpus.hpp"
#include "qse/eval.hpp"
#include "qse/parallel.hpp"
#include "qse/qsm.hpp"
#include "qse/selfcheck.hpp"
#include "qse/training.hpp"

namespace qse {

namespace cli {

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "profile",        "seed",           "workers",        "out",
      "corpus.manifest", "synth.count",   "synth.snr-lo",   "synth.snr-hi",
      "synth.duration", "train.lr",       "train.max-epochs", "train.patience",
      "loss.lambda1",   "loss.lambda2",   "pmos.checkpoint", "se.checkpoint",
      "qsm.file",       "qsm.norm",       "fusion.mu",      "fusion.sigma",
      "fusion.beam-width", "fusion.exact-threshold", "enhance.input", "eval.split",
  };
  return keys;
}

struct Settings {
  std::map<std::string, std::string> kv;

  bool has(const std::string& key) const { return kv.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  }

  std::string require(const std::string& key, const std::string& command) const {
    auto it = kv.find(key);
    if (it == kv.end() || it->second.empty())
      throw ConfigError(command + " requires '" + key + "' (config key or flag)");
    return it->second;
  }

  int get_int(const std::string& key, int fallback) const {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
      return std::stoi(it->second);
    } catch (...) {
      throw ConfigError("config key '" + key + "' expects an integer, got '" + it->second + "'");
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + it->second + "'");
    }
  }

  void set(const std::string& key, const std::string& value) {
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
    kv[key] = value;
  }
};

inline void load_config_file(Settings& s, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string trimmed;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) trimmed += c;
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    s.set(trimmed.substr(0, eq), trimmed.substr(eq + 1));
  }
}

// Maps the shortcut flags onto their config keys; all other flags take the
// config key verbatim (e.g. --corpus.manifest PATH).
inline std::string flag_to_key(const std::string& flag) {
  if (flag == "mu") return "fusion.mu";
  if (flag == "lambda1") return "loss.lambda1";
  if (flag == "lambda2") return "loss.lambda2";
  if (flag == "in") return "enhance.input";
  return flag;
}

struct ProfileDims {
  PmosConfig pmos;
  SeConfig se;
  Quantizer quant;
};

inline ProfileDims resolve_profile(const std::string& name) {
  if (name == "desk") return {PmosConfig::desk(), SeConfig::desk(), Quantizer::desk()};
  if (name == "paper") return {PmosConfig::paper(), SeConfig::paper(), Quantizer::paper()};
  throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

inline void print_config(std::ostream& out, const std::string& command, const Settings& s,
                         const std::map<std::string, std::string>& defaults) {
  std::map<std::string, std::string> resolved = defaults;
  for (const auto& [k, v] : s.kv)
    if (defaults.count(k)) resolved[k] = v;
  out << "command " << command << "\n";
  for (const auto& [k, v] : resolved) out << "config " << k << " = " << v << "\n";
}

inline std::string default_sigma_text(const Settings& s, const Quantizer& q) {
  const double sigma = s.get_double("fusion.sigma", -1.0);
  return sigma > 0.0 ? s.get("fusion.sigma", "") : std::to_string(q.step) + " (one quantization step)";
}

inline FusionConfig fusion_from(const Settings& s) {
  FusionConfig f;
  f.mu = s.get_double("fusion.mu", 0.0);
  f.sigma = s.get_double("fusion.sigma", -1.0);
  f.beam_width = s.get_int("fusion.beam-width", 8);
  f.exact_threshold = s.get_int("fusion.exact-threshold", 64);
  f.validate();
  return f;
}

// ---- commands -------------------------------------------------------------------

inline int cmd_synth_data(const Settings& s, std::ostream& out) {
  SynthSpec spec;
  spec.count = s.get_int("synth.count", 10);
  spec.snr_lo = s.get_double("synth.snr-lo", -10.0);
  spec.snr_hi = s.get_double("synth.snr-hi", 11.0);
  spec.duration_s = s.get_double("synth.duration", 1.0);
  const std::uint64_t seed = static_cast<std::uint64_t>(s.get_double("seed", 1));
  const std::string dir = s.require("out", "synth-data");
  print_config(out, "synth-data", s,
               {{"out", dir},
                {"seed", std::to_string(seed)},
                {"synth.count", std::to_string(spec.count)},
                {"synth.snr-lo", std::to_string(spec.snr_lo)},
                {"synth.snr-hi", std::to_string(spec.snr_hi)},
                {"synth.duration", std::to_string(spec.duration_s)}});
  std::vector<Utterance> corpus = synth_corpus(spec, seed);
  write_corpus(dir, corpus);
  out << "wrote " << corpus.size() << " utterances under " << dir << "\n";
  return 0;
}

inline StageOptions stage_options(const Settings& s, const std::string& stage) {
  StageOptions opt;
  opt.loss.stage = stage;
  opt.loss.lambda1 = stage == "pmos-only" ? 0.0 : (stage == "se-only" ? 1.0 : s.get_double("loss.lambda1", 0.8));
  opt.loss.lambda2 = s.get_double("loss.lambda2", 0.5);
  opt.lr = s.get_double("train.lr", 0.001);
  opt.max_epochs = s.get_int("train.max-epochs", 50);
  opt.patience = s.get_int("train.patience", 5);
  return opt;
}

inline std::map<std::string, std::string> train_defaults(const Settings& s, const StageOptions& opt) {
  return {{"profile", s.get("profile", "desk")},
          {"seed", s.get("seed", "1")},
          {"corpus.manifest", s.get("corpus.manifest", "")},
          {"out", s.get("out", "")},
          {"train.lr", std::to_string(opt.lr)},
          {"train.max-epochs", std::to_string(opt.max_epochs)},
          {"train.patience", std::to_string(opt.patience)},
          {"loss.lambda1", std::to_string(opt.loss.lambda1)},
          {"loss.lambda2", std::to_string(opt.loss.lambda2)},
          {"pmos.checkpoint", s.get("pmos.checkpoint", "")},
          {"se.checkpoint", s.get("se.checkpoint", "")}};
}

inline int cmd_train(const Settings& s, std::ostream& out, const std::string& command) {
  const std::string stage =
      command == "train-pmos" ? "pmos-only" : (command == "train-se" ? "se-only" : "joint");
  StageOptions opt = stage_options(s, stage);
  print_config(out, command, s, train_defaults(s, opt));
  const std::string manifest = s.require("corpus.manifest", command);
  const std::string out_dir = s.require("out", command);
  const ProfileDims dims = resolve_profile(s.get("profile", "desk"));
  const std::uint64_t seed = static_cast<std::uint64_t>(s.get_double("seed", 1));
  Rng root(seed);
  Rng pmos_rng = root.fork(1), se_rng = root.fork(2);

  PmosModel pmos = [&] {
    if (stage == "pmos-only") {
      if (s.has("pmos.checkpoint")) return load_pmos(s.get("pmos.checkpoint", ""));
      return PmosModel::init(dims.pmos, pmos_rng);
    }
    return load_pmos(s.require("pmos.checkpoint", command + " (needs a trained PMOS model)"));
  }();
  SeModel se;
  const bool with_se = stage != "pmos-only";
  if (with_se) {
    if (stage == "joint") {
      se = load_se(s.require("se.checkpoint", command + " (needs a trained SE model)"));
    } else if (s.has("se.checkpoint")) {
      se = load_se(s.get("se.checkpoint", ""));
    } else {
      SeConfig se_cfg = dims.se;
      se_cfg.attn_dim = pmos.cfg.embed_dim();
      se = SeModel::init(se_cfg, se_rng);
    }
  }

  std::vector<Utterance> corpus = load_corpus(manifest);
  const StftConfig se_stft = with_se ? se.cfg.stft : dims.se.stft;
  std::vector<TrainItem> train = prepare_items(corpus, "train", pmos.cfg.stft, se_stft);
  std::vector<TrainItem> val = prepare_items(corpus, "validation", pmos.cfg.stft, se_stft);

  TrainResult result = run_training_stage(opt, pmos, with_se ? &se : nullptr, train, val);

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  if (stage != "se-only") save_pmos((fs::path(out_dir) / "pmos.ckpt").string(), pmos);
  if (with_se) save_se((fs::path(out_dir) / "se.ckpt").string(), se);
  write_history((fs::path(out_dir) / ("history-" + stage + ".txt")).string(), result.history);
  out << "stage " << stage << " ran " << result.history.size() << " epochs, best validation "
      << result.best_val << " at epoch " << result.best_epoch << "\n";
  return 0;
}

inline int cmd_build_qsm(const Settings& s, std::ostream& out) {
  const std::string norm = s.get("qsm.norm", "utterance");
  print_config(out, "build-qsm", s,
               {{"profile", s.get("profile", "desk")},
                {"corpus.manifest", s.get("corpus.manifest", "")},
                {"out", s.get("out", "")},
                {"qsm.norm", norm},
                {"workers", s.get("workers", "1")}});
  const std::string manifest = s.require("corpus.manifest", "build-qsm");
  const std::string out_file = s.require("out", "build-qsm");
  const ProfileDims dims = resolve_profile(s.get("profile", "desk"));
  if (norm != "utterance" && norm != "global")
    throw ConfigError("qsm.norm must be 'utterance' or 'global', got '" + norm + "'");

  std::vector<Utterance> corpus = load_corpus(manifest);
  std::vector<const Utterance*> train_set;
  for (const Utterance& u : corpus)
    if (u.split == "train") train_set.push_back(&u);
  if (train_set.empty()) throw DataError("build-qsm: corpus has no training utterances");

  const int workers = s.get_int("workers", 1);
  std::vector<Mat> mags(train_set.size());
  parallel_for(static_cast<int>(train_set.size()), workers,
               [&](int i) { mags[i] = stft(train_set[i]->clean, dims.se.stft).magnitude; });

  NormState global;
  if (norm == "global") {
    bool first = true;
    for (const Mat& m : mags)
      for (double v : m.data) {
        if (first) {
          global.lo = global.hi = v;
          first = false;
        } else {
          global.lo = std::min(global.lo, v);
          global.hi = std::max(global.hi, v);
        }
      }
    global.degenerate = global.hi == global.lo;
  }

  std::vector<QuantizedSpectrogram> quantized(mags.size());
  parallel_for(static_cast<int>(mags.size()), workers, [&](int i) {
    if (norm == "utterance") {
      quantized[i] = quantize_magnitude(dims.quant, mags[i]);
    } else {
      Mat scaled(mags[i].rows, mags[i].cols);
      if (!global.degenerate) {
        const double span = global.hi - global.lo;
        for (std::size_t j = 0; j < scaled.data.size(); ++j)
          scaled.data[j] = (mags[i].data[j] - global.lo) / span * dims.quant.range;
      }
      quantized[i] = quantize(dims.quant, scaled, global);
    }
  });

  TransitionModel model = fit_transitions(quantized, dims.quant);
  save_qsm(out_file, model);
  out << "fit " << model.bins << " channels over " << quantized.size() << " utterances -> " << out_file << "\n";
  return 0;
}

inline int cmd_enhance(const Settings& s, std::ostream& out) {
  FusionConfig fusion = fusion_from(s);
  print_config(out, "enhance", s,
               {{"pmos.checkpoint", s.get("pmos.checkpoint", "")},
                {"se.checkpoint", s.get("se.checkpoint", "")},
                {"qsm.file", s.get("qsm.file", "")},
                {"enhance.input", s.get("enhance.input", "")},
                {"out", s.get("out", "")},
                {"fusion.mu", std::to_string(fusion.mu)},
                {"fusion.beam-width", std::to_string(fusion.beam_width)}});
  PmosModel pmos = load_pmos(s.require("pmos.checkpoint", "enhance"));
  SeModel se = load_se(s.require("se.checkpoint", "enhance"));
  const std::string in_path = s.require("enhance.input", "enhance");
  const std::string out_path = s.require("out", "enhance");

  TransitionModel qsm;
  const bool fused = fusion.mu > 0.0;
  if (fused) {
    if (!s.has("qsm.file"))
      throw ConfigError("enhance with fusion.mu > 0 requires qsm.file (set mu to zero without one)");
    qsm = load_qsm(s.get("qsm.file", ""));
  }

  Waveform mixture = read_wav(in_path);
  EnhancedUtterance enhanced = enhance(pmos, se, mixture, fused ? &qsm : nullptr, fusion);
  write_wav(out_path, enhanced.waveform);
  out << "enhanced " << in_path << " -> " << out_path << (enhanced.fused ? " (qsm fusion)" : "") << "\n";
  out << "mos_lqo " << mos_lqo(pmos, enhanced.waveform) << "\n";
  return 0;
}

inline int cmd_evaluate(const Settings& s, std::ostream& out) {
  FusionConfig fusion = fusion_from(s);
  const std::string split = s.get("eval.split", "test");
  print_config(out, "evaluate", s,
               {{"corpus.manifest", s.get("corpus.manifest", "")},
                {"pmos.checkpoint", s.get("pmos.checkpoint", "")},
                {"se.checkpoint", s.get("se.checkpoint", "")},
                {"qsm.file", s.get("qsm.file", "")},
                {"out", s.get("out", "")},
                {"eval.split", split},
                {"fusion.mu", std::to_string(fusion.mu)},
                {"workers", s.get("workers", "1")}});
  PmosModel pmos = load_pmos(s.require("pmos.checkpoint", "evaluate"));
  SeModel se = load_se(s.require("se.checkpoint", "evaluate"));
  const std::string manifest = s.require("corpus.manifest", "evaluate");
  const std::string out_path = s.require("out", "evaluate");

  TransitionModel qsm;
  const bool fused = fusion.mu > 0.0;
  if (fused) {
    if (!s.has("qsm.file"))
      throw ConfigError("evaluate with fusion.mu > 0 requires qsm.file (set mu to zero without one)");
    qsm = load_qsm(s.get("qsm.file", ""));
  }

  std::vector<Utterance> corpus = load_corpus(manifest);
  std::vector<const Utterance*> subset;
  for (const Utterance& u : corpus)
    if (u.split == split) subset.push_back(&u);
  if (subset.empty()) throw DataError("evaluate: no utterances in split '" + split + "'");

  std::vector<UtteranceMetrics> rows(subset.size());
  const int workers = s.get_int("workers", 1);
  parallel_for(static_cast<int>(subset.size()), workers, [&](int i) {
    const Utterance& u = *subset[i];
    EnhancedUtterance enhanced = enhance(pmos, se, u.mixture, fused ? &qsm : nullptr, fusion);
    const std::size_t n = enhanced.waveform.samples.size();
    std::vector<double> ref(u.clean.samples.begin(), u.clean.samples.begin() + n);
    UtteranceMetrics& row = rows[i];
    row.id = u.id;
    row.si_sdr_db = si_sdr(ref, enhanced.waveform.samples);
    row.spectral_mse = spectral_mse(enhanced.est_magnitude, stft(u.clean, se.cfg.stft).magnitude);
    row.mos_lqo = mos_lqo(pmos, enhanced.waveform);
  });
  write_report(out_path, rows);
  out << "evaluated " << rows.size() << " utterances -> " << out_path << "\n";
  return 0;
}

inline int cmd_self_check(std::ostream& out) {
  std::vector<CheckResult> results = run_self_checks();
  bool all_ok = true;
  for (const CheckResult& r : results) {
    out << (r.ok ? "ok   " : "FAIL ") << r.name << ": " << r.detail << "\n";
    all_ok = all_ok && r.ok;
  }
  out << (all_ok ? "self-check passed" : "self-check FAILED") << "\n";
  return all_ok ? 0 : 1;
}

inline void print_usage(std::ostream& out) {
  out << "usage: qse <command> [--config FILE] [--key value ...]\n"
      << "commands:\n"
      << "  synth-data   generate a synthetic labeled corpus (out = directory)\n"
      << "  train-pmos   stage 1: fit the MOS predictor (corpus.manifest, out)\n"
      << "  train-se     stage 2: fit the enhancer, MOS model frozen (pmos.checkpoint)\n"
      << "  train-joint  stage 3: fine-tune both models (pmos.checkpoint, se.checkpoint)\n"
      << "  build-qsm    fit the quantized spectral bigram model on clean training audio\n"
      << "  enhance      enhance one wav file (enhance.input/--in, out)\n"
      << "  evaluate     metric report over a corpus split (out = report file)\n"
      << "  self-check   run the internal verification suites\n"
      << "flags: --config FILE, --profile desk|paper, --seed N, --workers N,\n"
      << "       --mu X, --lambda1 X, --lambda2 X, --out PATH, --in PATH,\n"
      << "       plus any config key verbatim (e.g. --corpus.manifest PATH).\n";
}

}  // namespace cli

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    if (args.empty() || args[0] == "help" || args[0] == "--help") {
      cli::print_usage(out);
      return args.empty() ? 2 : 0;
    }
    const std::string command = args[0];
    cli::Settings settings;
    // config file first so flags override it
    for (std::size_t i = 1; i + 1 < args.size(); ++i)
      if (args[i] == "--config") cli::load_config_file(settings, args[i + 1]);
    for (std::size_t i = 1; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
      const std::string flag = a.substr(2);
      if (i + 1 >= args.size()) throw ConfigError("flag --" + flag + " needs a value");
      const std::string value = args[++i];
      if (flag == "config") continue;  // already applied
      settings.set(cli::flag_to_key(flag), value);
    }

    if (command == "synth-data") return cli::cmd_synth_data(settings, out);
    if (command == "train-pmos" || command == "train-se" || command == "train-joint")
      return cli::cmd_train(settings, out, command);
    if (command == "build-qsm") return cli::cmd_build_qsm(settings, out);
    if (command == "enhance") return cli::cmd_enhance(settings, out);
    if (command == "evaluate") return cli::cmd_evaluate(settings, out);
    if (command == "self-check") return cli::cmd_self_check(out);
    throw ConfigError("unknown command '" + command + "'");
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";  // what() is already "<kind>: <detail>"
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace qse
