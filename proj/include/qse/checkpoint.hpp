#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qse/binio.hpp"
#include "qse/pmos.hpp"
#include "qse/se.hpp"

namespace qse {

constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

using HyperList = std::vector<std::pair<std::string, std::string>>;

// Text manifest (kind, hypers, tensor names/shapes, fingerprint) followed by
// the raw little-endian tensor values in declaration order.
inline void save_checkpoint(const std::string& path, const std::string& kind, const HyperList& hypers,
                            const std::vector<Param*>& params) {
  std::ostringstream manifest;
  manifest << "qse-checkpoint " << kCheckpointVersion << "\n";
  manifest << "kind " << kind << "\n";
  for (const auto& [k, v] : hypers) manifest << "hyper " << k << " " << v << "\n";
  std::size_t total = 0;
  for (const Param* p : params) {
    manifest << "tensor " << p->name;
    manifest << " " << p->shape.size();
    for (int d : p->shape) manifest << " " << d;
    manifest << "\n";
    total += p->value.size();
  }
  const std::string head = manifest.str();
  const std::uint64_t fp = detail::fnv1a64(head.data(), head.size());

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << head;
  os << "fingerprint " << detail::fmt_hex64(fp) << "\n";
  os << "blob-bytes " << total * 8 << "\n";
  for (const Param* p : params)
    for (double v : p->value) detail::put_f64(os, v);
  if (!os) throw FormatError("short write to " + path);
}

struct CheckpointData {
  std::string kind;
  HyperList hypers;
  std::vector<std::pair<std::string, Shape>> tensors;
  std::vector<std::vector<double>> values;

  std::string hyper(const std::string& key) const {
    for (const auto& [k, v] : hypers)
      if (k == key) return v;
    throw ConfigError("checkpoint missing hyper '" + key + "'");
  }
  int hyper_int(const std::string& key) const { return std::stoi(hyper(key)); }
  double hyper_double(const std::string& key) const { return std::stod(hyper(key)); }
};

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  CheckpointData data;
  std::ostringstream head;
  std::string line;
  bool versioned = false;
  std::size_t blob_bytes = 0;
  std::string stored_fp;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "qse-checkpoint") {
      int version = -1;
      ls >> version;
      if (version != kCheckpointVersion)
        throw ConfigError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
      versioned = true;
      head << line << "\n";
    } else if (tag == "kind") {
      ls >> data.kind;
      head << line << "\n";
    } else if (tag == "hyper") {
      std::string k, v;
      ls >> k >> v;
      data.hypers.emplace_back(k, v);
      head << line << "\n";
    } else if (tag == "tensor") {
      std::string name;
      int rank = -1;
      ls >> name >> rank;
      if (rank < 0 || rank > 8) throw FormatError("checkpoint tensor '" + name + "' has invalid rank");
      Shape shape(rank);
      for (int i = 0; i < rank; ++i) ls >> shape[i];
      if (!ls) throw FormatError("checkpoint tensor line malformed: " + line);
      data.tensors.emplace_back(name, shape);
      head << line << "\n";
    } else if (tag == "fingerprint") {
      ls >> stored_fp;
    } else if (tag == "blob-bytes") {
      ls >> blob_bytes;
      break;
    } else {
      throw FormatError("unrecognized checkpoint line: " + line);
    }
  }
  if (!versioned) throw FormatError(path + " is not a qse checkpoint");
  const std::string head_str = head.str();
  const std::string fp = detail::fmt_hex64(detail::fnv1a64(head_str.data(), head_str.size()));
  if (fp != stored_fp)
    throw ConfigError("checkpoint fingerprint mismatch (file " + stored_fp + ", computed " + fp + ")");
  std::size_t expect = 0;
  for (const auto& [name, shape] : data.tensors) expect += shape_numel(shape);
  if (expect * 8 != blob_bytes)
    throw FormatError("checkpoint blob size " + std::to_string(blob_bytes) + " does not match manifest");
  data.values.reserve(data.tensors.size());
  for (const auto& [name, shape] : data.tensors) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = detail::get_f64(is);
    data.values.push_back(std::move(v));
  }
  return data;
}

// Copies checkpoint tensors into a freshly-built model; any divergence in
// name or shape is a hard error naming the offending tensor.
inline void fill_params(const CheckpointData& data, const std::vector<Param*>& params) {
  if (data.tensors.size() != params.size())
    throw ConfigError("checkpoint holds " + std::to_string(data.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, shape] = data.tensors[i];
    if (name != params[i]->name)
      throw ConfigError("checkpoint tensor '" + name + "' does not match model tensor '" + params[i]->name + "'");
    if (shape != params[i]->shape)
      throw ConfigError("checkpoint tensor '" + name + "' shape " + shape_to_string(shape) +
                        " does not match model shape " + shape_to_string(params[i]->shape));
    params[i]->value = data.values[i];
    params[i]->grad.assign(params[i]->value.size(), 0.0);
  }
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stoi(part));
  return out;
}

inline HyperList pmos_hypers(const PmosConfig& c) {
  return {{"stft.frame", std::to_string(c.stft.frame_len)},
          {"stft.hop", std::to_string(c.stft.hop)},
          {"stft.fft", std::to_string(c.stft.fft_size)},
          {"front_dim", std::to_string(c.front_dim)},
          {"pblstm_hidden", join_ints(c.pblstm_hidden)},
          {"reduction", std::to_string(c.reduction)},
          {"fc_hidden", std::to_string(c.fc_hidden)}};
}

inline void save_pmos(const std::string& path, PmosModel& m) {
  std::vector<Param*> params;
  m.collect(params);
  save_checkpoint(path, "pmos", pmos_hypers(m.cfg), params);
}

inline PmosModel load_pmos(const std::string& path) {
  CheckpointData data = read_checkpoint(path);
  if (data.kind != "pmos") throw ConfigError(path + " holds a '" + data.kind + "' model, expected 'pmos'");
  PmosConfig cfg;
  cfg.stft.frame_len = data.hyper_int("stft.frame");
  cfg.stft.hop = data.hyper_int("stft.hop");
  cfg.stft.fft_size = data.hyper_int("stft.fft");
  cfg.front_dim = data.hyper_int("front_dim");
  cfg.pblstm_hidden = split_ints(data.hyper("pblstm_hidden"));
  cfg.reduction = data.hyper_int("reduction");
  cfg.fc_hidden = data.hyper_int("fc_hidden");
  Rng rng(0);
  PmosModel m = PmosModel::init(cfg, rng);
  std::vector<Param*> params;
  m.collect(params);
  fill_params(data, params);
  return m;
}

inline HyperList se_hypers(const SeConfig& c) {
  return {{"stft.frame", std::to_string(c.stft.frame_len)},
          {"stft.hop", std::to_string(c.stft.hop)},
          {"stft.fft", std::to_string(c.stft.fft_size)},
          {"enc_hidden", std::to_string(c.enc_hidden)},
          {"enc_layers", std::to_string(c.enc_layers)},
          {"attn_dim", std::to_string(c.attn_dim)},
          {"dec_pre", std::to_string(c.dec_pre)},
          {"dec_hidden", std::to_string(c.dec_hidden)},
          {"dec_layers", std::to_string(c.dec_layers)}};
}

inline void save_se(const std::string& path, SeModel& m) {
  std::vector<Param*> params;
  m.collect(params);
  save_checkpoint(path, "se", se_hypers(m.cfg), params);
}

inline SeModel load_se(const std::string& path) {
  CheckpointData data = read_checkpoint(path);
  if (data.kind != "se") throw ConfigError(path + " holds a '" + data.kind + "' model, expected 'se'");
  SeConfig cfg;
  cfg.stft.frame_len = data.hyper_int("stft.frame");
  cfg.stft.hop = data.hyper_int("stft.hop");
  cfg.stft.fft_size = data.hyper_int("stft.fft");
  cfg.enc_hidden = data.hyper_int("enc_hidden");
  cfg.enc_layers = data.hyper_int("enc_layers");
  cfg.attn_dim = data.hyper_int("attn_dim");
  cfg.dec_pre = data.hyper_int("dec_pre");
  cfg.dec_hidden = data.hyper_int("dec_hidden");
  cfg.dec_layers = data.hyper_int("dec_layers");
  Rng rng(0);
  SeModel m = SeModel::init(cfg, rng);
  std::vector<Param*> params;
  m.collect(params);
  fill_params(data, params);
  return m;
}

}  // namespace qse
