#pragma once

#include <string>
#include <vector>

#include "qse/tensor.hpp"

namespace qse {

// ---- parameter holders ------------------------------------------------------

struct LstmCell {
  int input_dim = 0;
  int hidden_dim = 0;
  // gate order: input, forget, output, candidate
  Param wi, ui, bi, wf, uf, bf, wo, uo, bo, wg, ug, bg;

  static LstmCell init(const std::string& prefix, int input_dim, int hidden_dim, Rng& rng) {
    LstmCell c;
    c.input_dim = input_dim;
    c.hidden_dim = hidden_dim;
    auto w = [&](const char* name) {
      return Param::init_uniform(prefix + "." + name, {hidden_dim, input_dim}, input_dim, rng);
    };
    auto u = [&](const char* name) {
      return Param::init_uniform(prefix + "." + name, {hidden_dim, hidden_dim}, hidden_dim, rng);
    };
    auto b = [&](const char* name) {
      return Param::init_uniform(prefix + "." + name, {hidden_dim}, hidden_dim, rng);
    };
    c.wi = w("wi"); c.ui = u("ui"); c.bi = b("bi");
    c.wf = w("wf"); c.uf = u("uf");
    c.bf = Param::make(prefix + ".bf", {hidden_dim});
    for (double& v : c.bf.value) v = 1.0;  // forget gate starts open
    c.wo = w("wo"); c.uo = u("uo"); c.bo = b("bo");
    c.wg = w("wg"); c.ug = u("ug"); c.bg = b("bg");
    return c;
  }

  void collect(std::vector<Param*>& out) {
    for (Param* p : {&wi, &ui, &bi, &wf, &uf, &bf, &wo, &uo, &bo, &wg, &ug, &bg}) out.push_back(p);
  }
};

struct BlstmLayer {
  LstmCell fwd, bwd;

  static BlstmLayer init(const std::string& prefix, int input_dim, int hidden_dim, Rng& rng) {
    BlstmLayer l;
    l.fwd = LstmCell::init(prefix + ".fwd", input_dim, hidden_dim, rng);
    l.bwd = LstmCell::init(prefix + ".bwd", input_dim, hidden_dim, rng);
    return l;
  }

  int output_dim() const { return 2 * fwd.hidden_dim; }

  void collect(std::vector<Param*>& out) {
    fwd.collect(out);
    bwd.collect(out);
  }
};

struct PblstmStack {
  int reduction = 2;  // Upsilon
  std::vector<BlstmLayer> layers;

  // hidden[i] is the per-direction width of layer i; input to layer i is
  // reduction * (previous layer's concatenated output, or the feature dim).
  static PblstmStack init(const std::string& prefix, int input_dim, const std::vector<int>& hidden, int reduction,
                          Rng& rng) {
    if (reduction < 2) throw ConfigError("pblstm reduction must be >= 2");
    PblstmStack s;
    s.reduction = reduction;
    int d = input_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      s.layers.push_back(BlstmLayer::init(prefix + ".l" + std::to_string(i), reduction * d, hidden[i], rng));
      d = 2 * hidden[i];
    }
    return s;
  }

  int output_dim() const { return layers.back().output_dim(); }

  void collect(std::vector<Param*>& out) {
    for (BlstmLayer& l : layers) l.collect(out);
  }
};

struct LinearLayer {
  Param w;  // out x in
  Param b;  // out

  static LinearLayer init(const std::string& prefix, int input_dim, int output_dim, Rng& rng) {
    LinearLayer l;
    l.w = Param::init_uniform(prefix + ".w", {output_dim, input_dim}, input_dim, rng);
    l.b = Param::init_uniform(prefix + ".b", {output_dim}, input_dim, rng);
    return l;
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// ---- taped (bound) forms ----------------------------------------------------

struct BoundLstm {
  Tensor wi, ui, bi, wf, uf, bf, wo, uo, bo, wg, ug, bg;
  int input_dim = 0;
  int hidden_dim = 0;
};

inline BoundLstm bind_lstm(Binder& b, LstmCell& cell, bool trainable) {
  BoundLstm t;
  t.input_dim = cell.input_dim;
  t.hidden_dim = cell.hidden_dim;
  t.wi = b.bind(cell.wi, trainable); t.ui = b.bind(cell.ui, trainable); t.bi = b.bind(cell.bi, trainable);
  t.wf = b.bind(cell.wf, trainable); t.uf = b.bind(cell.uf, trainable); t.bf = b.bind(cell.bf, trainable);
  t.wo = b.bind(cell.wo, trainable); t.uo = b.bind(cell.uo, trainable); t.bo = b.bind(cell.bo, trainable);
  t.wg = b.bind(cell.wg, trainable); t.ug = b.bind(cell.ug, trainable); t.bg = b.bind(cell.bg, trainable);
  return t;
}

struct LstmState {
  Tensor h, c;
};

inline LstmState lstm_step(Tape& tape, const BoundLstm& cell, Tensor x, const LstmState& prev) {
  if (x.shape() != Shape{cell.input_dim})
    throw ShapeError("lstm_step input shape " + shape_to_string(x.shape()) + ", cell expects [" +
                     std::to_string(cell.input_dim) + "]");
  auto gate = [&](Tensor w, Tensor u, Tensor bias) {
    return tape.add(tape.add(tape.matvec(w, x), tape.matvec(u, prev.h)), bias);
  };
  Tensor i = tape.sigmoid(gate(cell.wi, cell.ui, cell.bi));
  Tensor f = tape.sigmoid(gate(cell.wf, cell.uf, cell.bf));
  Tensor o = tape.sigmoid(gate(cell.wo, cell.uo, cell.bo));
  Tensor g = tape.tanh_(gate(cell.wg, cell.ug, cell.bg));
  Tensor c = tape.add(tape.mul(f, prev.c), tape.mul(i, g));
  Tensor h = tape.mul(o, tape.tanh_(c));
  return {h, c};
}

struct BoundBlstm {
  BoundLstm fwd, bwd;
};

inline BoundBlstm bind_blstm(Binder& b, BlstmLayer& layer, bool trainable) {
  return {bind_lstm(b, layer.fwd, trainable), bind_lstm(b, layer.bwd, trainable)};
}

// Per-frame outputs, forward-direction hidden state concatenated with the
// backward-direction one at the same time index.
inline std::vector<Tensor> blstm_forward(Tape& tape, const BoundBlstm& layer, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw LengthError("blstm_forward on empty sequence");
  const int t_len = static_cast<int>(xs.size());
  const int hd = layer.fwd.hidden_dim;
  std::vector<Tensor> fw(t_len), bw(t_len);
  LstmState st{tape.zeros({hd}), tape.zeros({hd})};
  for (int t = 0; t < t_len; ++t) {
    st = lstm_step(tape, layer.fwd, xs[t], st);
    fw[t] = st.h;
  }
  st = {tape.zeros({hd}), tape.zeros({hd})};
  for (int t = t_len - 1; t >= 0; --t) {
    st = lstm_step(tape, layer.bwd, xs[t], st);
    bw[t] = st.h;
  }
  std::vector<Tensor> out(t_len);
  for (int t = 0; t < t_len; ++t) out[t] = tape.concat({fw[t], bw[t]});
  return out;
}

// Groups frames into blocks of `reduction`, repeating the final frame to
// complete a short tail, and concatenates each block into one vector.
inline std::vector<Tensor> reduce_concat(Tape& tape, const std::vector<Tensor>& xs, int reduction) {
  const int t_len = static_cast<int>(xs.size());
  const int groups = (t_len + reduction - 1) / reduction;
  std::vector<Tensor> out(groups);
  for (int g = 0; g < groups; ++g) {
    std::vector<Tensor> parts;
    for (int k = 0; k < reduction; ++k) {
      const int idx = g * reduction + k;
      parts.push_back(xs[idx < t_len ? idx : t_len - 1]);
    }
    out[g] = tape.concat(parts);
  }
  return out;
}

struct BoundPblstm {
  int reduction = 2;
  std::vector<BoundBlstm> layers;
};

inline BoundPblstm bind_pblstm(Binder& b, PblstmStack& stack, bool trainable) {
  BoundPblstm t;
  t.reduction = stack.reduction;
  for (BlstmLayer& l : stack.layers) t.layers.push_back(bind_blstm(b, l, trainable));
  return t;
}

inline std::vector<Tensor> pblstm_forward(Tape& tape, const BoundPblstm& stack, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw LengthError("pblstm_forward on empty sequence");
  std::vector<Tensor> cur = xs;
  for (const BoundBlstm& layer : stack.layers) {
    cur = reduce_concat(tape, cur, stack.reduction);
    cur = blstm_forward(tape, layer, cur);
  }
  return cur;
}

struct BoundLinear {
  Tensor w, b;
};

inline BoundLinear bind_linear(Binder& bd, LinearLayer& layer, bool trainable) {
  return {bd.bind(layer.w, trainable), bd.bind(layer.b, trainable)};
}

inline Tensor linear_apply(Tape& tape, const BoundLinear& l, Tensor x) {
  return tape.add(tape.matvec(l.w, x), l.b);
}

// Applies the same affine map to every row of X.
inline Tensor linear_apply_rows(Tape& tape, const BoundLinear& l, Tensor x_rows) {
  return tape.add_row_broadcast(tape.matmul(x_rows, tape.transpose(l.w)), l.b);
}

}  // namespace qse
