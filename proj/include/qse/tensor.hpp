#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "qse/errors.hpp"
#include "qse/rng.hpp"

namespace qse {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::function<void()> backward_fn;
};

class Tape;

// Handle into a Tape node; cheap to copy, valid for the tape's lifetime.
class Tensor {
 public:
  Tensor() = default;
  const Shape& shape() const { return node_->shape; }
  const std::vector<double>& value() const { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t numel() const { return node_->value.size(); }
  bool valid() const { return node_ != nullptr; }
  double scalar() const {
    if (node_->value.size() != 1)
      throw ContractViolation("scalar() on tensor of shape " + shape_to_string(node_->shape));
    return node_->value[0];
  }

 private:
  friend class Tape;
  explicit Tensor(TensorNode* n) : node_(n) {}
  TensorNode* node_ = nullptr;
};

enum class EwOp { add, sub, mul, div };
enum class Act { tanh, sigmoid, relu, softmax };

// Dynamic tape: nodes are appended in execution order, so the record is
// already topologically sorted and backward is a single reverse sweep.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  Tensor leaf(const Shape& shape, const std::vector<double>& data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("leaf data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_to_string(shape));
    TensorNode* n = new_node("leaf", shape);
    n->value = data;
    n->requires_grad = requires_grad;
    check_finite(n);
    return Tensor(n);
  }

  Tensor constant(const Shape& shape, const std::vector<double>& data) { return leaf(shape, data, false); }

  Tensor scalar_const(double v) { return constant({1}, {v}); }

  Tensor zeros(const Shape& shape, bool requires_grad = false) {
    TensorNode* n = new_node("zeros", shape);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  // ---- elementwise ----------------------------------------------------

  Tensor elementwise(EwOp op, Tensor a, Tensor b) {
    if (a.shape() != b.shape())
      throw ShapeError(std::string(ew_name(op)) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
    TensorNode* out = new_node(ew_name(op), a.shape());
    TensorNode* na = a.node_;
    TensorNode* nb = b.node_;
    const std::size_t n = na->value.size();
    switch (op) {
      case EwOp::add:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] + nb->value[i];
        break;
      case EwOp::sub:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] - nb->value[i];
        break;
      case EwOp::mul:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] * nb->value[i];
        break;
      case EwOp::div:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] / nb->value[i];
        break;
    }
    return seal(out, {a, b}, [out, na, nb, op, n] {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = out->grad[i];
        switch (op) {
          case EwOp::add:
            na->grad[i] += g;
            nb->grad[i] += g;
            break;
          case EwOp::sub:
            na->grad[i] += g;
            nb->grad[i] -= g;
            break;
          case EwOp::mul:
            na->grad[i] += g * nb->value[i];
            nb->grad[i] += g * na->value[i];
            break;
          case EwOp::div:
            na->grad[i] += g / nb->value[i];
            nb->grad[i] -= g * na->value[i] / (nb->value[i] * nb->value[i]);
            break;
        }
      }
    });
  }

  Tensor elementwise(EwOp op, Tensor a, double b) {
    TensorNode* out = new_node(ew_name(op), a.shape());
    TensorNode* na = a.node_;
    const std::size_t n = na->value.size();
    switch (op) {
      case EwOp::add:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] + b;
        break;
      case EwOp::sub:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] - b;
        break;
      case EwOp::mul:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] * b;
        break;
      case EwOp::div:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = na->value[i] / b;
        break;
    }
    return seal(out, {a}, [out, na, op, b, n] {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = out->grad[i];
        switch (op) {
          case EwOp::add:
          case EwOp::sub:
            na->grad[i] += g;
            break;
          case EwOp::mul:
            na->grad[i] += g * b;
            break;
          case EwOp::div:
            na->grad[i] += g / b;
            break;
        }
      }
    });
  }

  Tensor add(Tensor a, Tensor b) { return elementwise(EwOp::add, a, b); }
  Tensor sub(Tensor a, Tensor b) { return elementwise(EwOp::sub, a, b); }
  Tensor mul(Tensor a, Tensor b) { return elementwise(EwOp::mul, a, b); }
  Tensor div(Tensor a, Tensor b) { return elementwise(EwOp::div, a, b); }
  Tensor add(Tensor a, double b) { return elementwise(EwOp::add, a, b); }
  Tensor sub(Tensor a, double b) { return elementwise(EwOp::sub, a, b); }
  Tensor mul(Tensor a, double b) { return elementwise(EwOp::mul, a, b); }
  Tensor div(Tensor a, double b) { return elementwise(EwOp::div, a, b); }

  // ---- linear algebra --------------------------------------------------

  Tensor matmul(Tensor a, Tensor b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
      throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " * " +
                       shape_to_string(b.shape()));
    TensorNode* out = new_node("matmul", {m, n});
    TensorNode* na = a.node_;
    TensorNode* nb = b.node_;
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double av = na->value[i * k + p];
        if (av == 0.0) continue;
        for (int j = 0; j < n; ++j) out->value[i * n + j] += av * nb->value[p * n + j];
      }
    return seal(out, {a, b}, [out, na, nb, m, k, n] {
      // dA = G * B^T, dB = A^T * G
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double g = out->grad[i * n + j];
          if (g == 0.0) continue;
          for (int p = 0; p < k; ++p) {
            na->grad[i * k + p] += g * nb->value[p * n + j];
            nb->grad[p * n + j] += g * na->value[i * k + p];
          }
        }
    });
  }

  Tensor matvec(Tensor a, Tensor x) {
    require_rank(a, 2, "matvec lhs");
    require_rank(x, 1, "matvec rhs");
    const int m = a.shape()[0], k = a.shape()[1];
    if (k != x.shape()[0])
      throw ShapeError("matvec: inner dimensions disagree, " + shape_to_string(a.shape()) + " * " +
                       shape_to_string(x.shape()));
    TensorNode* out = new_node("matvec", {m});
    TensorNode* na = a.node_;
    TensorNode* nx = x.node_;
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += na->value[i * k + p] * nx->value[p];
      out->value[i] = acc;
    }
    return seal(out, {a, x}, [out, na, nx, m, k] {
      for (int i = 0; i < m; ++i) {
        const double g = out->grad[i];
        if (g == 0.0) continue;
        for (int p = 0; p < k; ++p) {
          na->grad[i * k + p] += g * nx->value[p];
          nx->grad[p] += g * na->value[i * k + p];
        }
      }
    });
  }

  Tensor transpose(Tensor a) {
    require_rank(a, 2, "transpose");
    const int m = a.shape()[0], n = a.shape()[1];
    TensorNode* out = new_node("transpose", {n, m});
    TensorNode* na = a.node_;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out->value[j * m + i] = na->value[i * n + j];
    return seal(out, {a}, [out, na, m, n] {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) na->grad[i * n + j] += out->grad[j * m + i];
    });
  }

  // ---- activations -----------------------------------------------------

  Tensor activation(Act kind, Tensor x) {
    if (kind == Act::softmax) return softmax_last_axis(x);
    TensorNode* out = new_node(act_name(kind), x.shape());
    TensorNode* nx = x.node_;
    const std::size_t n = nx->value.size();
    switch (kind) {
      case Act::tanh:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = std::tanh(nx->value[i]);
        break;
      case Act::sigmoid:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = 1.0 / (1.0 + std::exp(-nx->value[i]));
        break;
      case Act::relu:
        for (std::size_t i = 0; i < n; ++i) out->value[i] = nx->value[i] > 0.0 ? nx->value[i] : 0.0;
        break;
      default:
        break;
    }
    return seal(out, {x}, [out, nx, kind, n] {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = out->grad[i];
        const double y = out->value[i];
        switch (kind) {
          case Act::tanh:
            nx->grad[i] += g * (1.0 - y * y);
            break;
          case Act::sigmoid:
            nx->grad[i] += g * y * (1.0 - y);
            break;
          case Act::relu:
            // relu'(0) := 0
            nx->grad[i] += nx->value[i] > 0.0 ? g : 0.0;
            break;
          default:
            break;
        }
      }
    });
  }

  Tensor tanh_(Tensor x) { return activation(Act::tanh, x); }
  Tensor sigmoid(Tensor x) { return activation(Act::sigmoid, x); }
  Tensor relu(Tensor x) { return activation(Act::relu, x); }

  // Softmax over the last axis (whole vector for rank 1, each row for rank 2),
  // computed with max subtraction.
  Tensor softmax_last_axis(Tensor x) {
    int rows, cols;
    row_view(x, rows, cols, "softmax");
    TensorNode* out = new_node("softmax", x.shape());
    TensorNode* nx = x.node_;
    for (int r = 0; r < rows; ++r) {
      const double* in = nx->value.data() + static_cast<std::size_t>(r) * cols;
      double* o = out->value.data() + static_cast<std::size_t>(r) * cols;
      double mx = in[0];
      for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
      double sum = 0.0;
      for (int c = 0; c < cols; ++c) {
        o[c] = std::exp(in[c] - mx);
        sum += o[c];
      }
      for (int c = 0; c < cols; ++c) o[c] /= sum;
    }
    return seal(out, {x}, [out, nx, rows, cols] {
      for (int r = 0; r < rows; ++r) {
        const double* p = out->value.data() + static_cast<std::size_t>(r) * cols;
        const double* g = out->grad.data() + static_cast<std::size_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += p[c] * g[c];
        double* gx = nx->grad.data() + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) gx[c] += p[c] * (g[c] - dot);
      }
    });
  }

  // ---- reductions and shaping -------------------------------------------

  Tensor sum(Tensor x) {
    TensorNode* out = new_node("sum", {1});
    TensorNode* nx = x.node_;
    double acc = 0.0;
    for (double v : nx->value) acc += v;
    out->value[0] = acc;
    return seal(out, {x}, [out, nx] {
      const double g = out->grad[0];
      for (double& gv : nx->grad) gv += g;
    });
  }

  Tensor mean(Tensor x) {
    TensorNode* out = new_node("mean", {1});
    TensorNode* nx = x.node_;
    const double inv = 1.0 / static_cast<double>(nx->value.size());
    double acc = 0.0;
    for (double v : nx->value) acc += v;
    out->value[0] = acc * inv;
    return seal(out, {x}, [out, nx, inv] {
      const double g = out->grad[0] * inv;
      for (double& gv : nx->grad) gv += g;
    });
  }

  Tensor mean_rows(Tensor x) {
    require_rank(x, 2, "mean_rows");
    const int rows = x.shape()[0], cols = x.shape()[1];
    TensorNode* out = new_node("mean_rows", {cols});
    TensorNode* nx = x.node_;
    const double inv = 1.0 / rows;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out->value[c] += nx->value[r * cols + c] * inv;
    return seal(out, {x}, [out, nx, rows, cols, inv] {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) nx->grad[r * cols + c] += out->grad[c] * inv;
    });
  }

  Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    std::size_t total = 0;
    for (const Tensor& p : parts) {
      require_rank(p, 1, "concat part");
      total += p.numel();
    }
    TensorNode* out = new_node("concat", {static_cast<int>(total)});
    std::size_t off = 0;
    std::vector<TensorNode*> ins;
    for (const Tensor& p : parts) {
      for (std::size_t i = 0; i < p.numel(); ++i) out->value[off + i] = p.node_->value[i];
      ins.push_back(p.node_);
      off += p.numel();
    }
    return seal(out, parts, [out, ins] {
      std::size_t off2 = 0;
      for (TensorNode* in : ins) {
        for (std::size_t i = 0; i < in->value.size(); ++i) in->grad[i] += out->grad[off2 + i];
        off2 += in->value.size();
      }
    });
  }

  Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows of zero tensors");
    const int cols = rows[0].shape()[0];
    for (const Tensor& r : rows) {
      require_rank(r, 1, "stack_rows row");
      if (r.shape()[0] != cols) throw ShapeError("stack_rows: ragged row lengths");
    }
    TensorNode* out = new_node("stack_rows", {static_cast<int>(rows.size()), cols});
    std::vector<TensorNode*> ins;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (int c = 0; c < cols; ++c) out->value[r * cols + c] = rows[r].node_->value[c];
      ins.push_back(rows[r].node_);
    }
    return seal(out, rows, [out, ins, cols] {
      for (std::size_t r = 0; r < ins.size(); ++r)
        for (int c = 0; c < cols; ++c) ins[r]->grad[c] += out->grad[r * cols + c];
    });
  }

  Tensor row(Tensor x, int r) {
    require_rank(x, 2, "row");
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (r < 0 || r >= rows) throw ShapeError("row index " + std::to_string(r) + " out of range");
    TensorNode* out = new_node("row", {cols});
    TensorNode* nx = x.node_;
    for (int c = 0; c < cols; ++c) out->value[c] = nx->value[r * cols + c];
    return seal(out, {x}, [out, nx, r, cols] {
      for (int c = 0; c < cols; ++c) nx->grad[r * cols + c] += out->grad[c];
    });
  }

  Tensor concat_cols(Tensor a, Tensor b) {
    require_rank(a, 2, "concat_cols lhs");
    require_rank(b, 2, "concat_cols rhs");
    const int rows = a.shape()[0];
    if (b.shape()[0] != rows) throw ShapeError("concat_cols: row counts disagree");
    const int ca = a.shape()[1], cb = b.shape()[1];
    TensorNode* out = new_node("concat_cols", {rows, ca + cb});
    TensorNode* na = a.node_;
    TensorNode* nb = b.node_;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < ca; ++c) out->value[r * (ca + cb) + c] = na->value[r * ca + c];
      for (int c = 0; c < cb; ++c) out->value[r * (ca + cb) + ca + c] = nb->value[r * cb + c];
    }
    return seal(out, {a, b}, [out, na, nb, rows, ca, cb] {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < ca; ++c) na->grad[r * ca + c] += out->grad[r * (ca + cb) + c];
        for (int c = 0; c < cb; ++c) nb->grad[r * cb + c] += out->grad[r * (ca + cb) + ca + c];
      }
    });
  }

  Tensor add_row_broadcast(Tensor x, Tensor bias) {
    require_rank(x, 2, "add_row_broadcast lhs");
    require_rank(bias, 1, "add_row_broadcast bias");
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (bias.shape()[0] != cols) throw ShapeError("add_row_broadcast: bias length mismatch");
    TensorNode* out = new_node("add_row_broadcast", x.shape());
    TensorNode* nx = x.node_;
    TensorNode* nb = bias.node_;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out->value[r * cols + c] = nx->value[r * cols + c] + nb->value[c];
    return seal(out, {x, bias}, [out, nx, nb, rows, cols] {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          nx->grad[r * cols + c] += out->grad[r * cols + c];
          nb->grad[c] += out->grad[r * cols + c];
        }
    });
  }

  // ---- scalar-friendly nonlinearities ------------------------------------

  Tensor log_(Tensor x) {
    TensorNode* out = new_node("log", x.shape());
    TensorNode* nx = x.node_;
    for (std::size_t i = 0; i < nx->value.size(); ++i) out->value[i] = std::log(nx->value[i]);
    return seal(out, {x}, [out, nx] {
      for (std::size_t i = 0; i < nx->value.size(); ++i) nx->grad[i] += out->grad[i] / nx->value[i];
    });
  }

  // max(x_i, floor); gradient passes only where x > floor.
  Tensor max_scalar(Tensor x, double floor_v) {
    TensorNode* out = new_node("max_scalar", x.shape());
    TensorNode* nx = x.node_;
    for (std::size_t i = 0; i < nx->value.size(); ++i)
      out->value[i] = nx->value[i] > floor_v ? nx->value[i] : floor_v;
    return seal(out, {x}, [out, nx, floor_v] {
      for (std::size_t i = 0; i < nx->value.size(); ++i)
        if (nx->value[i] > floor_v) nx->grad[i] += out->grad[i];
    });
  }

  // ---- custom nodes (used by the differentiable overlap-add resynthesis) --

  static TensorNode* node(Tensor t) { return t.node_; }

  TensorNode* new_node(const char* op, const Shape& shape) {
    nodes_.push_back(std::make_unique<TensorNode>());
    TensorNode* n = nodes_.back().get();
    n->op = op;
    n->shape = shape;
    n->value.assign(shape_numel(shape), 0.0);
    return n;
  }

  Tensor seal(TensorNode* out, const std::vector<Tensor>& inputs, std::function<void()> backward_fn) {
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.node_->requires_grad;
    out->requires_grad = rg;
    if (rg) out->backward_fn = std::move(backward_fn);
    check_finite(out);
    return Tensor(out);
  }

  // ---- reverse sweep ------------------------------------------------------

  void backward(Tensor root) {
    if (root.numel() != 1)
      throw ContractViolation("backward root must be scalar-shaped, got " + shape_to_string(root.shape()));
    for (auto& n : nodes_) n->grad.assign(n->value.size(), 0.0);
    root.node_->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      TensorNode* n = it->get();
      for (double g : n->grad)
        if (!std::isfinite(g))
          throw NonFiniteError(std::string("gradient of op '") + n->op + "' is not finite");
      if (n->backward_fn) n->backward_fn();
    }
  }

 private:
  static const char* ew_name(EwOp op) {
    switch (op) {
      case EwOp::add: return "add";
      case EwOp::sub: return "sub";
      case EwOp::mul: return "mul";
      case EwOp::div: return "div";
    }
    return "?";
  }

  static const char* act_name(Act a) {
    switch (a) {
      case Act::tanh: return "tanh";
      case Act::sigmoid: return "sigmoid";
      case Act::relu: return "relu";
      case Act::softmax: return "softmax";
    }
    return "?";
  }

  static void require_rank(const Tensor& t, int rank, const char* what) {
    if (static_cast<int>(t.shape().size()) != rank)
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                       shape_to_string(t.shape()));
  }

  static void row_view(const Tensor& t, int& rows, int& cols, const char* what) {
    if (t.shape().size() == 1) {
      rows = 1;
      cols = t.shape()[0];
    } else if (t.shape().size() == 2) {
      rows = t.shape()[0];
      cols = t.shape()[1];
    } else {
      throw ShapeError(std::string(what) + ": rank 1 or 2 required, got " + shape_to_string(t.shape()));
    }
  }

  void check_finite(const TensorNode* n) const {
    for (double v : n->value)
      if (!std::isfinite(v)) throw NonFiniteError(std::string("op '") + n->op + "' produced a non-finite value");
  }

  std::vector<std::unique_ptr<TensorNode>> nodes_;
};

// Trainable parameter array persisting across tape rebuilds.
struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  static Param make(std::string name, Shape shape) {
    Param p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.value.assign(shape_numel(p.shape), 0.0);
    p.grad.assign(p.value.size(), 0.0);
    return p;
  }

  static Param init_uniform(std::string name, Shape shape, int fan_in, Rng& rng) {
    Param p = make(std::move(name), std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    for (double& v : p.value) v = rng.uniform(-bound, bound);
    return p;
  }
};

// Binds Params as tape leaves for one forward/backward pass and copies the
// resulting gradients back out. Frozen bindings contribute constants.
class Binder {
 public:
  explicit Binder(Tape& tape) : tape_(tape) {}

  Tensor bind(Param& p, bool trainable) {
    Tensor t = tape_.leaf(p.shape, p.value, trainable);
    bound_.push_back({&p, t});
    return t;
  }

  void collect_grads() {
    for (auto& [p, t] : bound_) p->grad = t.grad();
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  std::vector<std::pair<Param*, Tensor>> bound_;
};

// ---- finite-difference gradient checking ----------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  int skipped = 0;  // coordinates flagged as straddling a nondifferentiable point
  bool ok = true;
  std::string issue;
};

// f: (Tape&, Tensor) -> scalar Tensor. Compares the taped gradient against
// central differences at the given step; a coordinate whose two-step numeric
// estimates disagree (a kink) is excluded and counted in `skipped`.
template <class F>
GradCheckResult grad_check(F&& f, const Shape& xshape, const std::vector<double>& x0, double step) {
  if (step <= 0.0) throw ContractViolation("grad_check step must be positive");
  GradCheckResult res;
  std::vector<double> analytic;
  try {
    Tape tape;
    Tensor x = tape.leaf(xshape, x0, true);
    Tensor y = f(tape, x);
    if (y.numel() != 1) throw ContractViolation("grad_check target must be scalar-valued");
    tape.backward(y);
    analytic = x.grad();
  } catch (const NonFiniteError& e) {
    res.ok = false;
    res.issue = e.what();
    return res;
  }

  auto eval = [&](const std::vector<double>& xv) {
    Tape tape;
    Tensor x = tape.leaf(xshape, xv, false);
    return f(tape, x).scalar();
  };

  std::vector<double> xv = x0;
  const double f0 = eval(xv);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double keep = xv[i];
    double fp, fm, fp2, fm2;
    try {
      xv[i] = keep + step;
      fp = eval(xv);
      xv[i] = keep - step;
      fm = eval(xv);
      xv[i] = keep + 0.5 * step;
      fp2 = eval(xv);
      xv[i] = keep - 0.5 * step;
      fm2 = eval(xv);
    } catch (const NonFiniteError& e) {
      res.ok = false;
      res.issue = e.what();
      xv[i] = keep;
      return res;
    }
    xv[i] = keep;
    const double n1 = (fp - fm) / (2.0 * step);
    const double n2 = (fp2 - fm2) / step;
    const double agree = std::fabs(n1 - n2) / std::max({std::fabs(n1), std::fabs(n2), 1e-8});
    // One-sided derivatives disagree strongly when [x-h, x+h] straddles a
    // kink, even in cases (relu exactly at 0) where the two central
    // differences coincide.
    const double fwd = (fp - f0) / step, bwd = (f0 - fm) / step;
    const double sided = std::fabs(fwd - bwd) / std::max({std::fabs(fwd), std::fabs(bwd), 1e-8});
    if (agree > 5e-2 || sided > 0.25) {
      ++res.skipped;  // nondifferentiable point straddled
      continue;
    }
    const double rel = std::fabs(analytic[i] - n1) / std::max({std::fabs(analytic[i]), std::fabs(n1), 1e-8});
    res.max_rel_error = std::max(res.max_rel_error, rel);
  }
  return res;
}

}  // namespace qse
