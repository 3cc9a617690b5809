#include "egrpo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace egrpo {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

// Gives free op functions access to the tape internals without widening the
// public surface.
struct TapeAccess {
  using Node = Tape::Node;
  static const Node& node(const Value& v) { return v.tape().nodes_[v.id()]; }
  static Value push(Tape& t, Node n) { return t.push(std::move(n)); }
};

namespace {

using Node = TapeAccess::Node;

const Node& node_of(const Value& v) { return TapeAccess::node(v); }

void check_same_tape(const Value& a, const Value& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": values on different tapes");
}

void check_finite(std::span<const double> xs, const char* op) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string(op) + ": non-finite value");
  }
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

Value make(const Value& like, OpKind kind, Shape shape, std::vector<double> value,
           std::vector<std::size_t> inputs) {
  Node n;
  n.kind = kind;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  return TapeAccess::push(like.tape(), std::move(n));
}

Value binary_same_shape(const Value& a, const Value& b, OpKind kind, const char* name) {
  check_same_tape(a, b, name);
  const auto& na = node_of(a);
  const auto& nb = node_of(b);
  if (na.shape != nb.shape) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(na.shape) + " vs " +
                     shape_str(nb.shape));
  }
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case OpKind::kAdd: out[i] = na.value[i] + nb.value[i]; break;
      case OpKind::kSub: out[i] = na.value[i] - nb.value[i]; break;
      case OpKind::kMultiply: out[i] = na.value[i] * nb.value[i]; break;
      case OpKind::kMinimum: out[i] = na.value[i] < nb.value[i] ? na.value[i] : nb.value[i]; break;
      default: break;
    }
  }
  check_finite(out, name);
  return make(a, kind, na.shape, std::move(out), {a.id(), b.id()});
}

}  // namespace

const Shape& Value::shape() const { return tape_->nodes_[id_].shape; }

std::span<const double> Value::data() const { return tape_->nodes_[id_].value; }

std::span<const double> Value::grad() const { return tape_->nodes_[id_].grad; }

double Value::item() const {
  const auto d = data();
  if (d.size() != 1) throw ShapeError("item: value has " + std::to_string(d.size()) + " elements");
  return d[0];
}

Tensor Value::tensor() const {
  const auto d = data();
  return Tensor(shape(), std::vector<double>(d.begin(), d.end()));
}

Value Tape::leaf(Tensor t) {
  check_finite(t.data, "leaf");
  Node n;
  n.kind = OpKind::kLeaf;
  n.shape = std::move(t.shape);
  n.value = std::move(t.data);
  n.needs_grad = record_grad_;
  if (record_grad_) n.grad.assign(n.value.size(), 0.0);
  nodes_.push_back(std::move(n));
  return Value(this, nodes_.size() - 1);
}

Value Tape::constant(Tensor t) {
  check_finite(t.data, "constant");
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = std::move(t.shape);
  n.value = std::move(t.data);
  nodes_.push_back(std::move(n));
  return Value(this, nodes_.size() - 1);
}

Value Tape::push(Node node) {
  if (record_grad_) {
    for (auto in : node.inputs) {
      if (nodes_[in].needs_grad) {
        node.needs_grad = true;
        break;
      }
    }
  } else {
    node.inputs.clear();
  }
  nodes_.push_back(std::move(node));
  return Value(this, nodes_.size() - 1);
}

void Tape::zero_grad() {
  for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tape::backward(const Value& root) {
  if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (!record_grad_) throw std::logic_error("backward: tape was created without gradient recording");
  auto& r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(r.shape));
  }
  for (std::size_t i = 0; i <= root.id(); ++i) {
    auto& n = nodes_[i];
    if (n.kind == OpKind::kLeaf || !n.needs_grad) continue;
    n.grad.assign(n.value.size(), 0.0);
  }
  if (!r.needs_grad) return;
  r.grad[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    if (nodes_[i].needs_grad && nodes_[i].kind != OpKind::kLeaf) backprop_node(i);
  }
}

void Tape::backprop_node(std::size_t id) {
  Node& n = nodes_[id];
  const auto& g = n.grad;
  auto grad_of = [this](std::size_t in) -> std::vector<double>* {
    auto& x = nodes_[in];
    return x.needs_grad ? &x.grad : nullptr;
  };

  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      break;
    case OpKind::kMatmul: {
      const auto& A = nodes_[n.inputs[0]];
      const auto& B = nodes_[n.inputs[1]];
      const std::size_t m = A.shape[0], k = A.shape[1], p = B.shape[1];
      if (auto* ga = grad_of(n.inputs[0])) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const double gij = g[i * p + j];
            if (gij == 0.0) continue;
            for (std::size_t l = 0; l < k; ++l) (*ga)[i * k + l] += gij * B.value[l * p + j];
          }
      }
      if (auto* gb = grad_of(n.inputs[1])) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            const double a = A.value[i * k + l];
            for (std::size_t j = 0; j < p; ++j) (*gb)[l * p + j] += a * g[i * p + j];
          }
      }
      break;
    }
    case OpKind::kAdd:
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = grad_of(n.inputs[1]))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
      break;
    case OpKind::kSub:
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = grad_of(n.inputs[1]))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
      break;
    case OpKind::kMultiply: {
      const auto& av = nodes_[n.inputs[0]].value;
      const auto& bv = nodes_[n.inputs[1]].value;
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
      if (auto* gb = grad_of(n.inputs[1]))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
      break;
    }
    case OpKind::kScale:
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * n.a;
      break;
    case OpKind::kSoftmax: {
      // dz = p * (g - <g, p>) per row
      auto* ga = grad_of(n.inputs[0]);
      if (!ga) break;
      const std::size_t cols = last_dim(n.shape);
      for (std::size_t r = 0; r * cols < g.size(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * n.value[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          (*ga)[i] += n.value[i] * (g[i] - dot);
        }
      }
      break;
    }
    case OpKind::kLogSoftmax: {
      // dz = g - softmax * sum(g) per row
      auto* ga = grad_of(n.inputs[0]);
      if (!ga) break;
      const std::size_t cols = last_dim(n.shape);
      for (std::size_t r = 0; r * cols < g.size(); ++r) {
        double gs = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          (*ga)[i] += g[i] - std::exp(n.value[i]) * gs;
        }
      }
      break;
    }
    case OpKind::kLog: {
      const auto& av = nodes_[n.inputs[0]].value;
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / av[i];
      break;
    }
    case OpKind::kExp:
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * n.value[i];
      break;
    case OpKind::kTanh:
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      break;
    case OpKind::kGatherRows: {
      auto* ga = grad_of(n.inputs[0]);
      if (!ga) break;
      const std::size_t d = n.shape[1];
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        const std::size_t src = n.index[r];
        for (std::size_t c = 0; c < d; ++c) (*ga)[src * d + c] += g[r * d + c];
      }
      break;
    }
    case OpKind::kPick:
      if (auto* ga = grad_of(n.inputs[0])) (*ga)[n.index[0]] += g[0];
      break;
    case OpKind::kMean: {
      auto* ga = grad_of(n.inputs[0]);
      if (!ga) break;
      const double s = g[0] / static_cast<double>(ga->size());
      for (auto& x : *ga) x += s;
      break;
    }
    case OpKind::kMeanRows: {
      auto* ga = grad_of(n.inputs[0]);
      if (!ga) break;
      const auto& in = nodes_[n.inputs[0]];
      const std::size_t rows = in.shape[0], d = in.shape[1];
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) (*ga)[r * d + c] += g[c] * inv;
      break;
    }
    case OpKind::kSum: {
      if (auto* ga = grad_of(n.inputs[0]))
        for (auto& x : *ga) x += g[0];
      break;
    }
    case OpKind::kConcat: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const std::size_t len = n.index[p];
        if (auto* gp = grad_of(n.inputs[p]))
          for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[offset + i];
        offset += len;
      }
      break;
    }
    case OpKind::kClamp: {
      const auto& av = nodes_[n.inputs[0]].value;
      if (auto* ga = grad_of(n.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (av[i] > n.a && av[i] < n.b) (*ga)[i] += g[i];
      break;
    }
    case OpKind::kMinimum: {
      const auto& av = nodes_[n.inputs[0]].value;
      const auto& bv = nodes_[n.inputs[1]].value;
      auto* ga = grad_of(n.inputs[0]);
      auto* gb = grad_of(n.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] < bv[i]) {
          if (ga) (*ga)[i] += g[i];
        } else if (gb) {
          (*gb)[i] += g[i];
        }
      }
      break;
    }
  }
}

Value matmul(const Value& a, const Value& b) {
  check_same_tape(a, b, "matmul");
  const auto& na = node_of(a);
  const auto& nb = node_of(b);
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(na.shape) + " x " + shape_str(nb.shape));
  }
  const std::size_t m = na.shape[0], k = na.shape[1], p = nb.shape[1];
  std::vector<double> out(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double x = na.value[i * k + l];
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += x * nb.value[l * p + j];
    }
  check_finite(out, "matmul");
  return make(a, OpKind::kMatmul, {m, p}, std::move(out), {a.id(), b.id()});
}

Value add(const Value& a, const Value& b) { return binary_same_shape(a, b, OpKind::kAdd, "add"); }
Value sub(const Value& a, const Value& b) { return binary_same_shape(a, b, OpKind::kSub, "sub"); }
Value multiply(const Value& a, const Value& b) {
  return binary_same_shape(a, b, OpKind::kMultiply, "multiply");
}
Value minimum(const Value& a, const Value& b) {
  return binary_same_shape(a, b, OpKind::kMinimum, "minimum");
}

Value scale(const Value& a, double factor) {
  if (!std::isfinite(factor)) throw NonFiniteError("scale: non-finite factor");
  const auto& na = node_of(a);
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * factor;
  check_finite(out, "scale");
  Node n;
  n.kind = OpKind::kScale;
  n.shape = na.shape;
  n.value = std::move(out);
  n.inputs = {a.id()};
  n.a = factor;
  return TapeAccess::push(a.tape(), std::move(n));
}

namespace {

Value softmax_impl(const Value& a, bool take_log) {
  const auto& na = node_of(a);
  check_finite(na.value, "softmax");
  const std::size_t cols = last_dim(na.shape);
  if (cols == 0) throw ShapeError("softmax: empty last axis");
  std::vector<double> out(na.value.size());
  for (std::size_t r = 0; r * cols < out.size(); ++r) {
    const double* z = &na.value[r * cols];
    double mx = z[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, z[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(z[c] - mx);
    if (take_log) {
      const double lse = std::log(total);
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (z[c] - mx) - lse;
    } else {
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = std::exp(z[c] - mx) / total;
    }
  }
  check_finite(out, take_log ? "log_softmax" : "softmax");
  return make(a, take_log ? OpKind::kLogSoftmax : OpKind::kSoftmax, na.shape, std::move(out), {a.id()});
}

template <typename F>
Value unary(const Value& a, OpKind kind, const char* name, F f) {
  const auto& na = node_of(a);
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(na.value[i]);
  check_finite(out, name);
  return make(a, kind, na.shape, std::move(out), {a.id()});
}

}  // namespace

Value softmax(const Value& a) { return softmax_impl(a, false); }
Value log_softmax(const Value& a) { return softmax_impl(a, true); }

Value log(const Value& a) {
  return unary(a, OpKind::kLog, "log", [](double x) { return std::log(x); });
}
Value exp(const Value& a) {
  return unary(a, OpKind::kExp, "exp", [](double x) { return std::exp(x); });
}
Value tanh(const Value& a) {
  return unary(a, OpKind::kTanh, "tanh", [](double x) { return std::tanh(x); });
}

Value gather_rows(const Value& a, std::span<const std::size_t> idx) {
  const auto& na = node_of(a);
  if (na.shape.size() != 2) throw ShapeError("gather_rows: expected 2-D input, got " + shape_str(na.shape));
  const std::size_t rows = na.shape[0], d = na.shape[1];
  std::vector<double> out;
  out.reserve(idx.size() * d);
  for (auto r : idx) {
    if (r >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(r) + " out of range for " +
                              std::to_string(rows) + " rows");
    }
    out.insert(out.end(), na.value.begin() + static_cast<std::ptrdiff_t>(r * d),
               na.value.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  }
  Node n;
  n.kind = OpKind::kGatherRows;
  n.shape = {idx.size(), d};
  n.value = std::move(out);
  n.inputs = {a.id()};
  n.index.assign(idx.begin(), idx.end());
  return TapeAccess::push(a.tape(), std::move(n));
}

Value pick(const Value& a, std::size_t flat_index) {
  const auto& na = node_of(a);
  if (flat_index >= na.value.size()) {
    throw std::out_of_range("pick: index " + std::to_string(flat_index) + " out of range for " +
                            std::to_string(na.value.size()) + " elements");
  }
  Node n;
  n.kind = OpKind::kPick;
  n.value = {na.value[flat_index]};
  n.inputs = {a.id()};
  n.index = {flat_index};
  return TapeAccess::push(a.tape(), std::move(n));
}

Value sum(const Value& a) {
  const auto& na = node_of(a);
  double s = 0.0;
  for (double x : na.value) s += x;
  check_finite(std::span<const double>(&s, 1), "sum");
  return make(a, OpKind::kSum, {}, {s}, {a.id()});
}

Value mean(const Value& a) {
  const auto& na = node_of(a);
  if (na.value.empty()) throw ShapeError("mean: empty input");
  double s = 0.0;
  for (double x : na.value) s += x;
  const double m = s / static_cast<double>(na.value.size());
  check_finite(std::span<const double>(&m, 1), "mean");
  return make(a, OpKind::kMean, {}, {m}, {a.id()});
}

Value mean_rows(const Value& a) {
  const auto& na = node_of(a);
  if (na.shape.size() != 2 || na.shape[0] == 0) {
    throw ShapeError("mean_rows: expected non-empty 2-D input, got " + shape_str(na.shape));
  }
  const std::size_t rows = na.shape[0], d = na.shape[1];
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += na.value[r * d + c];
  for (auto& x : out) x /= static_cast<double>(rows);
  return make(a, OpKind::kMeanRows, {1, d}, std::move(out), {a.id()});
}

Value concat(std::span<const Value> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail;
  std::size_t lead = 0;
  Node n;
  n.kind = OpKind::kConcat;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    check_same_tape(parts[0], parts[p], "concat");
    const auto& np = node_of(parts[p]);
    // Scalars concatenate as length-1 vectors.
    Shape s = np.shape.empty() ? Shape{1} : np.shape;
    Shape t(s.begin() + 1, s.end());
    if (p == 0) {
      tail = t;
    } else if (t != tail) {
      throw ShapeError("concat: trailing shape mismatch " + shape_str(np.shape));
    }
    lead += s[0];
    n.value.insert(n.value.end(), np.value.begin(), np.value.end());
    n.inputs.push_back(parts[p].id());
    n.index.push_back(np.value.size());
  }
  n.shape = {lead};
  n.shape.insert(n.shape.end(), tail.begin(), tail.end());
  return TapeAccess::push(parts[0].tape(), std::move(n));
}

Value clamp(const Value& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  const auto& na = node_of(a);
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(na.value[i], lo, hi);
  Node n;
  n.kind = OpKind::kClamp;
  n.shape = na.shape;
  n.value = std::move(out);
  n.inputs = {a.id()};
  n.a = lo;
  n.b = hi;
  return TapeAccess::push(a.tape(), std::move(n));
}

}  // namespace egrpo
