#pragma once

// Dense float64 values with a define-by-run reverse-mode tape.
//
// A Tape owns every node created during one forward pass. Value is a
// lightweight handle (tape pointer + node id). Nodes are appended in creation
// order, which is already a topological order, so backward is a single reverse
// sweep. Leaves accumulate gradient across backward() calls until zero_grad();
// interior buffers are reset at the start of every call.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace egrpo {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Plain owned tensor, row-major.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);
  static Tensor zeros(Shape s);
  static Tensor scalar(double v) { return Tensor({}, {v}); }

  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kSub,
  kMultiply,
  kScale,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kExp,
  kTanh,
  kGatherRows,
  kPick,
  kMean,
  kMeanRows,
  kSum,
  kConcat,
  kClamp,
  kMinimum,
};

class Tape;

class Value {
 public:
  Value() = default;
  Value(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> data() const;
  std::span<const double> grad() const;
  std::size_t size() const { return data().size(); }
  // Scalar read; throws unless size() == 1.
  double item() const;
  Tensor tensor() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // With record_grad=false no backward bookkeeping is kept; forward arithmetic
  // is identical, so sampling and loss evaluation produce the same bits.
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(Tensor t);
  Value constant(Tensor t);
  Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // Root must hold exactly one element.
  void backward(const Value& root);
  void zero_grad();

  bool record_grad() const { return record_grad_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class Value;
  friend struct TapeAccess;

  struct Node {
    OpKind kind = OpKind::kConstant;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    std::vector<std::size_t> index;  // gather/pick indices, concat splits
    double a = 0.0;                  // scale factor or clamp low
    double b = 0.0;                  // clamp high
    bool needs_grad = false;
  };

  Value push(Node node);
  void backprop_node(std::size_t id);

  bool record_grad_;
  std::vector<Node> nodes_;
};

// Ops. Every op validates shapes and rejects non-finite results.

// [m,k] x [k,n] -> [m,n]
Value matmul(const Value& a, const Value& b);
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value multiply(const Value& a, const Value& b);
Value scale(const Value& a, double factor);
// Softmax / log-softmax over the last axis, with max subtraction.
Value softmax(const Value& a);
Value log_softmax(const Value& a);
Value log(const Value& a);
Value exp(const Value& a);
Value tanh(const Value& a);
// Rows of a 2-D value: [n,d] gathered by idx -> [idx.size(), d].
Value gather_rows(const Value& a, std::span<const std::size_t> idx);
// Single element by flat row-major index -> scalar.
Value pick(const Value& a, std::size_t flat_index);
Value mean(const Value& a);
// Mean over axis 0 of a 2-D value: [n,d] -> [1,d].
Value mean_rows(const Value& a);
Value sum(const Value& a);
// Concatenation along axis 0; all trailing dims must agree.
Value concat(std::span<const Value> parts);
// Elementwise clamp into [lo, hi]. Gradient passes only strictly inside.
Value clamp(const Value& a, double lo, double hi);
// Elementwise minimum. Ties route the gradient to the second argument.
Value minimum(const Value& a, const Value& b);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return multiply(a, b); }

}  // namespace egrpo
