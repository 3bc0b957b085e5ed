#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Kernels treat a tensor as a matrix: `cols()` is the last extent and `rows()`
// the product of the remaining extents, so a rank-1 tensor of length n is a
// 1 x n row. Broadcasting is limited to adding a 1 x n bias to every row.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace uigr::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A named learnable tensor. Identity (address) is what the tape and the
/// optimizer key on, so two modules holding the same Parameter share weights.
class Parameter {
 public:
  Parameter(std::string name, Tensor value) : name_(std::move(name)), value_(std::move(value)) {}

  const std::string& name() const { return name_; }
  Tensor& value() { return value_; }
  const Tensor& value() const { return value_; }

 private:
  std::string name_;
  Tensor value_;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Gradients {
 public:
  /// Gradient for a parameter registered on the tape; throws NotFoundError otherwise.
  const Tensor& at(const Parameter& p) const;
  bool contains(const Parameter& p) const { return grads_.contains(&p); }
  std::size_t size() const { return grads_.size(); }

  void set(const Parameter& p, Tensor g) { grads_.insert_or_assign(&p, std::move(g)); }

 private:
  std::unordered_map<const Parameter*, Tensor> grads_;
};

/// Backward rule: receives the output gradient, the output value, the input
/// values, and one gradient accumulator per input (nullptr when that input
/// does not need a gradient).
using BackwardFn = std::function<void(const Tensor& grad, const Tensor& out,
                                      std::span<const Tensor* const> inputs,
                                      std::span<Tensor* const> input_grads)>;

class Tape {
 public:
  /// In checked mode every recorded value is scanned and a non-finite entry
  /// raises NumericError naming the kernel.
  explicit Tape(bool checked = false) : checked_(checked) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Registers a parameter leaf. Repeated calls with the same parameter return
  /// the same node, so gradients from every use accumulate in one place.
  Var param(const Parameter& p);

  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Reverse sweep from a single-element loss. Returns gradients for every
  /// registered parameter; parameters off the loss path get exact zeros.
  Gradients backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  bool checked() const { return checked_; }

  /// Smallest |x| seen at any relu input; lets gradient checks stay away from kinks.
  double min_abs_relu_input() const { return min_abs_relu_input_; }
  void note_relu_input(const Tensor& x);

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<const Parameter*, std::size_t>> params_;
  std::unordered_map<const Parameter*, std::size_t> param_index_;
  bool checked_ = false;
  double min_abs_relu_input_ = 1e300;
};

// Kernels. All throw ShapeError naming both operand shapes on mismatch.

Var matmul(Var a, Var b);
Var transpose(Var a);
/// Elementwise sum; `b` may also be a 1 x cols bias broadcast over the rows of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// Multiplies every entry of `a` by the single-element tensor `s`.
Var mul_scalar(Var s, Var a);
Var concat(Var a, Var b);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var softmax(Var a);
/// log(softmax(a)) along the last axis, computed via max-shifted log-sum-exp.
Var log_softmax(Var a);
Var log(Var a);
/// Mean over axis 0 (rows -> 1 x cols) or axis 1 (cols -> rows x 1).
Var mean(Var a, int axis);
Var sum(Var a);
Var l2_normalize(Var a, double eps = 1e-12);
Var embedding_gather(Var table, std::span<const std::size_t> indices);
/// Pairwise cosine similarity of the rows of `a` against the rows of `b`.
Var cosine_similarity_matrix(Var a, Var b);

}  // namespace uigr::ad
