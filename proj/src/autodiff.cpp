#include "uigr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "uigr/error.hpp"

namespace uigr::ad {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw UsageError(std::string(op) + ": operands live on different tapes");
}

// Adds src into dst elementwise, allocating dst on first use.
void accumulate(Tensor* dst, const Tensor& src) {
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Naive i-k-j product; summation order per output row is independent of the
// number of rows, which keeps single-query and batched retrieval bit-identical.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor transposed(const Tensor& t) {
  const std::size_t r = t.rows(), c = t.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = t.at(i, j);
  return out;
}

template <class F>
Var unary(const char* op, Var a, F&& forward, BackwardFn backward) {
  Tensor out = Tensor::zeros_like(a.value());
  auto src = a.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = forward(src[i]);
  return a.tape().record(op, std::move(out), {a}, std::move(backward));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto e : shape_)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
  if (data_.size() != product(shape_))
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Gradients::at(const Parameter& p) const {
  auto it = grads_.find(&p);
  if (it == grads_.end()) throw NotFoundError("no gradient recorded for parameter " + p.name());
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_index_.find(&p); it != param_index_.end()) return Var(this, it->second);
  nodes_.push_back(Node{"param", p.value(), {}, nullptr, true});
  const std::size_t id = nodes_.size() - 1;
  param_index_.emplace(&p, id);
  params_.emplace_back(&p, id);
  return Var(this, id);
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (checked_ && !value.all_finite())
    throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                       shape_string(value.shape()));
  Node node{op, std::move(value), {}, std::move(backward), false};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw UsageError(std::string(op) + ": input recorded on another tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::note_relu_input(const Tensor& x) {
  for (double v : x.data()) min_abs_relu_input_ = std::min(min_abs_relu_input_, std::abs(v));
}

Gradients Tape::backward(Var loss) {
  if (&loss.tape() != this) throw UsageError("backward: loss recorded on another tape");
  if (loss.value().numel() != 1)
    throw UsageError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));

  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> has_grad(nodes_.size(), false);
  grads[loss.id()] = Tensor(loss.shape(), 1.0);
  has_grad[loss.id()] = true;

  std::vector<const Tensor*> inputs;
  std::vector<Tensor*> input_grads;
  // Nodes are appended in evaluation order, so index order is topological.
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!has_grad[id] || !node.requires_grad || !node.backward) continue;
    inputs.clear();
    input_grads.clear();
    for (std::size_t in : node.inputs) {
      inputs.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!has_grad[in]) {
          grads[in] = Tensor::zeros_like(nodes_[in].value);
          has_grad[in] = true;
        }
        input_grads.push_back(&grads[in]);
      } else {
        input_grads.push_back(nullptr);
      }
    }
    node.backward(grads[id], node.value, inputs, input_grads);
    if (checked_ && !std::all_of(input_grads.begin(), input_grads.end(),
                                 [](const Tensor* g) { return g == nullptr || g->all_finite(); }))
      throw NumericError(std::string(node.op) + ": non-finite gradient");
  }

  Gradients out;
  for (const auto& [p, id] : params_)
    out.set(*p, has_grad[id] ? std::move(grads[id]) : Tensor::zeros_like(nodes_[id].value));
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() > 2 || bv.rank() > 2 || av.cols() != bv.rows())
    shape_mismatch("matmul", av.shape(), bv.shape());
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  gemm(av.data(), bv.data(), out.data(), m, k, n);
  return a.tape().record(
      "matmul", std::move(out), {a, b},
      [m, k, n](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                std::span<Tensor* const> dg) {
        if (dg[0]) {
          // dA = G * B^T
          Tensor bt = transposed(*in[1]);
          Tensor tmp({m, k});
          gemm(g.data(), bt.data(), tmp.data(), m, n, k);
          accumulate(dg[0], tmp);
        }
        if (dg[1]) {
          // dB = A^T * G
          Tensor at = transposed(*in[0]);
          Tensor tmp({k, n});
          gemm(at.data(), g.data(), tmp.data(), k, m, n);
          accumulate(dg[1], tmp);
        }
      });
}

Var transpose(Var a) {
  if (a.value().rank() > 2) throw ShapeError("transpose: expects rank <= 2, got " + shape_string(a.shape()));
  return a.tape().record("transpose", transposed(a.value()), {a},
                         [](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                            std::span<Tensor* const> dg) { accumulate(dg[0], transposed(g)); });
}

namespace {

enum class AddMode { Same, RowBias };

AddMode add_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return AddMode::Same;
  if (b.rows() == 1 && b.cols() == a.cols() && b.rank() <= 2) return AddMode::RowBias;
  shape_mismatch(op, a.shape(), b.shape());
}

Var add_or_sub(const char* op, Var a, Var b, double sign) {
  require_same_tape(a, b, op);
  const AddMode mode = add_mode(op, a.value(), b.value());
  Tensor out = a.value();
  const std::size_t cols = out.cols();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] += sign * bv[mode == AddMode::Same ? i : i % cols];
  return a.tape().record(op, std::move(out), {a, b},
                         [mode, cols, sign](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                                            std::span<Tensor* const> dg) {
                           if (dg[0]) accumulate(dg[0], g);
                           if (dg[1]) {
                             auto d = dg[1]->data();
                             auto gs = g.data();
                             for (std::size_t i = 0; i < gs.size(); ++i)
                               d[mode == AddMode::Same ? i : i % cols] += sign * gs[i];
                           }
                         });
}

}  // namespace

Var add(Var a, Var b) { return add_or_sub("add", a, b, 1.0); }
Var sub(Var a, Var b) { return add_or_sub("sub", a, b, -1.0); }

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b},
                         [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                            std::span<Tensor* const> dg) {
                           auto gs = g.data();
                           for (int side = 0; side < 2; ++side) {
                             if (!dg[side]) continue;
                             auto other = in[1 - side]->data();
                             auto d = dg[side]->data();
                             for (std::size_t i = 0; i < gs.size(); ++i) d[i] += gs[i] * other[i];
                           }
                         });
}

Var scale(Var a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; },
               [factor](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                        std::span<Tensor* const> dg) {
                 auto d = dg[0]->data();
                 auto gs = g.data();
                 for (std::size_t i = 0; i < gs.size(); ++i) d[i] += factor * gs[i];
               });
}

Var mul_scalar(Var s, Var a) {
  require_same_tape(s, a, "mul_scalar");
  if (s.value().numel() != 1) shape_mismatch("mul_scalar", s.shape(), a.shape());
  const double factor = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape().record("mul_scalar", std::move(out), {s, a},
                         [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                            std::span<Tensor* const> dg) {
                           auto gs = g.data();
                           auto av = in[1]->data();
                           if (dg[0]) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < gs.size(); ++i) acc += gs[i] * av[i];
                             (*dg[0])[0] += acc;
                           }
                           if (dg[1]) {
                             const double f = (*in[0])[0];
                             auto d = dg[1]->data();
                             for (std::size_t i = 0; i < gs.size(); ++i) d[i] += f * gs[i];
                           }
                         });
}

Var concat(Var a, Var b) {
  require_same_tape(a, b, "concat");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows() || av.rank() > 2 || bv.rank() > 2) shape_mismatch("concat", av.shape(), bv.shape());
  const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data().begin() + i * ca, ca, out.data().begin() + i * (ca + cb));
    std::copy_n(bv.data().begin() + i * cb, cb, out.data().begin() + i * (ca + cb) + ca);
  }
  return a.tape().record("concat", std::move(out), {a, b},
                         [r, ca, cb](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                                     std::span<Tensor* const> dg) {
                           for (std::size_t i = 0; i < r; ++i) {
                             const double* grow = g.data().data() + i * (ca + cb);
                             if (dg[0])
                               for (std::size_t j = 0; j < ca; ++j) dg[0]->data()[i * ca + j] += grow[j];
                             if (dg[1])
                               for (std::size_t j = 0; j < cb; ++j) dg[1]->data()[i * cb + j] += grow[ca + j];
                           }
                         });
}

Var relu(Var a) {
  a.tape().note_relu_input(a.value());
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                  std::span<Tensor* const> dg) {
                 auto d = dg[0]->data();
                 auto x = in[0]->data();
                 auto gs = g.data();
                 for (std::size_t i = 0; i < gs.size(); ++i)
                   if (x[i] > 0.0) d[i] += gs[i];
               });
}

Var sigmoid(Var a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](const Tensor& g, const Tensor& out, std::span<const Tensor* const>,
                  std::span<Tensor* const> dg) {
                 auto d = dg[0]->data();
                 auto y = out.data();
                 auto gs = g.data();
                 for (std::size_t i = 0; i < gs.size(); ++i) d[i] += gs[i] * y[i] * (1.0 - y[i]);
               });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](const Tensor& g, const Tensor& out, std::span<const Tensor* const>,
                  std::span<Tensor* const> dg) {
                 auto d = dg[0]->data();
                 auto y = out.data();
                 auto gs = g.data();
                 for (std::size_t i = 0; i < gs.size(); ++i) d[i] += gs[i] * (1.0 - y[i] * y[i]);
               });
}

Var softmax(Var a) {
  Tensor out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return a.tape().record("softmax", std::move(out), {a},
                         [r, c](const Tensor& g, const Tensor& y, std::span<const Tensor* const>,
                                std::span<Tensor* const> dg) {
                           for (std::size_t i = 0; i < r; ++i) {
                             const double* yr = y.data().data() + i * c;
                             const double* gr = g.data().data() + i * c;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                             double* d = dg[0]->data().data() + i * c;
                             for (std::size_t j = 0; j < c; ++j) d[j] += yr[j] * (gr[j] - dot);
                           }
                         });
}

Var log_softmax(Var a) {
  Tensor out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return a.tape().record("log_softmax", std::move(out), {a},
                         [r, c](const Tensor& g, const Tensor& y, std::span<const Tensor* const>,
                                std::span<Tensor* const> dg) {
                           for (std::size_t i = 0; i < r; ++i) {
                             const double* yr = y.data().data() + i * c;
                             const double* gr = g.data().data() + i * c;
                             double gsum = 0.0;
                             for (std::size_t j = 0; j < c; ++j) gsum += gr[j];
                             double* d = dg[0]->data().data() + i * c;
                             for (std::size_t j = 0; j < c; ++j) d[j] += gr[j] - std::exp(yr[j]) * gsum;
                           }
                         });
}

Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); },
               [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                  std::span<Tensor* const> dg) {
                 auto d = dg[0]->data();
                 auto x = in[0]->data();
                 auto gs = g.data();
                 for (std::size_t i = 0; i < gs.size(); ++i) d[i] += gs[i] / x[i];
               });
}

Var mean(Var a, int axis) {
  const Tensor& av = a.value();
  if (av.rank() > 2 || (axis != 0 && axis != 1))
    throw ShapeError("mean: axis " + std::to_string(axis) + " invalid for shape " + shape_string(av.shape()));
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out = axis == 0 ? Tensor({1, c}) : Tensor({r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av.at(i, j);
  const double inv = 1.0 / static_cast<double>(axis == 0 ? r : c);
  for (double& v : out.data()) v *= inv;
  return a.tape().record("mean", std::move(out), {a},
                         [r, c, axis, inv](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                                           std::span<Tensor* const> dg) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               dg[0]->at(i, j) += inv * g[axis == 0 ? j : i];
                         });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape().record("sum", Tensor::scalar(total), {a},
                         [](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                            std::span<Tensor* const> dg) {
                           const double gv = g[0];
                           for (double& d : dg[0]->data()) d += gv;
                         });
}

Var l2_normalize(Var a, double eps) {
  Tensor out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data().data() + i * c;
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += row[j] * row[j];
    norms[i] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < c; ++j) row[j] /= norms[i];
  }
  return a.tape().record("l2_normalize", std::move(out), {a},
                         [r, c, eps, norms = std::move(norms)](const Tensor& g, const Tensor& y,
                                                               std::span<const Tensor* const>,
                                                               std::span<Tensor* const> dg) {
                           for (std::size_t i = 0; i < r; ++i) {
                             const double* yr = y.data().data() + i * c;
                             const double* gr = g.data().data() + i * c;
                             double* d = dg[0]->data().data() + i * c;
                             if (norms[i] <= eps) {
                               // Below the guard the map is x / eps, a plain scaling.
                               for (std::size_t j = 0; j < c; ++j) d[j] += gr[j] / eps;
                               continue;
                             }
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                             for (std::size_t j = 0; j < c; ++j) d[j] += (gr[j] - yr[j] * dot) / norms[i];
                           }
                         });
}

Var embedding_gather(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding_gather: table must be rank 2, got " + shape_string(tv.shape()));
  if (indices.empty()) throw ShapeError("embedding_gather: empty index list for table " + shape_string(tv.shape()));
  const std::size_t d = tv.cols();
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows())
      throw ShapeError("embedding_gather: index " + std::to_string(indices[i]) + " out of range for table " +
                       shape_string(tv.shape()));
    std::copy_n(tv.data().begin() + indices[i] * d, d, out.data().begin() + i * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape().record("embedding_gather", std::move(out), {table},
                             [d, idx = std::move(idx)](const Tensor& g, const Tensor&,
                                                       std::span<const Tensor* const>,
                                                       std::span<Tensor* const> dg) {
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) dg[0]->at(idx[i], j) += g.at(i, j);
                             });
}

Var cosine_similarity_matrix(Var a, Var b) {
  if (a.cols() != b.cols()) shape_mismatch("cosine_similarity_matrix", a.shape(), b.shape());
  return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

}  // namespace uigr::ad
