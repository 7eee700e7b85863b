#pragma once

// Dense row-major matrices and a reverse-mode tape sufficient for MLPs,
// row-softmax attention and graph convolution layers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace relnav {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match shape " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix zeros_like(const Matrix& m) { return Matrix(m.rows_, m.cols_); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols_, cols_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix& operator+=(const Matrix& o) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

namespace detail {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMajor>;
using ConstMatMap = Eigen::Map<const EigenRowMajor>;

inline MatMap view(Matrix& m) {
  return MatMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                static_cast<Eigen::Index>(m.cols()));
}
inline ConstMatMap view(const Matrix& m) {
  return ConstMatMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                     static_cast<Eigen::Index>(m.cols()));
}
inline MatMap block_view(Matrix& m, std::size_t first_row, std::size_t rows) {
  return MatMap(m.data().data() + first_row * m.cols(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(m.cols()));
}
inline ConstMatMap block_view(const Matrix& m, std::size_t first_row, std::size_t rows) {
  return ConstMatMap(m.data().data() + first_row * m.cols(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(m.cols()));
}

}  // namespace detail

/// Plain (non-recorded) product.
inline Matrix multiply(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  if (out.size() > 0 && a.cols() > 0) detail::view(out).noalias() = detail::view(a) * detail::view(b);
  return out;
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <class Rng>
Matrix fan_scaled_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

class Tape;

/// Every forward pass builds and frees a tape of multi-megabyte buffers.
/// With glibc's default trim threshold the heap top is returned to the
/// kernel after each pass and faulted back in by the next one, which costs
/// as much time as the arithmetic during deep planning. Executables call
/// this once at startup; it has no effect on results.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive operations in execution order. Inputs always precede
/// their consumers, so backward() is a single reverse sweep.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push("constant", std::move(value), nullptr); }

  /// Leaf bound to an external parameter matrix. Binding the same matrix twice
  /// returns the same node so gradients from every use accumulate.
  Var parameter(const Matrix& param) {
    if (auto it = params_.find(&param); it != params_.end()) return Var(this, it->second);
    Var v = push("parameter", param, nullptr);
    params_.emplace(&param, v.id());
    return v;
  }

  Var record(const char* op, Matrix value, Backprop backprop) {
    return push(op, std::move(value), std::move(backprop));
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }

  const Matrix& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Matrix::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  Matrix& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Matrix::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.tape_ != this) throw ContractError("loss node belongs to a different tape");
    const Matrix& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward requires a scalar loss, got " + shape_str(lv));
    }
    grad_buffer(loss.id())(0, 0) += 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.backprop) n.backprop(*this, id);
    }
    for (const Node& n : nodes_) {
      if (n.has_grad && !n.grad.all_finite()) {
        throw NumericError(std::string("non-finite gradient at op ") + n.op);
      }
    }
  }

  /// Gradient accumulated for a bound parameter; zeros when the parameter was
  /// never used or is unreachable from the loss.
  Matrix gradient(const Matrix& param) const {
    auto it = params_.find(&param);
    if (it == params_.end()) return Matrix::zeros_like(param);
    return grad(it->second);
  }

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

  void mark_kink(std::size_t id) { kinks_.push_back(id); }

  /// Sign pattern of every rectifier input on the tape (1 where x > 0).
  std::vector<std::uint8_t> activation_pattern() const {
    std::vector<std::uint8_t> out;
    for (std::size_t id : kinks_) {
      for (double v : nodes_[id].value.data()) out.push_back(v > 0.0 ? 1 : 0);
    }
    return out;
  }

 private:
  struct Node {
    const char* op;
    Matrix value;
    mutable Matrix grad;
    mutable bool has_grad = false;
    Backprop backprop;
  };

  Var push(const char* op, Matrix value, Backprop backprop) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{op, std::move(value), Matrix{}, false, std::move(backprop)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Matrix*, std::size_t> params_;
  std::vector<std::size_t> kinks_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }

namespace detail {
inline void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Matrix out = multiply(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    if (g.size() == 0) return;
    if (av.size() > 0) detail::view(t.grad_buffer(ia)).noalias() += detail::view(g) * detail::view(bv).transpose();
    if (bv.size() > 0) detail::view(t.grad_buffer(ib)).noalias() += detail::view(av).transpose() * detail::view(g);
  });
}

/// Independent products of `blocks` stacked row blocks: a is (B*p)xq, b is
/// (B*q)xr, result is (B*p)xr with block k equal to a_k * b_k.
inline Var block_matmul(Var a, Var b, std::size_t blocks) {
  detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (blocks == 0 || av.rows() % blocks != 0 || bv.rows() != blocks * av.cols()) {
    throw ShapeError("block_matmul shape mismatch: " + shape_str(av) + " x " + shape_str(bv) +
                     " in " + std::to_string(blocks) + " blocks");
  }
  const std::size_t p = av.rows() / blocks, q = av.cols();
  Matrix out(av.rows(), bv.cols());
  for (std::size_t k = 0; k < blocks; ++k) {
    detail::block_view(out, k * p, p).noalias() = detail::block_view(av, k * p, p) * detail::block_view(bv, k * q, q);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("block_matmul", std::move(out), [ia, ib, blocks, p, q](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    Matrix& ga = t.grad_buffer(ia);
    Matrix& gb = t.grad_buffer(ib);
    for (std::size_t k = 0; k < blocks; ++k) {
      detail::block_view(ga, k * p, p).noalias() += detail::block_view(g, k * p, p) * detail::block_view(bv, k * q, q).transpose();
      detail::block_view(gb, k * q, q).noalias() += detail::block_view(av, k * p, p).transpose() * detail::block_view(g, k * p, p);
    }
  });
}

/// Block-wise a_k * b_k^T: a is (B*p)xq, b is (B*r)xq, result is (B*p)xr.
inline Var block_matmul_nt(Var a, Var b, std::size_t blocks) {
  detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (blocks == 0 || av.rows() % blocks != 0 || bv.rows() % blocks != 0 || av.cols() != bv.cols()) {
    throw ShapeError("block_matmul_nt shape mismatch: " + shape_str(av) + " x " + shape_str(bv) +
                     "^T in " + std::to_string(blocks) + " blocks");
  }
  const std::size_t p = av.rows() / blocks, r = bv.rows() / blocks;
  Matrix out(av.rows(), r);
  for (std::size_t k = 0; k < blocks; ++k) {
    detail::block_view(out, k * p, p).noalias() =
        detail::block_view(av, k * p, p) * detail::block_view(bv, k * r, r).transpose();
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("block_matmul_nt", std::move(out), [ia, ib, blocks, p, r](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    Matrix& ga = t.grad_buffer(ia);
    Matrix& gb = t.grad_buffer(ib);
    for (std::size_t k = 0; k < blocks; ++k) {
      detail::block_view(ga, k * p, p).noalias() += detail::block_view(g, k * p, p) * detail::block_view(bv, k * r, r);
      detail::block_view(gb, k * r, r).noalias() += detail::block_view(g, k * p, p).transpose() * detail::block_view(av, k * p, p);
    }
  });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("add shape mismatch: " + shape_str(a.value()) + " + " + shape_str(b.value()));
  }
  Matrix out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix g = t.grad(self);
    t.grad_buffer(ia) += g;
    t.grad_buffer(ib) += g;
  });
}

/// Adds a 1xC row vector to every row of a.
inline Var add_bias(Var a, Var bias) {
  detail::same_tape(a, bias);
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw ShapeError("add_bias shape mismatch: " + shape_str(av) + " + " + shape_str(bv));
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
  }
  const std::size_t ia = a.id(), ib = bias.id();
  return a.tape().record("add_bias", std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix g = t.grad(self);
    t.grad_buffer(ia) += g;
    Matrix& gb = t.grad_buffer(ib);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
    }
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), [ia, s](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Var relu(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  a.tape().mark_kink(ia);
  return a.tape().record("relu", std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

inline Var tanh(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t ia = a.id();
  return a.tape().record("tanh", std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

enum class Activation { relu, tanh };

inline Var activate(Var a, Activation act) { return act == Activation::relu ? relu(a) : tanh(a); }

/// Row-wise exp-normalize with max subtraction.
inline Matrix softmax_rows_value(const Matrix& a) {
  Matrix out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : row) v /= total;
  }
  return out;
}

inline Var softmax_rows(Var a) {
  Matrix out = softmax_rows_value(a.value());
  const std::size_t ia = a.id();
  return a.tape().record("softmax_rows", std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double inner = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) inner += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - inner);
    }
  });
}

/// Gathers rows by index (indices may repeat).
inline Var select_rows(Var a, std::vector<std::size_t> indices) {
  const Matrix& av = a.value();
  Matrix out(indices.size(), av.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.rows()) throw ShapeError("select_rows index out of range");
    auto src = av.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return a.tape().record("select_rows", std::move(out), [ia, idx = std::move(indices)](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga(idx[i], c) += g(i, c);
    }
  });
}

/// Interleaves the rows of a and b into a matrix of `rows_a + rows_b` rows;
/// row i of a lands at pos_a[i], row j of b at pos_b[j].
inline Var merge_rows(Var a, const std::vector<std::size_t>& pos_a, Var b,
                      const std::vector<std::size_t>& pos_b) {
  detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (pos_a.size() != av.rows() || pos_b.size() != bv.rows() ||
      (av.rows() > 0 && bv.rows() > 0 && av.cols() != bv.cols())) {
    throw ShapeError("merge_rows shape mismatch: " + shape_str(av) + " and " + shape_str(bv));
  }
  const std::size_t cols = av.rows() > 0 ? av.cols() : bv.cols();
  const std::size_t total = pos_a.size() + pos_b.size();
  Matrix out(total, cols);
  std::vector<std::uint8_t> filled(total, 0);
  auto place = [&](const Matrix& src, const std::vector<std::size_t>& pos) {
    for (std::size_t i = 0; i < pos.size(); ++i) {
      if (pos[i] >= total || filled[pos[i]]) throw ShapeError("merge_rows positions are not a partition");
      filled[pos[i]] = 1;
      auto s = src.row(i);
      std::copy(s.begin(), s.end(), out.row(pos[i]).begin());
    }
  };
  place(av, pos_a);
  place(bv, pos_b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("merge_rows", std::move(out), [ia, ib, pa = pos_a, pb = pos_b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < pa.size(); ++i) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga(i, c) += g(pa[i], c);
    }
    Matrix& gb = t.grad_buffer(ib);
    for (std::size_t j = 0; j < pb.size(); ++j) {
      for (std::size_t c = 0; c < g.cols(); ++c) gb(j, c) += g(pb[j], c);
    }
  });
}

inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Matrix(1, 1, total), [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    for (double& v : t.grad_buffer(ia).data()) v += g;
  });
}

/// sum(a .* weights) as a 1x1 node.
inline Var weighted_sum(Var a, const Matrix& weights) {
  if (!a.value().same_shape(weights)) {
    throw ShapeError("weighted_sum shape mismatch: " + shape_str(a.value()) + " vs " + shape_str(weights));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += a.value()[i] * weights[i];
  const std::size_t ia = a.id();
  return a.tape().record("weighted_sum", Matrix(1, 1, total), [ia, weights](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < weights.size(); ++i) ga[i] += g * weights[i];
  });
}

/// Mean of squared elementwise differences.
inline Var mse_loss(Var pred, Var target) {
  detail::same_tape(pred, target);
  const Matrix& p = pred.value();
  const Matrix& y = target.value();
  if (!p.same_shape(y)) throw ShapeError("mse_loss shape mismatch: " + shape_str(p) + " vs " + shape_str(y));
  if (p.size() == 0) throw ShapeError("mse_loss of empty matrices");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - y[i];
    total += d * d;
  }
  const double n = static_cast<double>(p.size());
  const std::size_t ip = pred.id(), iy = target.id();
  return pred.tape().record("mse_loss", Matrix(1, 1, total / n), [ip, iy, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    const Matrix& p = t.value(ip);
    const Matrix& y = t.value(iy);
    Matrix& gp = t.grad_buffer(ip);
    Matrix& gy = t.grad_buffer(iy);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = 2.0 * (p[i] - y[i]) / n * g;
      gp[i] += d;
      gy[i] -= d;
    }
  });
}

inline Var mse_loss(Var pred, Matrix target) {
  Var y = pred.tape().constant(std::move(target));
  return mse_loss(pred, y);
}

/// Mean over rows of the Euclidean distance between `pred` and `target`,
/// smoothed as sqrt(|d|^2 + eps^2) - eps so the gradient exists at d = 0.
inline Var row_norm_loss(Var pred, Matrix target, double eps = 1e-3) {
  const Matrix& p = pred.value();
  if (!p.same_shape(target)) throw ShapeError("row_norm_loss shape mismatch: " + shape_str(p) + " vs " + shape_str(target));
  if (p.rows() == 0) throw ShapeError("row_norm_loss of empty matrices");
  if (!(eps > 0.0)) throw ContractError("row_norm_loss needs eps > 0");
  const std::size_t rows = p.rows(), cols = p.cols();
  std::vector<double> norms(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = eps * eps;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = p(r, c) - target(r, c);
      ss += d * d;
    }
    norms[r] = std::sqrt(ss);
    total += norms[r] - eps;
  }
  const double n = static_cast<double>(rows);
  const std::size_t ip = pred.id();
  return pred.tape().record("row_norm_loss", Matrix(1, 1, total / n),
                            [ip, target = std::move(target), norms = std::move(norms), n](Tape& t, std::size_t self) {
                              const double g = t.grad(self)(0, 0);
                              const Matrix& p = t.value(ip);
                              Matrix& gp = t.grad_buffer(ip);
                              for (std::size_t r = 0; r < p.rows(); ++r) {
                                for (std::size_t c = 0; c < p.cols(); ++c) {
                                  gp(r, c) += (p(r, c) - target(r, c)) / (norms[r] * n) * g;
                                }
                              }
                            });
}

}  // namespace relnav
