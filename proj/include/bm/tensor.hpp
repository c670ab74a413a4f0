#pragma once

// Dense tensor with shape-checked ops, FLOP instrumentation, and a scoped
// tape for reverse-mode differentiation. Element type is a template
// parameter: float for speed, double for oracle/equivalence tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <thread>
#include <vector>

#include "bm/common.hpp"

namespace bm {

using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tape;

namespace detail {
// Tape binding and gradient storage, shared by every handle to one logical
// tensor so that watch/backward/tape-teardown are visible through all copies.
template <typename T>
struct AttachInfo {
  Tape<T>* tape = nullptr;
  int node = -1;
  std::shared_ptr<std::vector<T>> grad;
};
}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(static_cast<size_t>(shape_numel(shape_)), T(0))),
        ctrl_(std::make_shared<detail::AttachInfo<T>>()) {
    for (i64 d : shape_) check(d > 0, "tensor dimensions must be positive, got ", shape_str(shape_));
  }
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(data))),
        ctrl_(std::make_shared<detail::AttachInfo<T>>()) {
    check(shape_numel(shape_) == static_cast<i64>(data_->size()), "shape ", shape_str(shape_),
          " does not match buffer of ", data_->size(), " elements");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  i64 numel() const { return data_ ? static_cast<i64>(data_->size()) : 0; }
  i64 rank() const { return static_cast<i64>(shape_.size()); }
  i64 dim(i64 i) const { return shape_[static_cast<size_t>(i)]; }
  // 2-d helpers (row-major)
  i64 rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : -1); }
  i64 cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : -1); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  std::vector<T>& vec() { return *data_; }
  const std::vector<T>& vec() const { return *data_; }
  T& at(i64 i) { return (*data_)[static_cast<size_t>(i)]; }
  T at(i64 i) const { return (*data_)[static_cast<size_t>(i)]; }
  T& at(i64 r, i64 c) { return (*data_)[static_cast<size_t>(r * shape_[1] + c)]; }
  T at(i64 r, i64 c) const { return (*data_)[static_cast<size_t>(r * shape_[1] + c)]; }

  bool defined() const { return static_cast<bool>(data_); }
  bool on_tape() const { return ctrl_ && ctrl_->tape != nullptr; }
  Tape<T>* tape() const { return ctrl_ ? ctrl_->tape : nullptr; }
  int node() const { return ctrl_ ? ctrl_->node : -1; }

  bool has_grad() const { return ctrl_ && static_cast<bool>(ctrl_->grad); }
  T* grad_data() { return ctrl_->grad->data(); }
  const T* grad_data() const { return ctrl_->grad->data(); }
  std::vector<T>& grad() {
    check(has_grad(), "tensor has no gradient buffer (not attached to a tape)");
    return *ctrl_->grad;
  }
  const std::vector<T>& grad() const {
    check(has_grad(), "tensor has no gradient buffer (not attached to a tape)");
    return *ctrl_->grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(ctrl_->grad->begin(), ctrl_->grad->end(), T(0));
  }

  // Deep value copy (fresh buffer, no tape attachment).
  Tensor clone_values() const { return Tensor(shape_, *data_); }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<detail::AttachInfo<T>> ctrl_;
};

// Reverse-mode tape. Explicit and scoped: leaves are registered with watch(),
// ops append nodes while any operand is attached, backward() walks the nodes
// in reverse. Destroying or resetting the tape detaches every tensor it
// touched (their gradient buffers survive). Single-threaded by contract;
// concurrent passes use separate tapes.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { reset(); }

  // Registers a leaf. Re-watching on a new tape re-binds the tensor (the
  // previous pass's tape must be done with it); watching twice on the same
  // tape just zeroes the grad.
  void watch(Tensor<T>& t) {
    check(t.defined(), "cannot watch an undefined tensor");
    if (t.ctrl_->tape == this) {
      t.zero_grad();
      return;
    }
    attach(t);
    nodes_.push_back(Node{t, nullptr});
  }

  // Ops attach their output first, then record the backward closure; the
  // closure must capture the already-attached output so the copies share the
  // gradient buffer.
  void attach_output(Tensor<T>& t) { attach(t); }

  // Registers an op output. The closure reads out.grad() and accumulates into
  // the input tensors' grads (inputs captured inside the closure by value,
  // sharing buffers). Constants (inputs without grad buffers) are skipped by
  // the closure itself.
  void record(const Tensor<T>& out, std::function<void()> back) {
    check(out.ctrl_ && out.ctrl_->tape == this, "record: output was not attached to this tape");
    nodes_.push_back(Node{out, std::move(back)});
  }

  void backward(const Tensor<T>& loss) {
    check(loss.numel() == 1, "backward requires a scalar loss, got shape ", shape_str(loss.shape()));
    check(loss.ctrl_ && loss.ctrl_->tape == this, "loss is not attached to this tape");
    loss.ctrl_->grad->at(0) = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->back) it->back();
    }
  }

  void reset() {
    for (Node& n : nodes_) {
      if (n.out.ctrl_ && n.out.ctrl_->tape == this) {
        n.out.ctrl_->tape = nullptr;
        n.out.ctrl_->node = -1;
      }
    }
    nodes_.clear();
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> out;
    std::function<void()> back;
  };

  void attach(Tensor<T>& t) {
    t.ctrl_->tape = this;
    t.ctrl_->node = static_cast<int>(nodes_.size());
    t.ctrl_->grad = std::make_shared<std::vector<T>>(static_cast<size_t>(t.numel()), T(0));
  }

  std::vector<Node> nodes_;
};

namespace detail {

// Raw matmul kernels, row-major. Deterministic: accumulation order is fixed
// per output element regardless of threading (rows/columns are split, never
// the reduction).
template <typename T>
void mm_nn_range(const T* a, const T* b, T* c, i64 k0, i64 k1, i64 M, i64 J) {
  for (i64 k = k0; k < k1; ++k) {
    T* crow = c + k * J;
    std::fill(crow, crow + J, T(0));
    const T* arow = a + k * M;
    for (i64 m = 0; m < M; ++m) {
      const T amk = arow[m];
      const T* brow = b + m * J;
      for (i64 j = 0; j < J; ++j) crow[j] += amk * brow[j];
    }
  }
}

template <typename T>
void mm_nt_range(const T* a, const T* b, T* c, i64 k0, i64 k1, i64 M, i64 J) {
  for (i64 k = k0; k < k1; ++k) {
    const T* arow = a + k * M;
    T* crow = c + k * J;
    for (i64 j = 0; j < J; ++j) {
      const T* brow = b + j * M;
      T acc = 0;
      for (i64 m = 0; m < M; ++m) acc += arow[m] * brow[m];
      crow[j] = acc;
    }
  }
}

template <typename T>
void mm_tn_range(const T* a, const T* b, T* c, i64 m0, i64 m1, i64 K, i64 M, i64 J) {
  for (i64 m = m0; m < m1; ++m) {
    T* crow = c + m * J;
    std::fill(crow, crow + J, T(0));
    for (i64 k = 0; k < K; ++k) {
      const T akm = a[k * M + m];
      const T* brow = b + k * J;
      for (i64 j = 0; j < J; ++j) crow[j] += akm * brow[j];
    }
  }
}

inline bool worth_threading(i64 k, i64 m, i64 j, i64 split) {
  return split > 1 && 2 * k * m * j >= (1 << 21);
}

// c[KxJ] = a[KxM] * b[MxJ]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, i64 K, i64 M, i64 J) {
  const i64 half = K / 2;
  if (worth_threading(K, M, J, half > 0 ? 2 : 1) && std::thread::hardware_concurrency() > 1) {
    std::thread other([&] { mm_nn_range(a, b, c, 0, half, M, J); });
    mm_nn_range(a, b, c, half, K, M, J);
    other.join();
  } else {
    mm_nn_range(a, b, c, 0, K, M, J);
  }
}

// c[KxJ] = a[KxM] * b[JxM]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, i64 K, i64 M, i64 J) {
  const i64 half = K / 2;
  if (worth_threading(K, M, J, half > 0 ? 2 : 1) && std::thread::hardware_concurrency() > 1) {
    std::thread other([&] { mm_nt_range(a, b, c, 0, half, M, J); });
    mm_nt_range(a, b, c, half, K, M, J);
    other.join();
  } else {
    mm_nt_range(a, b, c, 0, K, M, J);
  }
}

// c[MxJ] = a[KxM]^T * b[KxJ]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, i64 K, i64 M, i64 J) {
  const i64 half = M / 2;
  if (worth_threading(K, M, J, half > 0 ? 2 : 1) && std::thread::hardware_concurrency() > 1) {
    std::thread other([&] { mm_tn_range(a, b, c, 0, half, K, M, J); });
    mm_tn_range(a, b, c, half, M, K, M, J);
    other.join();
  } else {
    mm_tn_range(a, b, c, 0, M, K, M, J);
  }
}

template <typename T>
void axpy(T alpha, const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[O] = w[OxI] * x[I], counted under the same multiply-add rule as matmul.
template <typename T>
void matvec(const Tensor<T>& w, const T* x, T* y, FlopCounter* flops) {
  const i64 O = w.dim(0), I = w.dim(1);
  for (i64 o = 0; o < O; ++o) {
    const T* row = w.data() + o * I;
    T acc = 0;
    for (i64 i = 0; i < I; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  if (flops) flops->add_matmul(1, I, O);
}

template <typename T>
Tape<T>* result_tape(const Tensor<T>& a) {
  return a.tape();
}

template <typename T, typename... Rest>
Tape<T>* result_tape(const Tensor<T>& a, const Rest&... rest) {
  Tape<T>* ta = a.tape();
  Tape<T>* tr = result_tape(rest...);
  if (ta && tr) check(ta == tr, "operands attached to different tapes");
  return ta ? ta : tr;
}

}  // namespace detail

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
  // log(1 + e^x), overflow-safe; underflows to exactly 0 for very negative x.
  if (x > T(30)) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
T silu_scalar(T x) {
  return x * sigmoid_scalar(x);
}

// ---------------------------------------------------------------------------
// Ops. Every op computes its value eagerly; when any operand is attached to a
// tape, the output joins the same tape and a backward closure is recorded.
// FLOP counting covers forward matmuls only.
// ---------------------------------------------------------------------------

// a[KxM] * b[MxJ]. Charges 2*K*M*J to the counter.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, FlopCounter* counter = nullptr) {
  check(a.rank() == 2 && b.rank() == 2, "matmul requires 2-d operands, got ", shape_str(a.shape()),
        " and ", shape_str(b.shape()));
  check(a.dim(1) == b.dim(0), "matmul inner dimensions disagree: ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
  const i64 K = a.dim(0), M = a.dim(1), J = b.dim(1);
  Tensor<T> out({K, J});
  detail::mm_nn(a.data(), b.data(), out.data(), K, M, J);
  if (counter) counter->add_matmul(K, M, J);
  if (Tape<T>* tape = detail::result_tape(a, b)) {
    tape->attach_output(out);
    tape->record(out, [a = a, b = b, out, K, M, J]() mutable {
      if (a.has_grad()) {
        std::vector<T> da(static_cast<size_t>(K * M));
        detail::mm_nt(out.grad_data(), b.data(), da.data(), K, J, M);
        detail::axpy(T(1), da.data(), a.grad_data(), K * M);
      }
      if (b.has_grad()) {
        std::vector<T> db(static_cast<size_t>(M * J));
        detail::mm_tn(a.data(), out.grad_data(), db.data(), K, M, J);
        detail::axpy(T(1), db.data(), b.grad_data(), M * J);
      }
    });
  }
  return out;
}

// a[KxM] * b[JxM]^T -> [KxJ]. Same 2*K*M*J attribution.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, FlopCounter* counter = nullptr) {
  check(a.rank() == 2 && b.rank() == 2, "matmul_nt requires 2-d operands, got ", shape_str(a.shape()),
        " and ", shape_str(b.shape()));
  check(a.dim(1) == b.dim(1), "matmul_nt inner dimensions disagree: ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()), " (transposed)");
  const i64 K = a.dim(0), M = a.dim(1), J = b.dim(0);
  Tensor<T> out({K, J});
  detail::mm_nt(a.data(), b.data(), out.data(), K, M, J);
  if (counter) counter->add_matmul(K, M, J);
  if (Tape<T>* tape = detail::result_tape(a, b)) {
    tape->attach_output(out);
    tape->record(out, [a = a, b = b, out, K, M, J]() mutable {
      if (a.has_grad()) {
        std::vector<T> da(static_cast<size_t>(K * M));
        detail::mm_nn(out.grad_data(), b.data(), da.data(), K, J, M);
        detail::axpy(T(1), da.data(), a.grad_data(), K * M);
      }
      if (b.has_grad()) {
        std::vector<T> db(static_cast<size_t>(J * M));
        detail::mm_tn(out.grad_data(), a.data(), db.data(), K, J, M);
        detail::axpy(T(1), db.data(), b.grad_data(), J * M);
      }
    });
  }
  return out;
}

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.shape() == b.shape(), op, " requires equal shapes, got ", shape_str(a.shape()), " and ",
        shape_str(b.shape()));
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (Tape<T>* tape = detail::result_tape(a, b)) {
    tape->attach_output(out);
    tape->record(out, [a = a, b = b, out, n]() mutable {
      if (a.has_grad()) detail::axpy(T(1), out.grad_data(), a.grad_data(), n);
      if (b.has_grad()) detail::axpy(T(1), out.grad_data(), b.grad_data(), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (Tape<T>* tape = detail::result_tape(a, b)) {
    tape->attach_output(out);
    tape->record(out, [a = a, b = b, out, n]() mutable {
      if (a.has_grad()) detail::axpy(T(1), out.grad_data(), a.grad_data(), n);
      if (b.has_grad()) detail::axpy(T(-1), out.grad_data(), b.grad_data(), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (Tape<T>* tape = detail::result_tape(a, b)) {
    tape->attach_output(out);
    tape->record(out, [a = a, b = b, out, n]() mutable {
      for (i64 i = 0; i < n; ++i) {
        const T g = out.grad_data()[i];
        if (a.has_grad()) a.grad_data()[i] += g * b.at(i);
        if (b.has_grad()) b.grad_data()[i] += g * a.at(i);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
  if (Tape<T>* tape = detail::result_tape(a)) {
    tape->attach_output(out);
    tape->record(out, [a = a, out, s, n]() mutable {
      if (a.has_grad()) detail::axpy(s, out.grad_data(), a.grad_data(), n);
    });
  }
  return out;
}

// x[RxC] + b[C] broadcast over rows.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& b) {
  check(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0), "add_rowwise needs [RxC] and [C], got ",
        shape_str(x.shape()), " and ", shape_str(b.shape()));
  const i64 R = x.dim(0), C = x.dim(1);
  Tensor<T> out({R, C});
  for (i64 r = 0; r < R; ++r)
    for (i64 c = 0; c < C; ++c) out.at(r, c) = x.at(r, c) + b.at(c);
  if (Tape<T>* tape = detail::result_tape(x, b)) {
    tape->attach_output(out);
    tape->record(out, [x = x, b = b, out, R, C]() mutable {
      if (x.has_grad()) detail::axpy(T(1), out.grad_data(), x.grad_data(), R * C);
      if (b.has_grad())
        for (i64 r = 0; r < R; ++r)
          for (i64 c = 0; c < C; ++c) b.grad_data()[c] += out.grad_data()[r * C + c];
    });
  }
  return out;
}

// x[RxC] scaled per row by c[R].
template <typename T>
Tensor<T> mul_colvec(const Tensor<T>& x, const Tensor<T>& c) {
  check(x.rank() == 2 && c.rank() == 1 && x.dim(0) == c.dim(0), "mul_colvec needs [RxC] and [R], got ",
        shape_str(x.shape()), " and ", shape_str(c.shape()));
  const i64 R = x.dim(0), C = x.dim(1);
  Tensor<T> out({R, C});
  for (i64 r = 0; r < R; ++r) {
    const T s = c.at(r);
    for (i64 j = 0; j < C; ++j) out.at(r, j) = x.at(r, j) * s;
  }
  if (Tape<T>* tape = detail::result_tape(x, c)) {
    tape->attach_output(out);
    tape->record(out, [x = x, c = c, out, R, C]() mutable {
      for (i64 r = 0; r < R; ++r) {
        const T s = c.at(r);
        T dot = 0;
        for (i64 j = 0; j < C; ++j) {
          const T g = out.grad_data()[r * C + j];
          if (x.has_grad()) x.grad_data()[r * C + j] += g * s;
          dot += g * x.at(r, j);
        }
        if (c.has_grad()) c.grad_data()[r] += dot;
      }
    });
  }
  return out;
}

// Per-row dot product of two [RxC] matrices -> [R].
template <typename T>
Tensor<T> rows_dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "rows_dot");
  check(a.rank() == 2, "rows_dot requires 2-d operands");
  const i64 R = a.dim(0), C = a.dim(1);
  Tensor<T> out({R});
  for (i64 r = 0; r < R; ++r) {
    T acc = 0;
    for (i64 j = 0; j < C; ++j) acc += a.at(r, j) * b.at(r, j);
    out.at(r) = acc;
  }
  if (Tape<T>* tape = detail::result_tape(a, b)) {
    tape->attach_output(out);
    tape->record(out, [a = a, b = b, out, R, C]() mutable {
      for (i64 r = 0; r < R; ++r) {
        const T g = out.grad_data()[r];
        for (i64 j = 0; j < C; ++j) {
          if (a.has_grad()) a.grad_data()[r * C + j] += g * b.at(r, j);
          if (b.has_grad()) b.grad_data()[r * C + j] += g * a.at(r, j);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = silu_scalar(x.at(i));
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, n]() mutable {
      if (!x.has_grad()) return;
      for (i64 i = 0; i < n; ++i) {
        const T s = sigmoid_scalar(x.at(i));
        x.grad_data()[i] += out.grad_data()[i] * (s + x.at(i) * s * (T(1) - s));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = sigmoid_scalar(x.at(i));
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, n]() mutable {
      if (!x.has_grad()) return;
      for (i64 i = 0; i < n; ++i) {
        const T s = out.at(i);
        x.grad_data()[i] += out.grad_data()[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = softplus_scalar(x.at(i));
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, n]() mutable {
      if (!x.has_grad()) return;
      for (i64 i = 0; i < n; ++i) x.grad_data()[i] += out.grad_data()[i] * sigmoid_scalar(x.at(i));
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = std::exp(x.at(i));
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, n]() mutable {
      if (!x.has_grad()) return;
      for (i64 i = 0; i < n; ++i) x.grad_data()[i] += out.grad_data()[i] * out.at(i);
    });
  }
  return out;
}

// Softmax over the last axis. Rows with -inf entries are fine: exp(-inf)=0.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  check(x.rank() >= 1 && x.dim(x.rank() - 1) >= 1, "softmax requires a non-empty last axis, got ",
        shape_str(x.shape()));
  const i64 C = x.dim(x.rank() - 1);
  const i64 R = x.numel() / C;
  Tensor<T> out(x.shape());
  for (i64 r = 0; r < R; ++r) {
    const T* xi = x.data() + r * C;
    T* oi = out.data() + r * C;
    T m = xi[0];
    for (i64 j = 1; j < C; ++j) m = std::max(m, xi[j]);
    T z = 0;
    for (i64 j = 0; j < C; ++j) {
      oi[j] = std::exp(xi[j] - m);
      z += oi[j];
    }
    const T inv = T(1) / z;
    for (i64 j = 0; j < C; ++j) oi[j] *= inv;
  }
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, R, C]() mutable {
      if (!x.has_grad()) return;
      for (i64 r = 0; r < R; ++r) {
        const T* y = out.data() + r * C;
        const T* gy = out.grad_data() + r * C;
        T dot = 0;
        for (i64 j = 0; j < C; ++j) dot += gy[j] * y[j];
        T* gx = x.grad_data() + r * C;
        for (i64 j = 0; j < C; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

enum class Activation { silu, softplus, sigmoid, exp, softmax_last_axis };

template <typename T>
Tensor<T> activations(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::silu: return silu(x);
    case Activation::softplus: return softplus(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::exp: return exp_elem(x);
    case Activation::softmax_last_axis: return softmax_lastdim(x);
  }
  check(false, "unknown activation kind");
  return {};
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-position zero-mean unit-variance over the last axis, scaled by gain.
// No additive bias.
template <typename T>
Tensor<T> layernorm_nobias(const Tensor<T>& x, const Tensor<T>& gain) {
  check(x.rank() >= 1, "layernorm needs rank >= 1");
  const i64 D = x.dim(x.rank() - 1);
  check(gain.rank() == 1 && gain.dim(0) == D, "layernorm gain must be [", D, "], got ",
        shape_str(gain.shape()));
  const i64 R = x.numel() / D;
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(R));
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  for (i64 r = 0; r < R; ++r) {
    const T* xi = x.data() + r * D;
    T mean = 0;
    for (i64 j = 0; j < D; ++j) mean += xi[j];
    mean /= T(D);
    T var = 0;
    for (i64 j = 0; j < D; ++j) {
      const T d = xi[j] - mean;
      var += d * d;
    }
    var /= T(D);
    const T istd = T(1) / std::sqrt(var + T(kLayerNormEps));
    inv_std[static_cast<size_t>(r)] = istd;
    T* oi = out.data() + r * D;
    T* xh = xhat.data() + r * D;
    for (i64 j = 0; j < D; ++j) {
      xh[j] = (xi[j] - mean) * istd;
      oi[j] = xh[j] * gain.at(j);
    }
  }
  if (Tape<T>* tape = detail::result_tape(x, gain)) {
    tape->attach_output(out);
    tape->record(out, [x = x, gain = gain, out, R, D, inv_std = std::move(inv_std), xhat = std::move(xhat)]() mutable {
      for (i64 r = 0; r < R; ++r) {
        const T* gy = out.grad_data() + r * D;
        const T* xh = xhat.data() + r * D;
        if (gain.has_grad())
          for (i64 j = 0; j < D; ++j) gain.grad_data()[j] += gy[j] * xh[j];
        if (x.has_grad()) {
          // d xhat = g*gy;  dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          T s1 = 0, s2 = 0;
          for (i64 j = 0; j < D; ++j) {
            const T dxh = gy[j] * gain.at(j);
            s1 += dxh;
            s2 += dxh * xh[j];
          }
          s1 /= T(D);
          s2 /= T(D);
          const T istd = inv_std[static_cast<size_t>(r)];
          T* gx = x.grad_data() + r * D;
          for (i64 j = 0; j < D; ++j) {
            const T dxh = gy[j] * gain.at(j);
            gx[j] += istd * (dxh - s1 - xh[j] * s2);
          }
        }
      }
    });
  }
  return out;
}

// Depthwise causal 1-d convolution over n_seqs independent segments of x.
// x is [(n_seqs*L) x I], filters [I x C] with tap C-1 the current step,
// bias [I]. Output at position t depends only on positions <= t.
template <typename T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& filters, const Tensor<T>& bias,
                                  i64 n_seqs = 1) {
  check(x.rank() == 2 && filters.rank() == 2 && bias.rank() == 1, "conv1d shapes: x ", shape_str(x.shape()),
        " filters ", shape_str(filters.shape()), " bias ", shape_str(bias.shape()));
  const i64 I = x.dim(1), C = filters.dim(1);
  check(filters.dim(0) == I && bias.dim(0) == I, "conv1d channel mismatch: x has ", I, " channels, filters ",
        shape_str(filters.shape()), ", bias ", shape_str(bias.shape()));
  check(C >= 1, "conv width must be >= 1");
  check(x.dim(0) % n_seqs == 0, "conv1d rows ", x.dim(0), " not divisible into ", n_seqs, " sequences");
  const i64 L = x.dim(0) / n_seqs;
  Tensor<T> out(x.shape());
  for (i64 s = 0; s < n_seqs; ++s) {
    const T* xs = x.data() + s * L * I;
    T* os = out.data() + s * L * I;
    for (i64 t = 0; t < L; ++t) {
      for (i64 i = 0; i < I; ++i) {
        T acc = bias.at(i);
        for (i64 k = 0; k < C; ++k) {
          const i64 src = t - (C - 1 - k);  // k = C-1 is the current step
          if (src >= 0) acc += filters.at(i, k) * xs[src * I + i];
        }
        os[t * I + i] = acc;
      }
    }
  }
  if (Tape<T>* tape = detail::result_tape(x, filters, bias)) {
    tape->attach_output(out);
    tape->record(out, [x = x, filters = filters, bias = bias, out, n_seqs, L, I, C]() mutable {
      for (i64 s = 0; s < n_seqs; ++s) {
        const T* xs = x.data() + s * L * I;
        const T* gys = out.grad_data() + s * L * I;
        T* gxs = x.has_grad() ? x.grad_data() + s * L * I : nullptr;
        for (i64 t = 0; t < L; ++t) {
          for (i64 i = 0; i < I; ++i) {
            const T gy = gys[t * I + i];
            if (bias.has_grad()) bias.grad_data()[i] += gy;
            for (i64 k = 0; k < C; ++k) {
              const i64 src = t - (C - 1 - k);
              if (src < 0) continue;
              if (filters.has_grad()) filters.grad_data()[i * C + k] += gy * xs[src * I + i];
              if (gxs) gxs[src * I + i] += gy * filters.at(i, k);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out({1});
  T acc = 0;
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) acc += x.at(i);
  out.at(0) = acc;
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, n]() mutable {
      if (!x.has_grad()) return;
      const T g = out.grad_data()[0];
      for (i64 i = 0; i < n; ++i) x.grad_data()[i] += g;
    });
  }
  return out;
}

// Embedding-style row gather: out[i] = table[ids[i]]. Backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<i64>& ids) {
  check(table.rank() == 2, "gather_rows table must be 2-d, got ", shape_str(table.shape()));
  const i64 R = table.dim(0), C = table.dim(1);
  const i64 n = static_cast<i64>(ids.size());
  check(n >= 1, "gather_rows needs at least one index");
  for (i64 id : ids) check(id >= 0 && id < R, "row index ", id, " out of range [0,", R, ")");
  Tensor<T> out({n, C});
  for (i64 i = 0; i < n; ++i)
    std::copy_n(table.data() + ids[static_cast<size_t>(i)] * C, C, out.data() + i * C);
  if (Tape<T>* tape = detail::result_tape(table)) {
    tape->attach_output(out);
    tape->record(out, [table = table, out, ids, n, C]() mutable {
      if (!table.has_grad()) return;
      for (i64 i = 0; i < n; ++i)
        detail::axpy(T(1), out.grad_data() + i * C, table.grad_data() + ids[static_cast<size_t>(i)] * C, C);
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, i64 r0, i64 r1) {
  check(x.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows [", r0, ",", r1,
        ") out of range for ", shape_str(x.shape()));
  const i64 C = x.dim(1);
  Tensor<T> out({r1 - r0, C});
  std::copy_n(x.data() + r0 * C, (r1 - r0) * C, out.data());
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, r0, r1, C]() mutable {
      if (x.has_grad()) detail::axpy(T(1), out.grad_data(), x.grad_data() + r0 * C, (r1 - r0) * C);
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, i64 c0, i64 c1) {
  check(x.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_cols [", c0, ",", c1,
        ") out of range for ", shape_str(x.shape()));
  const i64 R = x.dim(0), C = x.dim(1), W = c1 - c0;
  Tensor<T> out({R, W});
  for (i64 r = 0; r < R; ++r) std::copy_n(x.data() + r * C + c0, W, out.data() + r * W);
  if (Tape<T>* tape = detail::result_tape(x)) {
    tape->attach_output(out);
    tape->record(out, [x = x, out, R, C, c0, W]() mutable {
      if (!x.has_grad()) return;
      for (i64 r = 0; r < R; ++r)
        detail::axpy(T(1), out.grad_data() + r * W, x.grad_data() + r * C + c0, W);
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat_cols needs at least one part");
  const i64 R = parts[0].dim(0);
  i64 C = 0;
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    check(p.rank() == 2 && p.dim(0) == R, "concat_cols parts must share row count");
    C += p.dim(1);
    if (p.tape()) {
      check(!tape || tape == p.tape(), "operands attached to different tapes");
      tape = p.tape();
    }
  }
  Tensor<T> out({R, C});
  i64 off = 0;
  for (const auto& p : parts) {
    const i64 W = p.dim(1);
    for (i64 r = 0; r < R; ++r) std::copy_n(p.data() + r * W, W, out.data() + r * C + off);
    off += W;
  }
  if (tape) {
    tape->attach_output(out);
    tape->record(out, [parts = parts, out, R, C]() mutable {
      i64 off = 0;
      for (auto& p : parts) {
        const i64 W = p.dim(1);
        if (p.has_grad())
          for (i64 r = 0; r < R; ++r)
            detail::axpy(T(1), out.grad_data() + r * C + off, p.grad_data() + r * W, W);
        off += W;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat_rows needs at least one part");
  const i64 C = parts[0].dim(1);
  i64 R = 0;
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    check(p.rank() == 2 && p.dim(1) == C, "concat_rows parts must share column count");
    R += p.dim(0);
    if (p.tape()) {
      check(!tape || tape == p.tape(), "operands attached to different tapes");
      tape = p.tape();
    }
  }
  Tensor<T> out({R, C});
  i64 off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.numel(), out.data() + off * C);
    off += p.dim(0);
  }
  if (tape) {
    tape->attach_output(out);
    tape->record(out, [parts = parts, out, C]() mutable {
      i64 off = 0;
      for (auto& p : parts) {
        if (p.has_grad()) detail::axpy(T(1), out.grad_data() + off * C, p.grad_data(), p.numel());
        off += p.dim(0);
      }
    });
  }
  return out;
}

// Scatters row groups back to their original positions: parts[g] holds the
// rows listed in rows[g]; the lists must partition [0, total_rows).
template <typename T>
Tensor<T> combine_rows(const std::vector<Tensor<T>>& parts, const std::vector<std::vector<i64>>& rows,
                       i64 total_rows) {
  check(parts.size() == rows.size(), "combine_rows: ", parts.size(), " parts vs ", rows.size(),
        " row lists");
  i64 C = -1;
  i64 covered = 0;
  Tape<T>* tape = nullptr;
  for (size_t g = 0; g < parts.size(); ++g) {
    if (rows[g].empty()) continue;
    check(parts[g].rank() == 2 && parts[g].dim(0) == static_cast<i64>(rows[g].size()),
          "combine_rows: part rows must match index list length");
    if (C < 0) C = parts[g].dim(1);
    check(parts[g].dim(1) == C, "combine_rows parts must share column count");
    covered += parts[g].dim(0);
    if (parts[g].tape()) {
      check(!tape || tape == parts[g].tape(), "operands attached to different tapes");
      tape = parts[g].tape();
    }
  }
  check(C > 0 && covered == total_rows, "combine_rows: row lists must cover every row exactly once (",
        covered, " of ", total_rows, ")");
  Tensor<T> out({total_rows, C});
  for (size_t g = 0; g < parts.size(); ++g)
    for (size_t i = 0; i < rows[g].size(); ++i)
      std::copy_n(parts[g].data() + static_cast<i64>(i) * C, C, out.data() + rows[g][i] * C);
  if (tape) {
    tape->attach_output(out);
    tape->record(out, [parts = parts, rows, out, C]() mutable {
      for (size_t g = 0; g < parts.size(); ++g) {
        if (!parts[g].has_grad()) continue;
        for (size_t i = 0; i < rows[g].size(); ++i)
          detail::axpy(T(1), out.grad_data() + rows[g][i] * C,
                       parts[g].grad_data() + static_cast<i64>(i) * C, C);
      }
    });
  }
  return out;
}

// Sets entries above the diagonal of each LxL block to -inf (causal mask,
// applied before softmax). Masked positions carry no gradient.
template <typename T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
  check(scores.rank() == 2 && scores.dim(0) == scores.dim(1), "causal_mask expects square scores, got ",
        shape_str(scores.shape()));
  const i64 L = scores.dim(0);
  Tensor<T> out(scores.shape());
  const T ninf = -std::numeric_limits<T>::infinity();
  for (i64 i = 0; i < L; ++i)
    for (i64 j = 0; j < L; ++j) out.at(i, j) = j <= i ? scores.at(i, j) : ninf;
  if (Tape<T>* tape = detail::result_tape(scores)) {
    tape->attach_output(out);
    tape->record(out, [scores = scores, out, L]() mutable {
      if (!scores.has_grad()) return;
      for (i64 i = 0; i < L; ++i)
        for (i64 j = 0; j <= i; ++j) scores.grad_data()[i * L + j] += out.grad_data()[i * L + j];
    });
  }
  return out;
}

// Mean negative log-likelihood over the positions where mask is true.
// Stable log-softmax; backward is (softmax - onehot)/n_scored on scored rows.
template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, const std::vector<int>& targets,
                               const std::vector<char>& mask) {
  check(logits.rank() == 2, "cross_entropy expects [SxV] logits, got ", shape_str(logits.shape()));
  const i64 S = logits.dim(0), V = logits.dim(1);
  check(static_cast<i64>(targets.size()) == S, "targets length ", targets.size(), " vs ", S, " rows");
  check(static_cast<i64>(mask.size()) == S, "mask length ", mask.size(), " vs ", S, " rows");
  i64 n_scored = 0;
  T loss = 0;
  for (i64 r = 0; r < S; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const int tgt = targets[static_cast<size_t>(r)];
    check(tgt >= 0 && tgt < V, "target ", tgt, " out of range [0,", V, ")");
    const T* row = logits.data() + r * V;
    T m = row[0];
    for (i64 j = 1; j < V; ++j) m = std::max(m, row[j]);
    T z = 0;
    for (i64 j = 0; j < V; ++j) z += std::exp(row[j] - m);
    loss += (m + std::log(z)) - row[tgt];
    ++n_scored;
  }
  check(n_scored > 0, "cross_entropy: no scored positions");
  Tensor<T> out = Tensor<T>::scalar(loss / T(n_scored));
  if (Tape<T>* tape = detail::result_tape(logits)) {
    tape->attach_output(out);
    tape->record(out, [logits = logits, out, targets, mask, S, V, n_scored]() mutable {
      if (!logits.has_grad()) return;
      const T g = out.grad_data()[0] / T(n_scored);
      for (i64 r = 0; r < S; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        const T* row = logits.data() + r * V;
        T* grow = logits.grad_data() + r * V;
        T m = row[0];
        for (i64 j = 1; j < V; ++j) m = std::max(m, row[j]);
        T z = 0;
        for (i64 j = 0; j < V; ++j) z += std::exp(row[j] - m);
        const T inv = T(1) / z;
        for (i64 j = 0; j < V; ++j) grow[j] += g * std::exp(row[j] - m) * inv;
        grow[targets[static_cast<size_t>(r)]] -= g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& targets) {
  return cross_entropy_masked(logits, targets, std::vector<char>(targets.size(), 1));
}

// Fills with draws from N(0, std^2), stream keyed by (seed, name).
template <typename T>
Tensor<T> randn(Shape shape, double stddev, u64 seed, std::string_view name) {
  Tensor<T> t(std::move(shape));
  auto rng = rng_for(seed, name);
  std::normal_distribution<double> dist(0.0, stddev);
  for (i64 i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(dist(rng));
  return t;
}

}  // namespace bm
