#include "spn/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

namespace spn::ag {

namespace {

std::atomic<bool> g_finite_checks{true};

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.valid() || !b.valid()) {
    throw TapeError(std::string(op) + ": invalid variable");
  }
  if (a.tape() != b.tape()) {
    throw TapeError(std::string(op) + ": operands live on different tapes");
  }
}

template <typename T>
void require_shape(const Var<T>& a, const Shape& expected, const char* op,
                   const char* what) {
  if (a.shape() != expected) {
    throw ShapeError(std::string(op) + ": " + what + " has shape " +
                     shape_str(a.shape()) + ", expected " + shape_str(expected));
  }
}

// C[M,N] += A[M,K] * B[K,N]. Zero entries of A are skipped entirely.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]. Zero entries of A are skipped.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// x [C,H,W] -> col [C*k*k, H*W], zero padded.
template <typename T>
void im2col(const T* x, int channels, int height, int width, int k, T* col) {
  const int pad = (k - 1) / 2;
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + y * width;
          if (sy < 0 || sy >= height) {
            std::fill(dst, dst + width, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * height + sy) * width;
          for (int xx = 0; xx < width; ++xx) {
            const int sx = xx + kx - pad;
            dst[xx] = (sx < 0 || sx >= width) ? T(0) : src[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int height, int width, int k, T* x) {
  const int pad = (k - 1) / 2;
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          T* dst = x + (static_cast<std::size_t>(c) * height + sy) * width;
          const T* src = row + y * width;
          for (int xx = 0; xx < width; ++xx) {
            const int sx = xx + kx - pad;
            if (sx >= 0 && sx < width) dst[sx] += src[xx];
          }
        }
      }
    }
  }
}

template <typename T>
Var<T> unary(const char* op, const Var<T>& a, T (*f)(T),
             T (*df)(T x, T y)) {
  auto in = a.value();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  Tape<T>* tape = a.tape();
  Var<T> result;
  result = tape->record(op, a.shape(), std::move(out), {a},
                        [a, df, tape, id = static_cast<int>(tape->size())](
                            std::span<const T> g) {
                          auto ga = tape->grad_buffer(a);
                          auto x = a.value();
                          auto y = tape->value(id);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[i] += g[i] * df(x[i], y[i]);
                          }
                        });
  return result;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
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

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

// ---- Tensor -------------------------------------------------------------

namespace {
void validate_shape(const Shape& s) {
  for (int e : s) {
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(s));
  }
}
}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)) {
  validate_shape(shape);
  data.assign(numel(shape), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values)
    : shape(std::move(s)), data(std::move(values)) {
  validate_shape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
}

// ---- Var ----------------------------------------------------------------

template <typename T>
const Shape& Var<T>::shape() const {
  return tape_->shape(id_);
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
Tensor<T> Var<T>::tensor() const {
  auto v = value();
  return Tensor<T>(shape(), std::vector<T>(v.begin(), v.end()));
}

template <typename T>
T Var<T>::item() const {
  auto v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return v[0];
}

// ---- Tape ---------------------------------------------------------------

template <typename T>
std::span<const T> Tape<T>::value(int id) const {
  const Node& n = nodes_[id];
  if (n.external) return {n.external, numel(n.shape)};
  return n.value;
}

template <typename T>
void Tape<T>::own(const Var<T>& v) const {
  if (v.tape() != this) throw TapeError("variable belongs to a different tape");
}

template <typename T>
Var<T> Tape<T>::push(Node node, const char* op) {
  if (finite_checks() && !node.external) {
    for (const T& x : node.value) {
      if (!std::isfinite(x)) {
        throw NonFiniteError(std::string("non-finite value produced by ") + op);
      }
    }
  }
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> t) {
  return leaf(std::move(t), false);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> t, bool requires_grad) {
  Node n;
  n.shape = std::move(t.shape);
  n.value = std::move(t.data);
  n.requires_grad = requires_grad;
  return push(std::move(n), "leaf");
}

template <typename T>
Var<T> Tape<T>::bind(const Tensor<T>& external, bool requires_grad) {
  Node n;
  n.shape = external.shape;
  n.external = external.data.data();
  n.requires_grad = requires_grad;
  return push(std::move(n), "bind");
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Shape shape, std::vector<T> value,
                       std::initializer_list<Var<T>> inputs, BackwardFn backward) {
  return record(op, std::move(shape), std::move(value), std::vector<Var<T>>(inputs),
                std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Shape shape, std::vector<T> value,
                       const std::vector<Var<T>>& inputs, BackwardFn backward) {
  if (backward_done_) throw TapeError(std::string(op) + ": tape already consumed");
  if (numel(shape) != value.size()) {
    throw ShapeError(std::string(op) + ": output size mismatch");
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    own(in);
    if (requires_grad(in.id())) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n), op);
}

template <typename T>
std::span<T> Tape<T>::grad_buffer(const Var<T>& v) {
  own(v);
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(numel(n.shape), T(0));
  return n.grad;
}

template <typename T>
std::vector<T> Tape<T>::grad(const Var<T>& v) const {
  own(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return std::vector<T>(numel(n.shape), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  own(loss);
  if (backward_done_) throw TapeError("backward already ran on this tape; re-record the graph");
  if (numel(loss.shape()) != 1) {
    throw TapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!requires_grad(loss.id())) {
    throw TapeError("loss is detached: no input requires grad");
  }
  backward_done_ = true;
  grad_buffer(loss)[0] = T(1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(n.grad);
  }
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "add");
  require_shape(b, a.shape(), "add", "rhs");
  auto x = a.value();
  auto y = b.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  Tape<T>* tape = a.tape();
  return tape->record("add", a.shape(), std::move(out), {a, b},
                      [a, b, tape](std::span<const T> g) {
                        for (const Var<T>& v : {a, b}) {
                          auto gv = tape->grad_buffer(v);
                          for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
                        }
                      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "mul");
  require_shape(b, a.shape(), "mul", "rhs");
  auto x = a.value();
  auto y = b.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  Tape<T>* tape = a.tape();
  return tape->record("mul", a.shape(), std::move(out), {a, b},
                      [a, b, tape](std::span<const T> g) {
                        auto x = a.value();
                        auto y = b.value();
                        auto ga = tape->grad_buffer(a);
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
                        auto gb = tape->grad_buffer(b);
                        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * x[i];
                      });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  auto x = a.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  Tape<T>* tape = a.tape();
  return tape->record("scale", a.shape(), std::move(out), {a},
                      [a, tape, factor](std::span<const T> g) {
                        auto ga = tape->grad_buffer(a);
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
                      });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>("tanh", a, [](T x) { return std::tanh(x); },
                  [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary<T>("relu", a, [](T x) { return x > 0 ? x : T(0); },
                  [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat");
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && s[d] != s0[d]) {
        throw ShapeError("concat: extent mismatch " + shape_str(s) + " vs " +
                         shape_str(s0));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];
  const std::size_t out_row = static_cast<std::size_t>(out_shape[axis]) * inner;

  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = static_cast<std::size_t>(p.shape()[axis]) * inner;
    auto v = p.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + o * row, row, out.begin() + o * out_row + offset);
    }
    offset += row;
  }
  Tape<T>* tape = parts[0].tape();
  return tape->record(
      "concat", out_shape, std::move(out), parts,
      [parts, tape, outer, inner, axis, out_row](std::span<const T> g) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t row = static_cast<std::size_t>(p.shape()[axis]) * inner;
          auto gp = tape->grad_buffer(p);
          if (!gp.empty()) {
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t i = 0; i < row; ++i) {
                gp[o * row + i] += g[o * out_row + offset + i];
              }
            }
          }
          offset += row;
        }
      });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  for (int e : shape) {
    if (e < 1) throw ShapeError("reshape: extents must be >= 1");
  }
  if (numel(shape) != numel(a.shape())) {
    throw ShapeError("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  }
  auto v = a.value();
  Tape<T>* tape = a.tape();
  return tape->record("reshape", std::move(shape), std::vector<T>(v.begin(), v.end()),
                      {a}, [a, tape](std::span<const T> g) {
                        auto ga = tape->grad_buffer(a);
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                      });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: expects rank 2");
  const int m = a.shape()[0], n = a.shape()[1];
  auto v = a.value();
  std::vector<T> out(v.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = v[static_cast<std::size_t>(i) * n + j];
  Tape<T>* tape = a.tape();
  return tape->record("transpose", {n, m}, std::move(out), {a},
                      [a, tape, m, n](std::span<const T> g) {
                        auto ga = tape->grad_buffer(a);
                        for (int i = 0; i < m; ++i)
                          for (int j = 0; j < n; ++j)
                            ga[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
                      });
}

template <typename T>
Var<T> rows(const Var<T>& a, int begin, int end) {
  const Shape& s = a.shape();
  if (s.empty() || begin < 0 || end > s[0] || begin >= end) {
    throw ShapeError("rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(s));
  }
  const std::size_t row = numel(s) / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  auto v = a.value();
  std::vector<T> out(v.begin() + begin * row, v.begin() + end * row);
  Tape<T>* tape = a.tape();
  return tape->record("rows", out_shape, std::move(out), {a},
                      [a, tape, begin, row](std::span<const T> g) {
                        auto ga = tape->grad_buffer(a);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * row + i] += g[i];
                      });
}

template <typename T>
Var<T> embed_lookup(const Var<T>& table, std::span<const int> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ShapeError("embed_lookup: table must be [V, E]");
  if (ids.empty()) throw ShapeError("embed_lookup: no ids");
  const int vocab = s[0], width = s[1];
  auto tv = table.value();
  std::vector<T> out(ids.size() * width);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= vocab) {
      throw std::out_of_range("embed_lookup: id " + std::to_string(ids[r]) +
                              " outside [0," + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[r]) * width, width,
                out.begin() + r * width);
  }
  Tape<T>* tape = table.tape();
  std::vector<int> id_copy(ids.begin(), ids.end());
  return tape->record("embed_lookup", {static_cast<int>(ids.size()), width}, std::move(out),
                      {table}, [table, tape, id_copy, width](std::span<const T> g) {
                        auto gt = tape->grad_buffer(table);
                        for (std::size_t r = 0; r < id_copy.size(); ++r) {
                          T* dst = gt.data() + static_cast<std::size_t>(id_copy[r]) * width;
                          for (int e = 0; e < width; ++e) dst[e] += g[r * width + e];
                        }
                      });
}

template <typename T>
Var<T> tile_spatial(const Var<T>& vec, int height, int width) {
  if (vec.shape().size() != 1) throw ShapeError("tile_spatial: expects a vector");
  if (height < 1 || width < 1) throw ShapeError("tile_spatial: empty extent");
  const int e = vec.shape()[0];
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  auto v = vec.value();
  std::vector<T> out(e * hw);
  for (int c = 0; c < e; ++c) std::fill_n(out.begin() + c * hw, hw, v[c]);
  Tape<T>* tape = vec.tape();
  return tape->record("tile_spatial", {e, height, width}, std::move(out), {vec},
                      [vec, tape, e, hw](std::span<const T> g) {
                        auto gv = tape->grad_buffer(vec);
                        for (int c = 0; c < e; ++c) {
                          T acc = 0;
                          for (std::size_t i = 0; i < hw; ++i) acc += g[c * hw + i];
                          gv[c] += acc;
                        }
                      });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  auto v = a.value();
  T acc = 0;
  for (const T& x : v) acc += x;
  Tape<T>* tape = a.tape();
  return tape->record("sum", {1}, {acc}, {a}, [a, tape](std::span<const T> g) {
    auto ga = tape->grad_buffer(a);
    for (auto& x : ga) x += g[0];
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& a, std::span<const T> weights) {
  auto v = a.value();
  if (weights.size() != v.size()) throw ShapeError("weighted_sum: weight count mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * weights[i];
  Tape<T>* tape = a.tape();
  std::vector<T> w(weights.begin(), weights.end());
  return tape->record("weighted_sum", {1}, {acc}, {a},
                      [a, tape, w = std::move(w)](std::span<const T> g) {
                        auto ga = tape->grad_buffer(a);
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
                      });
}

// ---- layers ---------------------------------------------------------------

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  require_same_tape(input, weight, "linear");
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (ws.size() != 2) throw ShapeError("linear: weight must be [Din, Dout]");
  const int din = ws[0], dout = ws[1];
  if (xs.empty() || xs.back() != din) {
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " +
                     shape_str(ws));
  }
  if (bias.valid()) {
    require_same_tape(input, bias, "linear");
    require_shape(bias, {dout}, "linear", "bias");
  }
  const int n = static_cast<int>(numel(xs) / din);
  std::vector<T> out(static_cast<std::size_t>(n) * dout, T(0));
  if (bias.valid()) {
    auto b = bias.value();
    for (int i = 0; i < n; ++i) std::copy(b.begin(), b.end(), out.begin() + static_cast<std::size_t>(i) * dout);
  }
  gemm_nn(input.value().data(), weight.value().data(), out.data(), n, din, dout);
  Shape out_shape = xs;
  out_shape.back() = dout;
  Tape<T>* tape = input.tape();
  std::vector<Var<T>> ins{input, weight};
  if (bias.valid()) ins.push_back(bias);
  return tape->record("linear", out_shape, std::move(out), ins,
                      [input, weight, bias, tape, n, din, dout](std::span<const T> g) {
                        auto gx = tape->grad_buffer(input);
                        if (!gx.empty()) gemm_nt(g.data(), weight.value().data(), gx.data(), n, dout, din);
                        auto gw = tape->grad_buffer(weight);
                        if (!gw.empty()) gemm_tn(input.value().data(), g.data(), gw.data(), din, n, dout);
                        if (bias.valid()) {
                          auto gb = tape->grad_buffer(bias);
                          if (!gb.empty()) {
                            for (int i = 0; i < n; ++i)
                              for (int j = 0; j < dout; ++j) gb[j] += g[static_cast<std::size_t>(i) * dout + j];
                          }
                        }
                      });
}

namespace {

template <typename T>
Var<T> conv_impl(const char* op, const Var<T>& input, const Var<T>& weight,
                 const Mask* mask, const Var<T>& bias) {
  require_same_tape(input, weight, op);
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4) throw ShapeError(std::string(op) + ": input must be [N,C,H,W]");
  if (ws.size() != 4 || ws[2] != ws[3]) {
    throw ShapeError(std::string(op) + ": weight must be [O,C,k,k]");
  }
  const int batch = xs[0], channels = xs[1], height = xs[2], width = xs[3];
  const int outc = ws[0], k = ws[2];
  if (ws[1] != channels) {
    throw ShapeError(std::string(op) + ": weight " + shape_str(ws) +
                     " does not match input " + shape_str(xs));
  }
  if (k % 2 == 0) throw ShapeError(std::string(op) + ": kernel size must be odd");
  if (bias.valid()) {
    require_same_tape(input, bias, op);
    require_shape(bias, {outc}, op, "bias");
  }
  const int kk = channels * k * k;
  const int hw = height * width;

  auto wv = weight.value();
  auto weff = std::make_shared<std::vector<T>>(wv.begin(), wv.end());
  std::shared_ptr<std::vector<std::uint8_t>> mbits;
  if (mask) {
    if (mask->shape != ws) {
      throw ShapeError(std::string(op) + ": mask shape " + shape_str(mask->shape) +
                       " does not match weight " + shape_str(ws));
    }
    for (std::size_t i = 0; i < mask->data.size(); ++i) {
      const auto m = mask->data[i];
      if (m > 1) throw std::invalid_argument(std::string(op) + ": mask is not binary");
      if (m == 0) (*weff)[i] = T(0);
    }
    mbits = std::make_shared<std::vector<std::uint8_t>>(mask->data);
  }

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch) * kk * hw);
  std::vector<T> out(static_cast<std::size_t>(batch) * outc * hw, T(0));
  auto xv = input.value();
  for (int b = 0; b < batch; ++b) {
    T* col = cols->data() + static_cast<std::size_t>(b) * kk * hw;
    im2col(xv.data() + static_cast<std::size_t>(b) * channels * hw, channels, height, width, k, col);
    T* ob = out.data() + static_cast<std::size_t>(b) * outc * hw;
    if (bias.valid()) {
      auto bv = bias.value();
      for (int o = 0; o < outc; ++o) std::fill_n(ob + static_cast<std::size_t>(o) * hw, hw, bv[o]);
    }
    gemm_nn(weff->data(), col, ob, outc, kk, hw);
  }

  Tape<T>* tape = input.tape();
  std::vector<Var<T>> ins{input, weight};
  if (bias.valid()) ins.push_back(bias);
  return tape->record(
      op, {batch, outc, height, width}, std::move(out), ins,
      [=](std::span<const T> g) {
        auto gx = tape->grad_buffer(input);
        auto gw = tape->grad_buffer(weight);
        std::vector<T> dcol;
        if (!gx.empty()) dcol.resize(static_cast<std::size_t>(kk) * hw);
        for (int b = 0; b < batch; ++b) {
          const T* gb = g.data() + static_cast<std::size_t>(b) * outc * hw;
          const T* col = cols->data() + static_cast<std::size_t>(b) * kk * hw;
          if (!gw.empty()) gemm_nt(gb, col, gw.data(), outc, hw, kk);
          if (!gx.empty()) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_tn(weff->data(), gb, dcol.data(), kk, outc, hw);
            col2im(dcol.data(), channels, height, width, k,
                   gx.data() + static_cast<std::size_t>(b) * channels * hw);
          }
        }
        // Masked entries never receive gradient.
        if (!gw.empty() && mbits) {
          for (std::size_t i = 0; i < gw.size(); ++i) {
            if ((*mbits)[i] == 0) gw[i] = T(0);
          }
        }
        if (bias.valid()) {
          auto gbias = tape->grad_buffer(bias);
          if (!gbias.empty()) {
            for (int b = 0; b < batch; ++b)
              for (int o = 0; o < outc; ++o) {
                const T* row = g.data() + (static_cast<std::size_t>(b) * outc + o) * hw;
                T acc = 0;
                for (int i = 0; i < hw; ++i) acc += row[i];
                gbias[o] += acc;
              }
          }
        }
      });
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  return conv_impl<T>("conv2d", input, weight, nullptr, bias);
}

template <typename T>
Var<T> conv2d_masked(const Var<T>& input, const Var<T>& weight, const Mask& mask,
                     const Var<T>& bias) {
  return conv_impl<T>("conv2d_masked", input, weight, &mask, bias);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_same_tape(x, gamma, "layer_norm");
  require_same_tape(x, beta, "layer_norm");
  const Shape& s = x.shape();
  const int d = s.back();
  require_shape(gamma, {d}, "layer_norm", "gamma");
  require_shape(beta, {d}, "layer_norm", "beta");
  const int n = static_cast<int>(numel(s) / d);
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv = std::make_shared<std::vector<T>>(n);
  std::vector<T> out(xv.size());
  for (int r = 0; r < n; ++r) {
    const T* row = xv.data() + static_cast<std::size_t>(r) * d;
    T mean = 0;
    for (int i = 0; i < d; ++i) mean += row[i];
    mean /= d;
    T var = 0;
    for (int i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= d;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (int i = 0; i < d; ++i) {
      const std::size_t idx = static_cast<std::size_t>(r) * d + i;
      (*xhat)[idx] = (row[i] - mean) * is;
      out[idx] = (*xhat)[idx] * gv[i] + bv[i];
    }
  }
  Tape<T>* tape = x.tape();
  return tape->record("layer_norm", s, std::move(out), {x, gamma, beta},
                      [=](std::span<const T> g) {
                        auto gx = tape->grad_buffer(x);
                        auto gg = tape->grad_buffer(gamma);
                        auto gb = tape->grad_buffer(beta);
                        auto gam = gamma.value();
                        for (int r = 0; r < n; ++r) {
                          const std::size_t base = static_cast<std::size_t>(r) * d;
                          T mean_dxh = 0, mean_dxh_xh = 0;
                          for (int i = 0; i < d; ++i) {
                            const T dxh = g[base + i] * gam[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * (*xhat)[base + i];
                            if (!gg.empty()) gg[i] += g[base + i] * (*xhat)[base + i];
                            if (!gb.empty()) gb[i] += g[base + i];
                          }
                          if (gx.empty()) continue;
                          mean_dxh /= d;
                          mean_dxh_xh /= d;
                          for (int i = 0; i < d; ++i) {
                            const T dxh = g[base + i] * gam[i];
                            gx[base + i] += (*inv)[r] * (dxh - mean_dxh - (*xhat)[base + i] * mean_dxh_xh);
                          }
                        }
                      });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 bool causal) {
  require_same_tape(q, k, "attention");
  require_same_tape(q, v, "attention");
  const Shape& s = q.shape();
  if (s.size() != 2) throw ShapeError("attention: q must be [T, W]");
  require_shape(k, s, "attention", "k");
  require_shape(v, s, "attention", "v");
  const int len = s[0], width = s[1];
  if (heads < 1 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) +
                     " not divisible by heads " + std::to_string(heads));
  }
  const int dh = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto qv = q.value();
  auto kv = k.value();
  auto vv = v.value();
  // probs[h][t][u], u <= t when causal (entries beyond stay zero).
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(heads) * len * len, T(0));
  std::vector<T> out(static_cast<std::size_t>(len) * width, T(0));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int t = 0; t < len; ++t) {
      const int last = causal ? t : len - 1;
      T* p = probs->data() + (static_cast<std::size_t>(h) * len + t) * len;
      T mx = -std::numeric_limits<T>::infinity();
      for (int u = 0; u <= last; ++u) {
        T dot = 0;
        for (int e = 0; e < dh; ++e) dot += qv[t * width + off + e] * kv[u * width + off + e];
        p[u] = dot * scale;
        mx = std::max(mx, p[u]);
      }
      T z = 0;
      for (int u = 0; u <= last; ++u) {
        p[u] = std::exp(p[u] - mx);
        z += p[u];
      }
      for (int u = 0; u <= last; ++u) p[u] /= z;
      T* o = out.data() + static_cast<std::size_t>(t) * width + off;
      for (int u = 0; u <= last; ++u) {
        const T pu = p[u];
        for (int e = 0; e < dh; ++e) o[e] += pu * vv[u * width + off + e];
      }
    }
  }
  Tape<T>* tape = q.tape();
  return tape->record(
      "attention", s, std::move(out), {q, k, v}, [=](std::span<const T> g) {
        auto gq = tape->grad_buffer(q);
        auto gk = tape->grad_buffer(k);
        auto gv = tape->grad_buffer(v);
        auto qv = q.value();
        auto kv = k.value();
        auto vv = v.value();
        std::vector<T> dp(len);
        for (int h = 0; h < heads; ++h) {
          const int off = h * dh;
          for (int t = 0; t < len; ++t) {
            const int last = causal ? t : len - 1;
            const T* p = probs->data() + (static_cast<std::size_t>(h) * len + t) * len;
            const T* go = g.data() + static_cast<std::size_t>(t) * width + off;
            T dot_pdp = 0;
            for (int u = 0; u <= last; ++u) {
              T acc = 0;
              for (int e = 0; e < dh; ++e) acc += go[e] * vv[u * width + off + e];
              dp[u] = acc;
              dot_pdp += p[u] * acc;
              if (!gv.empty()) {
                for (int e = 0; e < dh; ++e) gv[u * width + off + e] += p[u] * go[e];
              }
            }
            for (int u = 0; u <= last; ++u) {
              const T ds = p[u] * (dp[u] - dot_pdp) * scale;
              if (ds == T(0)) continue;
              for (int e = 0; e < dh; ++e) {
                if (!gq.empty()) gq[t * width + off + e] += ds * kv[u * width + off + e];
                if (!gk.empty()) gk[u * width + off + e] += ds * qv[t * width + off + e];
              }
            }
          }
        }
      });
}

template <typename T>
std::vector<double> cross_entropy_rows(std::span<const T> logits, int classes,
                                       std::span<const int> targets) {
  if (classes < 1 || logits.size() != targets.size() * static_cast<std::size_t>(classes)) {
    throw ShapeError("cross_entropy: logits/targets size mismatch");
  }
  std::vector<double> out(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const int t = targets[r];
    if (t < 0 || t >= classes) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " outside [0," + std::to_string(classes) + ")");
    }
    const T* row = logits.data() + r * classes;
    double mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0;
    for (int c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    out[r] = mx + std::log(z) - static_cast<double>(row[t]);
  }
  return out;
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets,
                             Reduction reduction) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("softmax_cross_entropy: logits must be [n, K]");
  const int n = s[0], classes = s[1];
  if (static_cast<int>(targets.size()) != n) {
    throw ShapeError("softmax_cross_entropy: expected " + std::to_string(n) + " targets");
  }
  auto per_row = cross_entropy_rows<T>(logits.value(), classes, targets);
  double total = 0;
  for (double x : per_row) total += x;
  const double norm = reduction == Reduction::Mean ? 1.0 / n : 1.0;
  std::vector<int> tgt(targets.begin(), targets.end());
  Tape<T>* tape = logits.tape();
  return tape->record("softmax_cross_entropy", {1}, {static_cast<T>(total * norm)}, {logits},
                      [logits, tape, tgt, n, classes, norm](std::span<const T> g) {
                        auto gl = tape->grad_buffer(logits);
                        auto lv = logits.value();
                        const double scale = static_cast<double>(g[0]) * norm;
                        for (int r = 0; r < n; ++r) {
                          const T* row = lv.data() + static_cast<std::size_t>(r) * classes;
                          double mx = row[0];
                          for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
                          double z = 0;
                          for (int c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
                          for (int c = 0; c < classes; ++c) {
                            double p = std::exp(static_cast<double>(row[c]) - mx) / z;
                            if (c == tgt[r]) p -= 1.0;
                            gl[static_cast<std::size_t>(r) * classes + c] += static_cast<T>(scale * p);
                          }
                        }
                      });
}

#define SPN_INSTANTIATE(T)                                                              \
  template struct Tensor<T>;                                                            \
  template class Var<T>;                                                                \
  template class Tape<T>;                                                               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                              \
  template Var<T> tanh(const Var<T>&);                                                  \
  template Var<T> sigmoid(const Var<T>&);                                               \
  template Var<T> relu(const Var<T>&);                                                  \
  template Var<T> concat(const std::vector<Var<T>>&, int);                              \
  template Var<T> reshape(const Var<T>&, Shape);                                        \
  template Var<T> transpose(const Var<T>&);                                             \
  template Var<T> rows(const Var<T>&, int, int);                                        \
  template Var<T> embed_lookup(const Var<T>&, std::span<const int>);                    \
  template Var<T> tile_spatial(const Var<T>&, int, int);                                \
  template Var<T> sum(const Var<T>&);                                                   \
  template Var<T> weighted_sum(const Var<T>&, std::span<const T>);                      \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> conv2d_masked(const Var<T>&, const Var<T>&, const Mask&, const Var<T>&); \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);           \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, bool);    \
  template Var<T> softmax_cross_entropy(const Var<T>&, std::span<const int>, Reduction); \
  template std::vector<double> cross_entropy_rows(std::span<const T>, int, std::span<const int>);

SPN_INSTANTIATE(float)
SPN_INSTANTIATE(double)

template struct Tensor<std::uint8_t>;

}  // namespace spn::ag
