// Dense tensors and a tape-based reverse-mode differentiation engine.
//
// Everything is row-major and contiguous. Ops are free functions that record
// a node on the tape owning their inputs; Tape::backward replays the tape in
// reverse. All ops are templates instantiated for float (training) and double
// (finite-difference checking).

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spn::ag {

using Shape = std::vector<int>;

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

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Finite-value checks after every recorded op. On by default.
void set_finite_checks(bool enabled);
bool finite_checks();

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0));
  Tensor(Shape s, std::vector<T> values);

  std::size_t size() const { return data.size(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

// Binary mask for masked convolution weights; same shape as the weight.
using Mask = Tensor<std::uint8_t>;

template <typename T>
class Tape;

// Handle to a node on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }

  const Shape& shape() const;
  std::span<const T> value() const;
  bool requires_grad() const;
  Tensor<T> tensor() const;
  T item() const;

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> t);
  Var<T> leaf(Tensor<T> t, bool requires_grad = true);
  // Leaf that reads its value from `external` without copying. The tensor must
  // outlive the tape and stay unmodified while the tape is alive.
  Var<T> bind(const Tensor<T>& external, bool requires_grad = true);

  // Records an op output. `backward` is kept only if some input requires grad.
  Var<T> record(const char* op, Shape shape, std::vector<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn backward);
  Var<T> record(const char* op, Shape shape, std::vector<T> value,
                const std::vector<Var<T>>& inputs, BackwardFn backward);

  void backward(const Var<T>& loss);

  // Gradient of a node after backward (zeros if it received none).
  std::vector<T> grad(const Var<T>& v) const;

  // Op-internal: gradient buffer of `v`, allocated on first access. Returns an
  // empty span when `v` does not require grad.
  std::span<T> grad_buffer(const Var<T>& v);

  const Shape& shape(int id) const { return nodes_[id].shape; }
  std::span<const T> value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    const T* external = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Node node, const char* op);
  void own(const Var<T>& v) const;

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// ---- elementwise and structural ops -------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
// [m, n] -> [n, m]
template <typename T> Var<T> transpose(const Var<T>& a);
// Rows [begin, end) along axis 0.
template <typename T> Var<T> rows(const Var<T>& a, int begin, int end);
// table [V, E], ids -> [ids.size(), E]
template <typename T>
Var<T> embed_lookup(const Var<T>& table, std::span<const int> ids);
// vec [E] -> [E, height, width]
template <typename T> Var<T> tile_spatial(const Var<T>& vec, int height, int width);
template <typename T> Var<T> sum(const Var<T>& a);
// sum(a * weights) with constant weights.
template <typename T> Var<T> weighted_sum(const Var<T>& a, std::span<const T> weights);

// ---- layers -------------------------------------------------------------

// input [..., Din] x weight [Din, Dout] + bias [Dout] -> [..., Dout].
// `bias` may be an invalid Var.
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

// input [N, C, H, W], weight [O, C, k, k], bias [O] (optional) -> [N, O, H, W].
// Zero padding of (k-1)/2; cross-correlation.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

// As conv2d with effective weight = weight * mask. Masked weight entries get
// exactly zero gradient.
template <typename T>
Var<T> conv2d_masked(const Var<T>& input, const Var<T>& weight, const Mask& mask,
                     const Var<T>& bias);

// Normalizes over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5));

// Multi-head scaled dot-product attention over q, k, v of shape [T, W].
// With `causal`, query t attends to keys 0..t.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 bool causal);

enum class Reduction { Sum, Mean };

// logits [n, K], one target per row. Loss in nats.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets,
                             Reduction reduction = Reduction::Sum);

// Untaped per-row -log softmax(logits)[target], accumulated in double.
template <typename T>
std::vector<double> cross_entropy_rows(std::span<const T> logits, int classes,
                                       std::span<const int> targets);

}  // namespace spn::ag
