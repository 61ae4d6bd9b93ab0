#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace retovla {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GraphError : std::logic_error {
  using std::logic_error::logic_error;
};

/// 64-byte aligned storage whose value-initialization leaves elements
/// uninitialized, so buffers that are fully overwritten skip the zero fill.
/// The fixed alignment also pins the summation order of vectorized kernels,
/// which keeps results bitwise reproducible.
template <typename T>
struct UninitAllocator : std::allocator<T> {
  static constexpr std::align_val_t kAlignment{64};
  template <typename U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <typename U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};

using Buffer = std::vector<double, UninitAllocator<double>>;

struct TensorNode {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_parameter = false;
  std::uint64_t id = 0;

  // Allocates a zero gradient on first touch.
  Buffer& grad_buffer();
  // Gradient storage for a contribution that overwrites when `fresh` comes
  // back true and accumulates otherwise.
  double* grad_target(bool& fresh);
  // Adds n values into the gradient; the first contribution is copied.
  void accumulate_grad(const double* src, std::size_t n);
};

/// Handle to a dense row-major array of doubles with an optional gradient.
///
/// Copies share the underlying node, so a parameter keeps its identity when
/// it is passed around by value. Use `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);
  /// A leaf that always requires grad and is reported by the optimizer.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool is_parameter() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  std::uint64_t node_id() const;

  /// Independent copy of the values; the result is a graph leaf.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Reverse-mode tape. One per thread; ops append to it while recording is
/// enabled and at least one operand requires grad.
class ComputationGraph {
 public:
  using BackwardFn = std::function<void(TensorNode& out)>;

  struct Record {
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    BackwardFn backward;
  };

  void record(std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output, BackwardFn backward);
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
  bool recording_ = true;
};

ComputationGraph& current_graph();

/// Disables recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Runs the reverse sweep over the current thread's tape and consumes it.
void backward(const Tensor& loss);

/// Discards any ops recorded on the current thread's tape.
void reset_graph();

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// x [..., in] times weight [in, out] plus an optional bias [out].
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose_last2(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
/// permute(reshape(x, view), perm) in one op.
Tensor reshape_permute(const Tensor& x, const Shape& view, const std::vector<std::size_t>& perm);
/// reshape(permute(x, perm), shape) in one op.
Tensor permute_reshape(const Tensor& x, const std::vector<std::size_t>& perm, Shape shape);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
/// Repeats x along a new leading axis of size `batch`.
Tensor broadcast_batch(const Tensor& x, std::size_t batch);
/// Gathers rows of a [V, D] table. The result has shape `index_shape + [D]`.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids,
                 const Shape& index_shape);

// Binary ops accept b with shape equal to a, or equal to a trailing suffix of
// a's shape (broadcast over a's leading dimensions).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Multiplies every element of x by the single element of s.
Tensor scale_by(const Tensor& x, const Tensor& s);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
/// softmax(q k^T * scale) v over matching leading dimensions: q [..., Sq, d],
/// k and v [..., Sk, d]. Only the softmax weights are kept for backward; a
/// copy of them (not tracked) goes to `weights_out` when given.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                            Tensor* weights_out = nullptr);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of squared differences over all elements; scalar result.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

}  // namespace retovla
