#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vp {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for operand-shape violations; the message names the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation receives NaN/Inf input or produces a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a file cannot be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl;

struct TapeNode {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives the output gradient and accumulates into inputs that require grad.
  std::function<void(const std::vector<double>&)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;  // null for leaves

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Operations on tensors that require grad record a tape node unless a
/// NoGradGuard is active.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<const double> data() const;
  /// Direct write access; never recorded on the tape.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  /// Allocates (if needed) and fills the grad buffer with zeros.
  void zero_grad();
  void clear_grad();

  bool is_leaf() const;
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Counts multiply-accumulates performed by forward matmul-family ops on this
/// thread while alive. Nested scopes each see the full count.
class MacCounterScope {
 public:
  MacCounterScope();
  ~MacCounterScope();
  MacCounterScope(const MacCounterScope&) = delete;
  MacCounterScope& operator=(const MacCounterScope&) = delete;
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
};

// Forward primitives. Broadcasting follows numpy rules.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// [m,k]x[k,n]; [...,m,k]x[k,n] (leading dims folded); [b,m,k]x[b,k,n] batched.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * weight[out, in]^T + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor permute(const Tensor& a, const std::vector<int>& order);
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
/// Normalizes along `axis` to zero mean and unit variance (no affine).
Tensor layer_norm(const Tensor& a, int axis, double eps = 1e-5);
/// tanh approximation: 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3))).
Tensor gelu(const Tensor& a);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Selects entries along `axis` by index list (used for gathering rows/columns).
Tensor index_select(const Tensor& a, int axis, std::span<const std::int64_t> indices);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Populates grads for every requires_grad leaf reachable from `loss`.
/// Interior gradients are reset first, so repeated calls on the same tape
/// (after zeroing leaf grads) reproduce identical results.
void backward(const Tensor& loss);

/// As above, and guarantees each tensor in `params` ends up with a grad
/// buffer (zeros when unreachable from the loss).
void backward(const Tensor& loss, std::span<Tensor> params);

}  // namespace vp
