#include "vitprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace vp {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_mac_counter = 0;

using detail::TapeNode;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

int normalize_axis(int axis, int rank, std::string_view op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    std::ostringstream os;
    os << op << ": axis " << axis << " out of range for rank " << rank;
    throw ShapeError(os.str());
  }
  return a;
}

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
}

void require_finite(const Tensor& t, std::string_view op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input of shape " + shape_str(t.shape()));
    }
  }
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Wraps a freshly computed buffer, recording a tape node when any input needs grad.
Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<ImplPtr> inputs,
                   std::function<void(const std::vector<double>&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    impl->requires_grad = true;
    auto node = std::make_shared<TapeNode>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

struct Lanes {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

Lanes lanes_of(const Shape& shape, int axis) {
  Lanes l;
  for (int i = 0; i < axis; ++i) l.outer *= shape[i];
  l.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

// Visits every index of `shape` in row-major order, tracking two strided offsets.
template <typename F>
void for_each_strided(const Shape& shape, const std::vector<std::int64_t>& sa,
                      const std::vector<std::int64_t>& sb, F&& f) {
  const int rank = static_cast<int>(shape.size());
  const std::int64_t total = numel_of(shape);
  if (total == 0) return;
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0, ob = 0;
  const std::int64_t last = shape[rank - 1];
  const std::int64_t la = sa[rank - 1], lb = sb[rank - 1];
  for (std::int64_t base = 0; base < total; base += last) {
    for (std::int64_t j = 0; j < last; ++j) f(base + j, oa + j * la, ob + j * lb);
    for (int d = rank - 2; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(rank, 1);
  p.sa.assign(rank, 0);
  p.sb.assign(rank, 0);
  const auto astr = contiguous_strides(a);
  const auto bstr = contiguous_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const int ia = static_cast<int>(i) - static_cast<int>(rank - a.size());
    const int ib = static_cast<int>(i) - static_cast<int>(rank - b.size());
    const std::int64_t da = ia >= 0 ? a[ia] : 1;
    const std::int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) shape_mismatch(op, a, b);
    p.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) p.sa[i] = astr[ia];
    if (ib >= 0 && db != 1) p.sb[i] = bstr[ib];
  }
  return p;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, std::string_view op) {
  require_defined(a, op);
  require_defined(b, op);
  require_finite(a, op);
  require_finite(b, op);
  auto plan = plan_broadcast(a.shape(), b.shape(), op);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  std::vector<double> out(numel_of(plan.out));
  if (a.shape() == b.shape()) {
    const std::size_t n = out.size();
    switch (kind) {
      case BinaryKind::kAdd:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i];
        break;
      case BinaryKind::kSub:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i];
        break;
      case BinaryKind::kMul:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i];
        break;
    }
  } else {
    for_each_strided(plan.out, plan.sa, plan.sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      switch (kind) {
        case BinaryKind::kAdd: out[o] = ad[ia] + bd[ib]; break;
        case BinaryKind::kSub: out[o] = ad[ia] - bd[ib]; break;
        case BinaryKind::kMul: out[o] = ad[ia] * bd[ib]; break;
      }
    });
  }
  ImplPtr ai = a.impl(), bi = b.impl();
  Shape out_shape = plan.out;
  return make_result(std::move(out_shape), std::move(out), op, {ai, bi},
                     [ai, bi, plan, kind](const std::vector<double>& g) {
                       double* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
                       double* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
                       const double* ad = ai->data.data();
                       const double* bd = bi->data.data();
                       const double sign_b = kind == BinaryKind::kSub ? -1.0 : 1.0;
                       for_each_strided(plan.out, plan.sa, plan.sb,
                                        [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                                          if (kind == BinaryKind::kMul) {
                                            if (ga) ga[ia] += g[o] * bd[ib];
                                            if (gb) gb[ib] += g[o] * ad[ia];
                                          } else {
                                            if (ga) ga[ia] += g[o];
                                            if (gb) gb[ib] += sign_b * g[o];
                                          }
                                        });
                     });
}

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
             double* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
             double* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transposed(const double* src, std::int64_t rows, std::int64_t cols) {
  std::vector<double> out(rows * cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
             double* c) {
  const auto bt = transposed(b, n, k);
  gemm_nn(m, n, k, a, bt.data(), c);
}

}  // namespace

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  }
  const auto n = numel_of(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  return shape()[normalize_axis(axis, rank(), "dim")];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != shape().size()) throw ShapeError("at(): rank mismatch for " + shape_str(shape()));
  std::int64_t off = 0;
  std::size_t d = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape()[d]) throw ShapeError("at(): index out of range for " + shape_str(shape()));
    off = off * shape()[d] + i;
    ++d;
  }
  return impl_->data[off];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }
bool Tensor::has_grad() const { return !impl_->grad.empty() || impl_->data.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::mutable_grad() { return impl_->grad_buffer(); }

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

Tensor Tensor::detach() const { return from_data(shape(), impl_->data, false); }

Tensor Tensor::clone() const {
  auto t = from_data(shape(), impl_->data, impl_->requires_grad);
  t.impl_->grad = impl_->grad;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

MacCounterScope::MacCounterScope() : start_(g_mac_counter) {}
MacCounterScope::~MacCounterScope() = default;
std::uint64_t MacCounterScope::count() const { return g_mac_counter - start_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  require_finite(a, "scale");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  ImplPtr ai = a.impl();
  return make_result(a.shape(), std::move(out), "scale", {ai}, [ai, factor](const std::vector<double>& g) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Tensor gelu(const Tensor& a) {
  require_defined(a, "gelu");
  require_finite(a, "gelu");
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  ImplPtr ai = a.impl();
  return make_result(a.shape(), std::move(out), "gelu", {ai}, [ai](const std::vector<double>& g) {
    auto& ga = ai->grad_buffer();
    const auto& x = ai->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      ga[i] += g[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Contractions

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  bool batched = false;
  if (b.rank() == 2) {
    k = as.back();
    if (bs[0] != k) shape_mismatch("matmul", as, bs);
    m = a.numel() / std::max<std::int64_t>(k, 1);
    if (k == 0) m = numel_of(Shape(as.begin(), as.end() - 1));
    n = bs[1];
    out_shape.assign(as.begin(), as.end() - 1);
    out_shape.push_back(n);
  } else if (a.rank() == 3 && b.rank() == 3 && as[0] == bs[0] && as[2] == bs[1]) {
    batched = true;
    batch = as[0];
    m = as[1];
    k = as[2];
    n = bs[2];
    out_shape = {batch, m, n};
  } else {
    shape_mismatch("matmul", as, bs);
  }
  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::int64_t s = 0; s < batch; ++s) {
    gemm_nn(m, n, k, ad + s * m * k, bd + (batched ? s * k * n : 0), out.data() + s * m * n);
  }
  g_mac_counter += static_cast<std::uint64_t>(batch * m * n * k);
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(std::move(out_shape), std::move(out), "matmul", {ai, bi},
                     [ai, bi, batch, m, n, k, batched](const std::vector<double>& g) {
                       for (std::int64_t s = 0; s < batch; ++s) {
                         const double* gs = g.data() + s * m * n;
                         const double* as = ai->data.data() + s * m * k;
                         const std::int64_t boff = batched ? s * k * n : 0;
                         if (ai->requires_grad) {
                           gemm_nt(m, k, n, gs, bi->data.data() + boff, ai->grad_buffer().data() + s * m * k);
                         }
                         if (bi->requires_grad) {
                           gemm_tn(m, n, k, as, gs, bi->grad_buffer().data() + boff);
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
    shape_mismatch("linear", x.shape(), weight.shape());
  }
  const std::int64_t in = weight.dim(1);
  const std::int64_t out_f = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    shape_mismatch("linear(bias)", weight.shape(), bias.shape());
  }
  require_finite(x, "linear");
  require_finite(weight, "linear");
  if (bias.defined()) require_finite(bias, "linear");
  const std::int64_t m = in == 0 ? numel_of(Shape(x.shape().begin(), x.shape().end() - 1)) : x.numel() / in;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(out_f);
  std::vector<double> out(m * out_f, 0.0);
  if (bias.defined()) {
    const double* bd = bias.data().data();
    for (std::int64_t i = 0; i < m; ++i) std::copy(bd, bd + out_f, out.data() + i * out_f);
  }
  gemm_nt(m, out_f, in, x.data().data(), weight.data().data(), out.data());
  g_mac_counter += static_cast<std::uint64_t>(m * out_f * in);
  ImplPtr xi = x.impl(), wi = weight.impl();
  ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<ImplPtr> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return make_result(std::move(out_shape), std::move(out), "linear", std::move(inputs),
                     [xi, wi, bi, m, in, out_f](const std::vector<double>& g) {
                       if (xi->requires_grad) gemm_nn(m, in, out_f, g.data(), wi->data.data(), xi->grad_buffer().data());
                       if (wi->requires_grad) gemm_tn(m, in, out_f, g.data(), xi->data.data(), wi->grad_buffer().data());
                       if (bi && bi->requires_grad) {
                         auto& gb = bi->grad_buffer();
                         for (std::int64_t i = 0; i < m; ++i) {
                           for (std::int64_t j = 0; j < out_f; ++j) gb[j] += g[i * out_f + j];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Layout

Tensor permute(const Tensor& a, const std::vector<int>& order) {
  require_defined(a, "permute");
  const int rank = a.rank();
  if (static_cast<int>(order.size()) != rank) {
    throw ShapeError("permute: order length " + std::to_string(order.size()) + " for shape " + shape_str(a.shape()));
  }
  std::vector<bool> seen(rank, false);
  for (int o : order) {
    if (o < 0 || o >= rank || seen[o]) throw ShapeError("permute: invalid order for shape " + shape_str(a.shape()));
    seen[o] = true;
  }
  require_finite(a, "permute");
  const auto in_strides = contiguous_strides(a.shape());
  Shape out_shape(rank);
  std::vector<std::int64_t> src_strides(rank);
  for (int i = 0; i < rank; ++i) {
    out_shape[i] = a.shape()[order[i]];
    src_strides[i] = in_strides[order[i]];
  }
  const auto dst_strides = contiguous_strides(out_shape);
  std::vector<double> out(a.numel());
  const double* src = a.data().data();
  for_each_strided(out_shape, src_strides, dst_strides,
                   [&](std::int64_t o, std::int64_t s, std::int64_t) { out[o] = src[s]; });
  ImplPtr ai = a.impl();
  Shape os = out_shape;
  return make_result(std::move(out_shape), std::move(out), "permute", {ai},
                     [ai, os, src_strides, dst_strides](const std::vector<double>& g) {
                       auto& ga = ai->grad_buffer();
                       for_each_strided(os, src_strides, dst_strides,
                                        [&](std::int64_t o, std::int64_t s, std::int64_t) { ga[s] += g[o]; });
                     });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  require_defined(a, "transpose");
  const int r = a.rank();
  const int x = normalize_axis(axis0, r, "transpose");
  const int y = normalize_axis(axis1, r, "transpose");
  std::vector<int> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x], order[y]);
  return permute(a, order);
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  int infer = -1;
  std::int64_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = a.numel() / known;
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  require_finite(a, "reshape");
  std::vector<double> out(a.data().begin(), a.data().end());
  ImplPtr ai = a.impl();
  return make_result(std::move(shape), std::move(out), "reshape", {ai}, [ai](const std::vector<double>& g) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  require_defined(a, "slice");
  const int ax = normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length < 0 || start + length > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for shape " + shape_str(a.shape()));
  }
  require_finite(a, "slice");
  const Lanes l = lanes_of(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  std::vector<double> out(l.outer * length * l.inner);
  const double* src = a.data().data();
  for (std::int64_t o = 0; o < l.outer; ++o) {
    std::copy(src + (o * l.n + start) * l.inner, src + (o * l.n + start + length) * l.inner,
              out.data() + o * length * l.inner);
  }
  ImplPtr ai = a.impl();
  return make_result(std::move(out_shape), std::move(out), "slice", {ai},
                     [ai, l, start, length](const std::vector<double>& g) {
                       auto& ga = ai->grad_buffer();
                       for (std::int64_t o = 0; o < l.outer; ++o) {
                         const double* gs = g.data() + o * length * l.inner;
                         double* gd = ga.data() + (o * l.n + start) * l.inner;
                         for (std::int64_t i = 0; i < length * l.inner; ++i) gd[i] += gs[i];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  for (const auto& p : parts) require_defined(p, "concat");
  const int ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) shape_mismatch("concat", parts[0].shape(), p.shape());
    for (int d = 0; d < p.rank(); ++d) {
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) shape_mismatch("concat", parts[0].shape(), p.shape());
    }
    require_finite(p, "concat");
    out_shape[ax] += p.shape()[ax];
  }
  const Lanes lo = lanes_of(out_shape, ax);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::int64_t> offsets;
  std::vector<ImplPtr> inputs;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t len = p.shape()[ax];
    const double* src = p.data().data();
    for (std::int64_t o = 0; o < lo.outer; ++o) {
      std::copy(src + o * len * lo.inner, src + (o + 1) * len * lo.inner,
                out.data() + (o * lo.n + off) * lo.inner);
    }
    offsets.push_back(off);
    inputs.push_back(p.impl());
    off += len;
  }
  auto ins = inputs;
  return make_result(std::move(out_shape), std::move(out), "concat", std::move(inputs),
                     [ins, offsets, lo, ax](const std::vector<double>& g) {
                       for (std::size_t k = 0; k < ins.size(); ++k) {
                         if (!ins[k]->requires_grad) continue;
                         const std::int64_t len = ins[k]->shape[ax];
                         auto& gd = ins[k]->grad_buffer();
                         for (std::int64_t o = 0; o < lo.outer; ++o) {
                           const double* gs = g.data() + (o * lo.n + offsets[k]) * lo.inner;
                           double* dst = gd.data() + o * len * lo.inner;
                           for (std::int64_t i = 0; i < len * lo.inner; ++i) dst[i] += gs[i];
                         }
                       }
                     });
}

Tensor index_select(const Tensor& a, int axis, std::span<const std::int64_t> indices) {
  require_defined(a, "index_select");
  const int ax = normalize_axis(axis, a.rank(), "index_select");
  const Lanes l = lanes_of(a.shape(), ax);
  for (auto i : indices) {
    if (i < 0 || i >= l.n) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for shape " + shape_str(a.shape()));
    }
  }
  require_finite(a, "index_select");
  const auto cnt = static_cast<std::int64_t>(indices.size());
  Shape out_shape = a.shape();
  out_shape[ax] = cnt;
  std::vector<double> out(l.outer * cnt * l.inner);
  const double* src = a.data().data();
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t j = 0; j < cnt; ++j) {
      std::copy(src + (o * l.n + indices[j]) * l.inner, src + (o * l.n + indices[j] + 1) * l.inner,
                out.data() + (o * cnt + j) * l.inner);
    }
  }
  ImplPtr ai = a.impl();
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_result(std::move(out_shape), std::move(out), "index_select", {ai},
                     [ai, l, idx](const std::vector<double>& g) {
                       auto& ga = ai->grad_buffer();
                       const auto cnt = static_cast<std::int64_t>(idx.size());
                       for (std::int64_t o = 0; o < l.outer; ++o) {
                         for (std::int64_t j = 0; j < cnt; ++j) {
                           const double* gs = g.data() + (o * cnt + j) * l.inner;
                           double* gd = ga.data() + (o * l.n + idx[j]) * l.inner;
                           for (std::int64_t i = 0; i < l.inner; ++i) gd[i] += gs[i];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  require_defined(a, "sum");
  const int ax = normalize_axis(axis, a.rank(), "sum");
  require_finite(a, "sum");
  const Lanes l = lanes_of(a.shape(), ax);
  std::vector<double> out(l.outer * l.inner, 0.0);
  const double* src = a.data().data();
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t i = 0; i < l.n; ++i) {
      const double* row = src + (o * l.n + i) * l.inner;
      double* dst = out.data() + o * l.inner;
      for (std::int64_t j = 0; j < l.inner; ++j) dst[j] += row[j];
    }
  }
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + ax);
  }
  ImplPtr ai = a.impl();
  return make_result(std::move(out_shape), std::move(out), "sum", {ai}, [ai, l](const std::vector<double>& g) {
    auto& ga = ai->grad_buffer();
    for (std::int64_t o = 0; o < l.outer; ++o) {
      for (std::int64_t i = 0; i < l.n; ++i) {
        double* dst = ga.data() + (o * l.n + i) * l.inner;
        const double* gs = g.data() + o * l.inner;
        for (std::int64_t j = 0; j < l.inner; ++j) dst[j] += gs[j];
      }
    }
  });
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  require_defined(a, "mean");
  const int ax = normalize_axis(axis, a.rank(), "mean");
  const auto n = a.shape()[ax];
  if (n == 0) throw ShapeError("mean: empty axis in shape " + shape_str(a.shape()));
  return scale(sum(a, ax, keepdim), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& a) {
  require_defined(a, "sum_all");
  return sum(reshape(a, {a.numel()}), 0, false);
}

Tensor softmax(const Tensor& a, int axis) {
  require_defined(a, "softmax");
  const int ax = normalize_axis(axis, a.rank(), "softmax");
  require_finite(a, "softmax");
  const Lanes l = lanes_of(a.shape(), ax);
  const double* x = a.data().data();
  std::vector<double> y(a.numel());
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t j = 0; j < l.inner; ++j) {
      const std::int64_t base = o * l.n * l.inner + j;
      double mx = x[base];
      for (std::int64_t i = 1; i < l.n; ++i) mx = std::max(mx, x[base + i * l.inner]);
      double total = 0.0;
      for (std::int64_t i = 0; i < l.n; ++i) {
        const double e = std::exp(x[base + i * l.inner] - mx);
        y[base + i * l.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::int64_t i = 0; i < l.n; ++i) y[base + i * l.inner] *= inv;
    }
  }
  ImplPtr ai = a.impl();
  auto result = make_result(a.shape(), std::move(y), "softmax", {ai}, nullptr);
  if (result.impl()->node) {
    std::weak_ptr<TensorImpl> self = result.impl();
    result.impl()->node->backward = [ai, l, self](const std::vector<double>& g) {
      auto out = self.lock();
      const auto& y = out->data;
      auto& ga = ai->grad_buffer();
      for (std::int64_t o = 0; o < l.outer; ++o) {
        for (std::int64_t j = 0; j < l.inner; ++j) {
          const std::int64_t base = o * l.n * l.inner + j;
          double dot = 0.0;
          for (std::int64_t i = 0; i < l.n; ++i) dot += g[base + i * l.inner] * y[base + i * l.inner];
          for (std::int64_t i = 0; i < l.n; ++i) {
            const auto k = base + i * l.inner;
            ga[k] += y[k] * (g[k] - dot);
          }
        }
      }
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& a, int axis, double eps) {
  require_defined(a, "layer_norm");
  const int ax = normalize_axis(axis, a.rank(), "layer_norm");
  if (a.shape()[ax] < 1) throw ShapeError("layer_norm: empty axis in shape " + shape_str(a.shape()));
  require_finite(a, "layer_norm");
  const Lanes l = lanes_of(a.shape(), ax);
  const double* x = a.data().data();
  std::vector<double> y(a.numel());
  std::vector<double> inv_std(l.outer * l.inner);
  const double n = static_cast<double>(l.n);
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t j = 0; j < l.inner; ++j) {
      const std::int64_t base = o * l.n * l.inner + j;
      double mu = 0.0;
      for (std::int64_t i = 0; i < l.n; ++i) mu += x[base + i * l.inner];
      mu /= n;
      double var = 0.0;
      for (std::int64_t i = 0; i < l.n; ++i) {
        const double d = x[base + i * l.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      if (!std::isfinite(is)) throw NumericError("layer_norm: zero variance with eps=0 in shape " + shape_str(a.shape()));
      inv_std[o * l.inner + j] = is;
      for (std::int64_t i = 0; i < l.n; ++i) y[base + i * l.inner] = (x[base + i * l.inner] - mu) * is;
    }
  }
  ImplPtr ai = a.impl();
  auto result = make_result(a.shape(), std::move(y), "layer_norm", {ai}, nullptr);
  if (result.impl()->node) {
    std::weak_ptr<TensorImpl> self = result.impl();
    result.impl()->node->backward = [ai, l, self, inv_std = std::move(inv_std)](const std::vector<double>& g) {
      auto out = self.lock();
      const auto& y = out->data;
      auto& ga = ai->grad_buffer();
      const double n = static_cast<double>(l.n);
      for (std::int64_t o = 0; o < l.outer; ++o) {
        for (std::int64_t j = 0; j < l.inner; ++j) {
          const std::int64_t base = o * l.n * l.inner + j;
          double gm = 0.0, gy = 0.0;
          for (std::int64_t i = 0; i < l.n; ++i) {
            const auto k = base + i * l.inner;
            gm += g[k];
            gy += g[k] * y[k];
          }
          gm /= n;
          gy /= n;
          const double is = inv_std[o * l.inner + j];
          for (std::int64_t i = 0; i < l.n; ++i) {
            const auto k = base + i * l.inner;
            ga[k] += is * (g[k] - gm - y[k] * gy);
          }
        }
      }
    };
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [batch x classes], got " + shape_str(logits.shape()));
  const std::int64_t batch = logits.dim(0);
  const std::int64_t classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  }
  if (batch == 0) throw ShapeError("cross_entropy: empty batch");
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  require_finite(logits, "cross_entropy");
  const double* x = logits.data().data();
  std::vector<double> probs(batch * classes);
  double loss = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* row = x + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::int64_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[b]];
  }
  loss /= static_cast<double>(batch);
  ImplPtr li = logits.impl();
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result({}, {loss}, "cross_entropy", {li},
                     [li, probs = std::move(probs), ys, batch, classes](const std::vector<double>& g) {
                       auto& gl = li->grad_buffer();
                       const double s = g[0] / static_cast<double>(batch);
                       for (std::int64_t b = 0; b < batch; ++b) {
                         for (std::int64_t c = 0; c < classes; ++c) {
                           const double target = c == ys[b] ? 1.0 : 0.0;
                           gl[b * classes + c] += s * (probs[b * classes + c] - target);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  // Iterative post-order DFS gives a topological order of the tape.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  TensorImpl* root = loss.impl().get();
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  for (auto* impl : order) {
    if (impl->node) impl->grad.assign(impl->data.size(), 0.0);
  }
  if (!root->requires_grad) return;
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (impl->node && impl->node->backward) impl->node->backward(impl->grad);
  }
}

void backward(const Tensor& loss, std::span<Tensor> params) {
  backward(loss);
  for (auto& p : params) {
    if (p.impl()->grad.empty()) p.zero_grad();
  }
}

}  // namespace vp
