#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace sepdrop {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Extents of a dense (n, c, h, w) tensor, row-major.
struct Shape {
  std::int64_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::int64_t numel() const { return n * c * h * w; }
  constexpr std::int64_t plane() const { return h * w; }
  constexpr bool is_scalar() const { return n == 1 && c == 1 && h == 1 && w == 1; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
  }
};

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct TensorImpl;

/// One recorded operation. `backward` receives the gradient of the node's
/// output and accumulates into the inputs that require gradients.
template <typename Scalar>
struct TapeNode {
  using ImplPtr = std::shared_ptr<TensorImpl<Scalar>>;
  using BackwardFn = std::function<void(const Buffer<Scalar>& grad_out, std::span<const ImplPtr> inputs)>;

  std::string op;
  std::uint64_t seq = 0;
  std::vector<ImplPtr> inputs;
  std::weak_ptr<TensorImpl<Scalar>> output;
  BackwardFn backward;
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  Buffer<Scalar> data;
  Buffer<Scalar> grad;  // empty when absent
  bool requires_grad = false;
  std::shared_ptr<TapeNode<Scalar>> node;

  bool has_grad() const { return grad.size() != 0; }

  void accumulate_grad(const Buffer<Scalar>& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  void accumulate_grad(Buffer<Scalar>&& g) {
    if (grad.size() == 0)
      grad = std::move(g);
    else
      grad += g;
  }
};

namespace detail {
inline std::uint64_t next_tape_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a dense 4-D tensor with optional gradient and autodiff lineage.
/// Copies share storage; use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using Impl = TensorImpl<Scalar>;
  using ImplPtr = std::shared_ptr<Impl>;

  Tensor() : impl_(std::make_shared<Impl>()) {}
  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : impl_(std::make_shared<Impl>()) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
      throw ShapeError("negative extent in shape " + shape.str());
    impl_->shape = shape;
    impl_->data = Buffer<Scalar>::Constant(shape.numel(), fill);
  }
  Tensor(Shape shape, Buffer<Scalar> data) : impl_(std::make_shared<Impl>()) {
    if (data.size() != shape.numel())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    impl_->shape = shape;
    impl_->data = std::move(data);
  }
  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(shape, Buffer<Scalar>(Eigen::Map<const Buffer<Scalar>>(values.begin(), Eigen::Index(values.size())))) {}

  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) { return Tensor(shape, Scalar(0)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  const Buffer<Scalar>& data() const { return impl_->data; }
  Buffer<Scalar>& data() { return impl_->data; }
  Scalar operator[](std::int64_t i) const { return impl_->data[i]; }
  Scalar& operator[](std::int64_t i) { return impl_->data[i]; }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
    return impl_->data[0];
  }
  Scalar at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const Shape& s = shape();
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return impl_->has_grad(); }
  const Buffer<Scalar>& grad() const { return impl_->grad; }
  Buffer<Scalar>& grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.resize(0); }

  /// The op that produced this tensor, or null for leaves.
  const std::shared_ptr<TapeNode<Scalar>>& node() const { return impl_->node; }

  Tensor clone() const {
    Tensor t(shape(), Buffer<Scalar>(data()));
    t.set_requires_grad(requires_grad());
    return t;
  }
  Tensor detach() const { return Tensor(shape(), Buffer<Scalar>(data())); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape(), Buffer<Other>(data().template cast<Other>()));
  }

  const ImplPtr& impl() const { return impl_; }

 private:
  ImplPtr impl_;
};

/// Wraps a freshly computed buffer as the output of `op`. The node is recorded
/// only when grad mode is on and at least one input requires a gradient.
template <typename Scalar>
Tensor<Scalar> record_op(std::string op, Shape shape, Buffer<Scalar> data, std::vector<Tensor<Scalar>> inputs,
                         typename TapeNode<Scalar>::BackwardFn backward) {
  Tensor<Scalar> out(shape, std::move(data));
  if (!grad_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<Scalar>& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<TapeNode<Scalar>>();
  node->op = std::move(op);
  node->seq = detail::next_tape_seq();
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->output = out.impl();
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

/// Reverse-mode sweep from a scalar root. Each reachable node is visited once,
/// in reverse recording order; gradients accumulate into existing buffers.
template <typename Scalar>
void backward(const Tensor<Scalar>& root) {
  if (!root.shape().is_scalar())
    throw ShapeError("backward requires a scalar root, got " + root.shape().str());
  if (!root.requires_grad()) return;

  std::vector<TapeNode<Scalar>*> order;
  std::unordered_set<const TapeNode<Scalar>*> seen;
  std::vector<TapeNode<Scalar>*> stack;
  if (root.node()) stack.push_back(root.node().get());
  while (!stack.empty()) {
    TapeNode<Scalar>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (in->node) stack.push_back(in->node.get());
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

  root.impl()->accumulate_grad(Buffer<Scalar>::Ones(1));
  for (TapeNode<Scalar>* n : order) {
    auto out = n->output.lock();
    if (!out || !out->has_grad()) continue;
    std::span<const std::shared_ptr<TensorImpl<Scalar>>> ins(n->inputs);
    n->backward(out->grad, ins);
  }
}

}  // namespace sepdrop
