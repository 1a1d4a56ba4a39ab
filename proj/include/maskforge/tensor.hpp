#pragma once

// Dense row-major tensor with a reverse-mode tape.
//
// A tensor is a shared handle; copies alias the same storage. Every op that
// sees an input with requires_grad records a node holding its inputs and a
// backward closure. Node ids grow monotonically with creation, so sorting the
// reachable set by descending id is a valid reverse-topological order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <type_traits>
#include <utility>
#include <vector>

namespace maskforge {

using shape_t = std::vector<std::size_t>;

inline std::size_t numel_of(const shape_t& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const shape_t& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void throw_shape(std::string_view op, const shape_t& a, const shape_t& b) {
  throw shape_error(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

enum class op_tag {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  shift,
  concat,
  slice,
  transpose,
  reshape,
  depthwise_conv1d,
  layer_norm,
  softmax,
  sigmoid,
  swish,
  glu,
  relu,
  mse,
  cross_entropy_with_logits,
  sum,
  mean,
  clamp,
  broadcast,
  gather,
  scatter,
};

namespace detail {

inline std::atomic<std::uint64_t>& id_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::atomic<bool>& debug_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline std::uint64_t*& flop_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}

template <class T>
struct tensor_node;

/// Allocator that default-initializes, so resize() on a fresh gradient
/// buffer skips the zero fill when the caller overwrites every element.
template <class T>
struct default_init_allocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = default_init_allocator<U>;
  };
  default_init_allocator() = default;
  template <class U>
  default_init_allocator(const default_init_allocator<U>&) noexcept {}
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T>
using grad_storage = std::vector<T, default_init_allocator<T>>;

template <class T>
struct tensor_impl {
  shape_t shape;
  std::vector<T> data;
  grad_storage<T> grad;  // empty means absent
  bool requires_grad = false;
  std::uint64_t id = ++id_counter();
  std::shared_ptr<tensor_node<T>> node;
};

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class no_grad_guard {
 public:
  no_grad_guard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~no_grad_guard() { detail::grad_mode() = previous_; }
  no_grad_guard(const no_grad_guard&) = delete;
  no_grad_guard& operator=(const no_grad_guard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// When on, ops reject non-finite inputs.
inline void set_debug_checks(bool on) { detail::debug_flag() = on; }
inline bool debug_checks() { return detail::debug_flag(); }

/// Counts multiply-add FLOPs (2 per MAC) of matmul and depthwise conv while alive.
class flop_counter {
 public:
  flop_counter() : previous_(detail::flop_sink()) { detail::flop_sink() = &count_; }
  ~flop_counter() { detail::flop_sink() = previous_; }
  flop_counter(const flop_counter&) = delete;
  flop_counter& operator=(const flop_counter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

inline void record_flops(std::uint64_t flops) {
  if (auto* sink = detail::flop_sink()) *sink += flops;
}

template <class T>
class basic_tensor {
 public:
  using value_type = T;
  using impl_type = detail::tensor_impl<T>;

  basic_tensor() = default;

  basic_tensor(shape_t shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<impl_type>()) {
    if (values.size() != numel_of(shape))
      throw shape_error("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static basic_tensor full(shape_t shape, T value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return basic_tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static basic_tensor zeros(shape_t shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static basic_tensor ones(shape_t shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static basic_tensor scalar(T value, bool requires_grad = false) { return full({1}, value, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  const shape_t& shape() const { return impl_->shape; }
  std::size_t dim(std::ptrdiff_t axis) const {
    const auto rank = static_cast<std::ptrdiff_t>(impl_->shape.size());
    return impl_->shape.at(static_cast<std::size_t>(axis < 0 ? axis + rank : axis));
  }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() & { return impl_->data; }
  const std::vector<T>& values() const& { return impl_->data; }
  std::vector<T> values() && { return impl_->data; }
  T item() const {
    if (numel() != 1) throw shape_error("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  basic_tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !impl_->grad.empty() && impl_->grad.size() == impl_->data.size(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Grad buffer, allocated zero-filled on first use.
  detail::grad_storage<T>& grad_buffer() {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }

  /// Grad storage for a caller that, when `fresh` comes back true, assigns
  /// every element instead of accumulating.
  T* grad_slot(bool& fresh) {
    fresh = impl_->grad.size() != impl_->data.size();
    if (fresh) {
      impl_->grad.clear();
      impl_->grad.resize(impl_->data.size());
    }
    return impl_->grad.data();
  }

  std::uint64_t id() const { return impl_->id; }
  bool is_leaf() const { return !impl_->node; }
  op_tag tag() const;

  /// Same values, fresh storage, no graph.
  basic_tensor detach() const { return basic_tensor(shape(), values(), false); }
  basic_tensor clone() const { return basic_tensor(shape(), values(), requires_grad()); }

  impl_type* impl() const { return impl_.get(); }
  const std::shared_ptr<impl_type>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<impl_type> impl_;
};

using tensor = basic_tensor<float>;

namespace detail {

template <class T>
struct tensor_node {
  op_tag tag = op_tag::leaf;
  std::vector<basic_tensor<T>> inputs;
  std::function<void(tensor_impl<T>& out)> backward;
};

}  // namespace detail

template <class T>
op_tag basic_tensor<T>::tag() const {
  return impl_->node ? impl_->node->tag : op_tag::leaf;
}

template <class T>
bool any_requires_grad(const std::vector<basic_tensor<T>>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.defined() && t.requires_grad(); });
}

/// Attaches a node to `out` when grad mode is on and some input requires grad.
template <class T, class Backward>
basic_tensor<T> record(basic_tensor<T> out, op_tag tag, std::vector<basic_tensor<T>> inputs, Backward&& backward) {
  if (!grad_enabled() || !any_requires_grad(inputs)) return out;
  auto node = std::make_shared<detail::tensor_node<T>>();
  node->tag = tag;
  node->inputs = std::move(inputs);
  node->backward = std::forward<Backward>(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

template <class T>
void check_finite(std::string_view op, const basic_tensor<T>& t) {
  if (!debug_checks()) return;
  for (T v : t.data())
    if (!std::isfinite(v)) throw numeric_error(std::string(op) + ": non-finite input");
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; intermediate gradients are scratch and cleared each sweep.
template <class T>
void backward(basic_tensor<T> root) {
  if (root.numel() != 1) throw shape_error("backward: root must be scalar, got shape " + shape_str(root.shape()));
  std::vector<detail::tensor_impl<T>*> order;
  std::unordered_set<detail::tensor_impl<T>*> seen;
  std::vector<detail::tensor_impl<T>*> stack{root.impl()};
  seen.insert(root.impl());
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    order.push_back(t);
    if (!t->node) continue;
    for (auto& in : t->node->inputs) {
      if (!in.defined() || !in.requires_grad()) continue;
      if (seen.insert(in.impl()).second) stack.push_back(in.impl());
    }
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });
  // Intermediate grads are scratch: allocated on first contribution and
  // released right after the node has propagated them.
  for (auto* t : order)
    if (t->node) detail::grad_storage<T>().swap(t->grad);
  if (root.impl()->grad.size() != 1) root.impl()->grad.assign(1, T(0));
  root.impl()->grad[0] += T(1);
  for (auto* t : order) {
    if (!t->node) continue;
    if (t->node->backward && t->grad.size() == t->data.size()) t->node->backward(*t);
    detail::grad_storage<T>().swap(t->grad);
  }
}

}  // namespace maskforge
