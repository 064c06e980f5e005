#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

namespace vloss {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

/// Bad input: wrong shape, unknown name, malformed file, conflicting labels.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure discovered while running: NaN loss, IO error.
class RuntimeAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                "tensors hold float or double");
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
class Tensor;

namespace detail {

template <typename Scalar>
struct TensorImpl;

template <typename Scalar>
struct Node {
  std::string op;
  std::vector<Tensor<Scalar>> inputs;
  // Receives the finished output (data and grad) and accumulates into inputs.
  std::function<void(const TensorImpl<Scalar>& out)> backward;
};

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty when absent
  bool requires_grad = false;
  std::shared_ptr<Node<Scalar>> producer;
  std::uint64_t id = next_tensor_id();
};

}  // namespace detail

/// Dense row-major tensor with value semantics on a shared, immutable buffer.
///
/// Copies alias the same storage; catalog ops always allocate new outputs.
/// Leaf tensors created with `requires_grad` collect gradients from
/// `backward`; optimizers may rewrite leaf data between steps.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using Impl = detail::TensorImpl<Scalar>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (numel_of(shape) != static_cast<Index>(data.size())) {
      throw ValidationError("tensor: shape " + shape_str(shape) + " needs " +
                            std::to_string(numel_of(shape)) + " values, got " +
                            std::to_string(data.size()));
    }
    for (Index d : shape) {
      if (d < 0) throw ValidationError("tensor: negative dimension in " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<Scalar>(numel_of(shape), Scalar(0)), requires_grad);
  }
  static Tensor full(const Shape& shape, Scalar value, bool requires_grad = false) {
    return Tensor(shape, std::vector<Scalar>(numel_of(shape), value), requires_grad);
  }
  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<Scalar>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  Index dim(Index axis) const {
    const Index r = rank();
    if (axis < 0) axis += r;
    return impl_->shape.at(static_cast<std::size_t>(axis));
  }
  Index rank() const { return static_cast<Index>(impl_->shape.size()); }
  Index numel() const { return static_cast<Index>(impl_->data.size()); }
  static constexpr DType dtype() { return dtype_of<Scalar>(); }
  std::uint64_t id() const { return impl_->id; }

  std::span<const Scalar> data() const { return impl_->data; }
  const std::vector<Scalar>& values() const { return impl_->data; }
  Scalar operator[](Index i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  Scalar item() const {
    if (numel() != 1) throw ValidationError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  /// In-place access for optimizers and loaders; only valid on leaves.
  std::span<Scalar> mutable_data() {
    if (impl_->producer) throw ValidationError("mutable_data: tensor is not a leaf");
    return impl_->data;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return !impl_->producer; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Scalar> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  const std::shared_ptr<detail::Node<Scalar>>& producer() const { return impl_->producer; }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  Impl& impl() const { return *impl_; }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

namespace detail {

template <typename Scalar>
std::span<Scalar> grad_buffer(const Tensor<Scalar>& t) {
  auto& impl = t.impl();
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), Scalar(0));
  return impl.grad;
}

template <typename Scalar>
bool any_requires_grad(const std::vector<Tensor<Scalar>>& inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

/// Builds an op output, attaching a tape node when any input needs gradients.
template <typename Scalar>
Tensor<Scalar> make_result(std::string op, Shape shape, std::vector<Scalar> data,
                           std::vector<Tensor<Scalar>> inputs,
                           std::function<void(const TensorImpl<Scalar>&)> backward) {
  const bool track = any_requires_grad(inputs);
  Tensor<Scalar> out(std::move(shape), std::move(data), track);
  if (track) {
    auto node = std::make_shared<Node<Scalar>>();
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl().producer = std::move(node);
  }
  return out;
}

}  // namespace detail

/// Topologically ordered record of the operations reachable from a root.
template <typename Scalar>
struct Tape {
  struct Entry {
    std::string op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
  };
  std::vector<Entry> entries;
  // Non-leaf tensors in the same order as `entries`.
  std::vector<std::shared_ptr<detail::TensorImpl<Scalar>>> outputs;
};

template <typename Scalar>
Tape<Scalar> record_tape(const Tensor<Scalar>& root);

template <typename Scalar>
using GradMap = std::unordered_map<std::uint64_t, std::vector<Scalar>>;

/// Reverse-mode sweep from a scalar loss.
///
/// Leaf gradients accumulate across calls until `zero_grad`; intermediate
/// gradients are released once consumed. The graph itself is owned by the
/// tensors and is replayed identically on every call.
template <typename Scalar>
GradMap<Scalar> backward(const Tensor<Scalar>& loss);

}  // namespace vloss
