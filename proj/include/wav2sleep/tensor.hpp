#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wav2sleep {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation's precondition (other than shape agreement) fails.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thread-local switch controlling whether new results record a backward graph.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array with an optional gradient slot.
///
/// A Tensor is a cheap handle; copies share storage. Results of operations
/// keep their inputs alive while they require grad, so calling backward() on
/// a scalar loss walks the whole recorded graph.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using NodeType = detail::Node<T>;
  using BackwardFn = std::function<void(NodeType&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Builds an operation result. The backward function is only retained when
  // grad mode is on and at least one parent requires grad.
  static Tensor make_result(Shape shape, std::vector<T> values,
                            std::initializer_list<const Tensor*> parents,
                            BackwardFn backward);
  static Tensor make_result(Shape shape, std::vector<T> values,
                            const std::vector<Tensor>& parents, BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return values().size(); }

  std::span<const T> values() const;
  // Mutable access is for leaves (parameters, inputs) only.
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  // Reverse-mode sweep from a scalar. Gradients accumulate into every
  // reachable tensor that requires grad.
  void backward() const;

  // Same values, no graph.
  Tensor detach() const;
  Tensor clone() const;

  NodeType& node() const { return *node_; }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}
  std::shared_ptr<NodeType> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what);

}  // namespace wav2sleep
