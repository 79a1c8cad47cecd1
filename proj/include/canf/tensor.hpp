// Dense row-major tensors with a reverse-mode differentiation graph.
//
// A Tensor<Scalar> is a cheap handle: copies share storage and graph
// history. Use clone() for an independent buffer and detach() to cut the
// history. Scalar is float for training and double for verification.

#ifndef CANF_TENSOR_HPP_
#define CANF_TENSOR_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace canf {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

template <typename Scalar>
struct TensorImpl;

template <typename Scalar>
struct GradNode {
  using Buffers = std::vector<std::vector<Scalar>*>;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<Scalar>>> inputs;
  // grad_in[i] is null when inputs[i] does not need a gradient.
  std::function<void(std::span<const Scalar> grad_out, const Buffers& grad_in)>
      backward;
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<Scalar>> storage;
  bool is_param = false;
  std::shared_ptr<GradNode<Scalar>> node;

  bool tracked() const { return is_param || node != nullptr; }
};

/// Thread-local switch for graph recording. Inference paths wrap their work
/// in a NoGradGuard so no history is kept.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor();
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::vector<Scalar> values);

  static Tensor scalar(Scalar value) { return Tensor(Shape{1}, {value}); }
  /// Wraps an existing impl; used by the op layer.
  explicit Tensor(std::shared_ptr<TensorImpl<Scalar>> impl) : impl_(std::move(impl)) {}

  const Shape& shape() const { return impl_->shape; }
  Index dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  Index numel() const { return static_cast<Index>(impl_->storage->size()); }

  std::span<const Scalar> data() const { return *impl_->storage; }
  /// Mutable access. Only legal on tensors without history (leaves);
  /// intended for parameter updates and test fixtures.
  std::span<Scalar> mutable_data();

  Scalar operator[](Index i) const { return (*impl_->storage)[static_cast<std::size_t>(i)]; }
  Scalar item() const;

  /// Marks this tensor as a trainable leaf.
  Tensor& set_param(bool on = true);
  bool is_param() const { return impl_->is_param; }
  bool tracked() const { return impl_->tracked(); }

  Tensor detach() const;
  Tensor clone() const;

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data().begin(), data().end());
    return Tensor<Other>(shape(), std::move(out));
  }

  const std::shared_ptr<TensorImpl<Scalar>>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_->storage == other.impl_->storage; }

 private:
  std::shared_ptr<TensorImpl<Scalar>> impl_;
};

/// Gradients for every trainable leaf reachable from a loss. Leaves that the
/// loss does not depend on read back as zeros of their own shape.
template <typename Scalar>
class Gradients {
 public:
  Tensor<Scalar> operator[](const Tensor<Scalar>& param) const;
  bool contains(const Tensor<Scalar>& param) const;
  std::size_t size() const { return grads_.size(); }

  void emplace(const TensorImpl<Scalar>* key, Tensor<Scalar> grad) {
    grads_.insert_or_assign(key, std::move(grad));
  }

 private:
  std::unordered_map<const TensorImpl<Scalar>*, Tensor<Scalar>> grads_;
};

/// Reverse-mode sweep from a scalar loss.
template <typename Scalar>
Gradients<Scalar> backward(const Tensor<Scalar>& loss);

/// Builds an op result. The node is attached only when grad mode is on and
/// at least one input is tracked.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, std::vector<Scalar> values, const char* op,
                           std::vector<Tensor<Scalar>> inputs,
                           typename std::function<void(std::span<const Scalar>,
                                                       const typename GradNode<Scalar>::Buffers&)>
                               backward_rule);

}  // namespace canf

#endif  // CANF_TENSOR_HPP_
