#include "canf/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace canf {

namespace {
thread_local bool grad_mode_enabled = true;
}  // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

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

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {
void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (Index e : shape) {
    if (e < 1) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
  }
}
}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor() : Tensor(Shape{1}) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) {
  validate_shape(shape);
  impl_ = std::make_shared<TensorImpl<Scalar>>();
  impl_->storage = std::make_shared<std::vector<Scalar>>(
      static_cast<std::size_t>(shape_numel(shape)), fill);
  impl_->shape = std::move(shape);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> values) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<Index>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<TensorImpl<Scalar>>();
  impl_->storage = std::make_shared<std::vector<Scalar>>(std::move(values));
  impl_->shape = std::move(shape);
}

template <typename Scalar>
std::span<Scalar> Tensor<Scalar>::mutable_data() {
  if (impl_->node) throw ContractError("mutable_data() on a tensor with graph history");
  return *impl_->storage;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_param(bool on) {
  if (impl_->node) throw ContractError("only leaf tensors can be parameters");
  impl_->is_param = on;
  return *this;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  auto impl = std::make_shared<TensorImpl<Scalar>>();
  impl->shape = impl_->shape;
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return Tensor(shape(), std::vector<Scalar>(data().begin(), data().end()));
}

template <typename Scalar>
Tensor<Scalar> Gradients<Scalar>::operator[](const Tensor<Scalar>& param) const {
  auto it = grads_.find(param.impl().get());
  if (it == grads_.end()) return Tensor<Scalar>(param.shape());
  return it->second;
}

template <typename Scalar>
bool Gradients<Scalar>::contains(const Tensor<Scalar>& param) const {
  return grads_.count(param.impl().get()) != 0;
}

template <typename Scalar>
Tensor<Scalar> make_result(
    Shape shape, std::vector<Scalar> values, const char* op, std::vector<Tensor<Scalar>> inputs,
    typename std::function<void(std::span<const Scalar>, const typename GradNode<Scalar>::Buffers&)>
        backward_rule) {
  Tensor<Scalar> out(std::move(shape), std::move(values));
  if (!GradMode::enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor<Scalar>& t) { return t.tracked(); });
  if (!any) return out;
  auto node = std::make_shared<GradNode<Scalar>>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward_rule);
  out.impl()->node = std::move(node);
  return out;
}

template <typename Scalar>
Gradients<Scalar> backward(const Tensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Gradients<Scalar> result;
  if (!loss.tracked()) return result;

  // Iterative post-order DFS gives a topological order with each node once.
  using Impl = TensorImpl<Scalar>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      Impl* child = impl->node->inputs[next++].get();
      if (child->tracked() && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<Impl*, std::vector<Scalar>> grads;
  grads[loss.impl().get()] = std::vector<Scalar>(1, Scalar(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    // Element references survive rehashing; iterators do not.
    std::vector<Scalar>& grad_out = found->second;
    if (impl->node) {
      typename GradNode<Scalar>::Buffers buffers;
      buffers.reserve(impl->node->inputs.size());
      for (auto& in : impl->node->inputs) {
        if (!in->tracked()) {
          buffers.push_back(nullptr);
          continue;
        }
        auto& g = grads[in.get()];
        if (g.empty()) g.assign(in->storage->size(), Scalar(0));
        buffers.push_back(&g);
      }
      impl->node->backward(grad_out, buffers);
    }
    if (impl->is_param) {
      result.emplace(impl, Tensor<Scalar>(impl->shape, std::move(grad_out)));
    }
    grads.erase(impl);
  }
  return result;
}

#define CANF_INSTANTIATE(S)                                                                    \
  template class Tensor<S>;                                                                    \
  template class Gradients<S>;                                                                 \
  template Gradients<S> backward<S>(const Tensor<S>&);                                         \
  template Tensor<S> make_result<S>(                                                           \
      Shape, std::vector<S>, const char*, std::vector<Tensor<S>>,                              \
      std::function<void(std::span<const S>, const typename GradNode<S>::Buffers&)>);

CANF_INSTANTIATE(float)
CANF_INSTANTIATE(double)

#undef CANF_INSTANTIATE

}  // namespace canf
