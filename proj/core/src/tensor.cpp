#include "medvit/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace medvit {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (medvit::numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " needs " +
                     std::to_string(medvit::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<T>>(std::move(values));
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = medvit::numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
detail::TensorImpl<T>& Tensor<T>::impl() const {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return impl().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return impl().storage->size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return {impl().storage->data(), impl().storage->size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  return {impl().storage->data(), impl().storage->size()};
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape()));
  return (*impl().storage)[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl().requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  impl().requires_grad = value;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl().node == nullptr;
}

template <typename T>
const char* Tensor<T>::op() const {
  return impl().node ? impl().node->op : "";
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !impl().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return {impl().grad.data(), impl().grad.size()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), T(0));
}

template <typename T>
T* Tensor<T>::grad_buffer() const {
  auto& im = impl();
  if (!im.requires_grad) return nullptr;
  if (im.grad.empty()) im.grad.assign(im.storage->size(), T(0));
  return im.grad.data();
}

template <typename T>
void Tensor<T>::backward() const {
  auto& root = impl();
  if (root.storage->size() != 1) {
    throw ShapeError("backward() needs a scalar root, got shape " + to_string(root.shape));
  }
  if (!root.requires_grad) throw Error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS: producers precede consumers in `order`.
  std::vector<detail::TensorImpl<T>*> order;
  std::unordered_set<const detail::TensorImpl<T>*> visited;
  std::vector<std::pair<detail::TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* inputs = node->node ? &node->node->inputs : nullptr;
    if (inputs && next < inputs->size()) {
      detail::TensorImpl<T>* child = (*inputs)[next++].impl_.get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* t : order) {
    if (t->node) t->grad.assign(t->storage->size(), T(0));
  }
  if (root.grad.empty()) root.grad.assign(1, T(0));
  root.grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl<T>* t = *it;
    if (t->node && t->node->backward) t->node->backward(std::span<const T>(t->grad));
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorImpl<T>>();
  out.impl_->shape = impl().shape;
  out.impl_->storage = impl().storage;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::copy() const {
  return Tensor(impl().shape, *impl().storage, false);
}

template <typename T>
std::shared_ptr<std::vector<T>> Tensor<T>::storage() const {
  return impl().storage;
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::shared_ptr<std::vector<T>> storage,
                             std::vector<Tensor> inputs, const char* op,
                             std::function<void(std::span<const T>)> backward) {
  if (medvit::numel(shape) != storage->size()) {
    throw ShapeError(std::string(op) + ": result shape " + to_string(shape) +
                     " does not match " + std::to_string(storage->size()) + " values");
  }
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorImpl<T>>();
  out.impl_->shape = std::move(shape);
  out.impl_->storage = std::move(storage);
  const bool track =
      grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    out.impl_->requires_grad = true;
    auto node = std::make_shared<detail::Node<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl_->node = std::move(node);
  }
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace medvit
