#include "mxa/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace mxa {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
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

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor of shape " + shape_str(shape) + " given " +
                                std::to_string(values.size()) + " values");
  }
  impl_->grad.assign(values.size(), 0.0);
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->values.size(); }
std::span<const double> Tensor::values() const { return impl_->values; }
std::span<double> Tensor::mutable_values() { return impl_->values; }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::mutable_grad() const { return impl_->grad; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->leaf; }

void Tensor::zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->values, false); }

void Tape::record(std::string_view op_name, std::vector<Tensor> inputs, Tensor& output,
                  BackwardFn backward) {
  output.impl_->requires_grad = true;
  output.impl_->leaf = false;
  nodes_.push_back(Node{std::string(op_name), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& output) {
  if (output.numel() != 1) {
    throw std::invalid_argument("backward without a seed needs a scalar output, got " +
                                shape_str(output.shape()));
  }
  const double one = 1.0;
  backward(output, std::span<const double>(&one, 1));
}

void Tape::backward(const Tensor& output, std::span<const double> seed) {
  if (seed.size() != output.numel()) {
    throw std::invalid_argument("backward seed has " + std::to_string(seed.size()) +
                                " values for output of shape " + shape_str(output.shape()));
  }
  // Intermediate gradients are per pass; only leaves accumulate across passes.
  for (auto& node : nodes_) node.output.zero_grad();
  auto g = output.impl_->grad.data();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  last_visits_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
    ++last_visits_;
  }
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.name);
  return names;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

NoGradGuard::NoGradGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

namespace detail {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record(std::string_view op_name, std::vector<Tensor> inputs, Tensor& output,
            Tape::BackwardFn backward) {
  Tape* tape = g_active_tape;
  if (!tape) return;
  bool needed = false;
  for (const auto& t : inputs) needed = needed || (t.defined() && t.requires_grad());
  if (!needed) return;
  tape->record(op_name, std::move(inputs), output, std::move(backward));
}

}  // namespace detail

}  // namespace mxa
