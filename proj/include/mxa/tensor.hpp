#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mxa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised when an activation or gradient leaves the finite range.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major array of doubles with an accumulated gradient buffer.
// Copies share storage; use detach() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Writes through this span are invisible to the tape.
  std::span<double> mutable_values();
  std::span<const double> grad() const;
  // Handle semantics: gradient accumulation does not require a mutable handle.
  std::span<double> mutable_grad() const;

  double item() const;
  double value(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  // True for tensors not produced by a recorded op.
  bool is_leaf() const;
  void zero_grad();
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Impl> impl_;

  friend class Tape;
};

// Define-by-run record of differentiable ops. Ops record onto the tape bound
// to the current thread by a TapeScope; with no scope bound nothing is
// recorded and ops run as plain functions.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string_view op_name, std::vector<Tensor> inputs, Tensor& output,
              BackwardFn backward);

  // Seeds a scalar output with 1.
  void backward(const Tensor& output);
  void backward(const Tensor& output, std::span<const double> seed);

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return last_visits_; }
  std::vector<std::string> op_names() const;
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string name;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Suspends recording for the lifetime of the guard (used for evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

// Records `output` on the active tape when any input requires a gradient.
// The backward closure reads output.grad() and accumulates into inputs.
void record(std::string_view op_name, std::vector<Tensor> inputs, Tensor& output,
            Tape::BackwardFn backward);

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

}  // namespace detail

}  // namespace mxa
