#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bunet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorStorage;
}

/// Dense row-major float tensor. Copies share storage (handle semantics), so a
/// parameter tensor held by a layer and the same tensor captured by the tape
/// accumulate into one gradient buffer. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Direct write access; reserved for parameter updates and for kernels
  /// filling a freshly allocated output.
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const float> grad() const;
  /// Allocates a zero gradient on first access.
  std::span<float> mutable_grad();
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  /// Same values, no gradient tracking, fresh storage.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorStorage> impl_;
};

/// Ordered record of differentiable ops executed while the tape is active.
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction.
class Tape {
 public:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(const Node&)> backward;
    std::string name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string name, std::vector<Tensor> inputs, const Tensor& output,
              std::function<void(const Node&)> backward);
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  void clear() noexcept { nodes_.clear(); }

  /// Tape receiving ops on the calling thread, or nullptr.
  static Tape* current() noexcept;

 private:
  friend class TapeScope;
  std::vector<Node> nodes_;
};

/// Activates a tape for the calling thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) noexcept;
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the lifetime of the scope (inference paths).
class NoGradScope {
 public:
  NoGradScope() noexcept;
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Reverse sweep over the tape, seeding d(loss)/d(loss) = 1. Gradients
/// accumulate into every requires_grad tensor reachable from the loss.
void backward(const Tensor& loss, Tape& tape);

/// Adds `values` into t's gradient when t tracks gradients.
void accumulate_grad(Tensor& t, std::span<const float> values);

/// True when an op on these inputs must be recorded.
bool needs_recording(std::initializer_list<const Tensor*> inputs);

// Elementwise and linear-algebra ops.

enum class BinaryOp { add, sub, mul };
enum class ReduceOp { sum, mean, max };

/// Broadcast shape of two operands (numpy rules, right-aligned singleton axes).
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reduce(ReduceOp op, const Tensor& t, const std::vector<std::size_t>& axes);
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
Tensor relu(const Tensor& x);
Tensor ones_like(const Tensor& t);

}  // namespace bunet
