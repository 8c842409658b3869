#include "bunet/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "bunet/errors.hpp"

namespace bunet {

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

namespace {

thread_local Tape* g_current_tape = nullptr;

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Strides of `src` aligned to `out` rank, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = row_major_strides(src);
  const std::size_t offset = out.size() - src.size();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] != 1) strides[offset + i] = own[i];
  }
  return strides;
}

/// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t linear = 0; linear < n; ++linear) {
    fn(linear, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorStorage>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
  auto impl = std::make_shared<detail::TensorStorage>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full({}, value, requires_grad); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= dim()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const {
  require_defined(*this, "numel");
  return impl_->data.size();
}

std::span<const float> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return impl_->data;
}

std::vector<float> Tensor::to_vector() const { return std::vector<float>(data().begin(), data().end()); }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_to_string(s));
  std::size_t linear = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_to_string(s));
    linear = linear * s[axis] + i;
    ++axis;
  }
  return impl_->data[linear];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  impl_->requires_grad = value;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<float> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  if (defined()) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

Tensor Tensor::clone() const {
  require_defined(*this, "clone");
  auto impl = std::make_shared<detail::TensorStorage>(*impl_);
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return from_vector(impl_->shape, impl_->data, false);
}

Tensor Tensor::reshape(Shape new_shape) const {
  require_defined(*this, "reshape");
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape()) + " to " + shape_to_string(new_shape));
  }
  Tensor out = from_vector(std::move(new_shape), impl_->data, false);
  if (needs_recording({this})) {
    Tape::current()->record("reshape", {*this}, out, [](const Tape::Node& n) {
      Tensor in = n.inputs[0];
      accumulate_grad(in, n.output.grad());
    });
  }
  return out;
}

// --- Tape -------------------------------------------------------------------

void Tape::record(std::string name, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void(const Node&)> backward_fn) {
  Tensor out = output;
  out.set_requires_grad(true);
  nodes_.push_back(Node{std::move(inputs), out, std::move(backward_fn), std::move(name)});
}

Tape* Tape::current() noexcept { return g_current_tape; }

TapeScope::TapeScope(Tape& tape) noexcept : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

NoGradScope::NoGradScope() noexcept : previous_(g_current_tape) { g_current_tape = nullptr; }
NoGradScope::~NoGradScope() { g_current_tape = previous_; }

bool needs_recording(std::initializer_list<const Tensor*> inputs) {
  if (g_current_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void accumulate_grad(Tensor& t, std::span<const float> values) {
  if (!t.requires_grad()) return;
  auto g = t.mutable_grad();
  if (g.size() != values.size()) throw ShapeError("gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

void backward(const Tensor& loss, Tape& tape) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_to_string(loss.shape()));
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0f;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output.has_grad()) it->backward(*it);
  }
}

// --- elementwise ops --------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_to_string(a) + " and " + shape_to_string(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  require_defined(a, "binary");
  require_defined(b, "binary");
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.mutable_data();
  const auto da = a.data();
  const auto db = b.data();
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (op) {
      case BinaryOp::add: o[i] = da[ia] + db[ib]; break;
      case BinaryOp::sub: o[i] = da[ia] - db[ib]; break;
      case BinaryOp::mul: o[i] = da[ia] * db[ib]; break;
    }
  });
  if (needs_recording({&a, &b})) {
    Tape::current()->record("binary", {a, b}, out, [op, out_shape, sa, sb](const Tape::Node& n) {
      Tensor ta = n.inputs[0];
      Tensor tb = n.inputs[1];
      const auto g = n.output.grad();
      std::vector<float> ga(ta.numel(), 0.0f);
      std::vector<float> gb(tb.numel(), 0.0f);
      const auto va = ta.data();
      const auto vb = tb.data();
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (op) {
          case BinaryOp::add: ga[ia] += g[i]; gb[ib] += g[i]; break;
          case BinaryOp::sub: ga[ia] += g[i]; gb[ib] -= g[i]; break;
          case BinaryOp::mul: ga[ia] += g[i] * vb[ib]; gb[ib] += g[i] * va[ia]; break;
        }
      });
      accumulate_grad(ta, ga);
      accumulate_grad(tb, gb);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryOp::mul, a, b); }

Tensor scale(const Tensor& a, float factor) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  const auto v = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * factor;
  if (needs_recording({&a})) {
    Tape::current()->record("scale", {a}, out, [factor](const Tape::Node& n) {
      Tensor in = n.inputs[0];
      const auto g = n.output.grad();
      std::vector<float> gi(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] = g[i] * factor;
      accumulate_grad(in, gi);
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] > 0.0f ? v[i] : 0.0f;
  if (needs_recording({&x})) {
    Tape::current()->record("relu", {x}, out, [](const Tape::Node& n) {
      Tensor in = n.inputs[0];
      if (!in.requires_grad()) return;
      const auto g = n.output.grad();
      const auto v = in.data();
      auto gi = in.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (v[i] > 0.0f) gi[i] += g[i];
      }
    });
  }
  return out;
}

Tensor ones_like(const Tensor& t) { return Tensor::full(t.shape(), 1.0f); }

// --- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " + shape_to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto n = static_cast<Eigen::Index>(b.size(1));
  Tensor out = Tensor::zeros({a.size(0), b.size(1)});
  MutMap(out.mutable_data().data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  if (needs_recording({&a, &b})) {
    Tape::current()->record("matmul", {a, b}, out, [m, k, n](const Tape::Node& node) {
      Tensor ta = node.inputs[0];
      Tensor tb = node.inputs[1];
      ConstMap g(node.output.grad().data(), m, n);
      if (ta.requires_grad()) {
        MutMap(ta.mutable_grad().data(), m, k).noalias() += g * ConstMap(tb.data().data(), k, n).transpose();
      }
      if (tb.requires_grad()) {
        MutMap(tb.mutable_grad().data(), k, n).noalias() += ConstMap(ta.data().data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

// --- reductions -------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& t, const std::vector<std::size_t>& axes) {
  require_defined(t, "reduce");
  const Shape& in_shape = t.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (auto ax : axes) {
    if (ax >= in_shape.size()) {
      throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for " + shape_to_string(in_shape));
    }
    reduced[ax] = true;
  }
  Shape out_shape;
  Shape kept_shape(in_shape.size(), 1);  // input-rank shape with reduced axes collapsed
  std::size_t count = 1;
  for (std::size_t i = 0; i < in_shape.size(); ++i) {
    if (reduced[i]) {
      count *= in_shape[i];
    } else {
      out_shape.push_back(in_shape[i]);
      kept_shape[i] = in_shape[i];
    }
  }
  // Map each input element to its output slot by broadcasting the collapsed shape.
  const auto so = broadcast_strides(kept_shape, in_shape);
  const std::vector<std::size_t> zero(in_shape.size(), 0);
  const auto v = t.data();
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.mutable_data();
  std::vector<std::size_t> argmax;

  if (op == ReduceOp::max) {
    std::fill(o.begin(), o.end(), -std::numeric_limits<float>::infinity());
    argmax.assign(o.size(), 0);
    std::vector<bool> seen(o.size(), false);
    for_each_broadcast(in_shape, so, zero, [&](std::size_t i, std::size_t io, std::size_t) {
      if (!seen[io] || v[i] > o[io]) {
        o[io] = v[i];
        argmax[io] = i;
        seen[io] = true;
      }
    });
  } else {
    for_each_broadcast(in_shape, so, zero, [&](std::size_t i, std::size_t io, std::size_t) { o[io] += v[i]; });
    if (op == ReduceOp::mean) {
      const float inv = 1.0f / static_cast<float>(count);
      for (auto& x : o) x *= inv;
    }
  }

  if (needs_recording({&t})) {
    Tape::current()->record("reduce", {t}, out, [op, in_shape, so, zero, count, argmax](const Tape::Node& n) {
      Tensor in = n.inputs[0];
      if (!in.requires_grad()) return;
      const auto g = n.output.grad();
      auto gi = in.mutable_grad();
      if (op == ReduceOp::max) {
        for (std::size_t io = 0; io < g.size(); ++io) gi[argmax[io]] += g[io];
        return;
      }
      const float factor = op == ReduceOp::mean ? 1.0f / static_cast<float>(count) : 1.0f;
      for_each_broadcast(in_shape, so, zero,
                         [&](std::size_t i, std::size_t io, std::size_t) { gi[i] += g[io] * factor; });
    });
  }
  return out;
}

namespace {
std::vector<std::size_t> all_axes(const Tensor& t) {
  std::vector<std::size_t> axes(t.dim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return axes;
}
}  // namespace

Tensor sum(const Tensor& t) { return reduce(ReduceOp::sum, t, all_axes(t)); }
Tensor mean(const Tensor& t) { return reduce(ReduceOp::mean, t, all_axes(t)); }

}  // namespace bunet
