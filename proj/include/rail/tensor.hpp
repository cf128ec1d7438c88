#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rail {

// Dense extents, logical order [batch, channel, width, height, depth] for
// volumetric data, row-major storage (depth innermost). Rank <= 5.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check_shape_valid(const Shape& s, const char* who) {
  if (s.size() > 5)
    throw std::invalid_argument(std::string(who) + ": rank " +
                                std::to_string(s.size()) + " exceeds 5");
  for (int e : s)
    if (e <= 0)
      throw std::invalid_argument(std::string(who) +
                                  ": non-positive extent in " + shape_str(s));
}

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // same length as values iff requires_grad
  bool requires_grad = false;
};

}  // namespace detail

// Value-semantic handle over shared dense storage. All arithmetic lives in
// free functions (ops.hpp) that optionally record onto a Tape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    check_shape_valid(shape, "Tensor");
    auto s = std::make_shared<detail::Storage<T>>();
    s->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    s->shape = std::move(shape);
    Tensor t;
    t.s_ = std::move(s);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    check_shape_valid(shape, "Tensor");
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw std::invalid_argument(
          "Tensor: value count " + std::to_string(values.size()) +
          " does not match shape " + shape_str(shape));
    auto s = std::make_shared<detail::Storage<T>>();
    s->shape = std::move(shape);
    s->values = std::move(values);
    Tensor t;
    t.s_ = std::move(s);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static Tensor scalar(T value) { return filled(Shape{}, value); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t size() const {
    return static_cast<std::int64_t>(s_->values.size());
  }
  bool is_scalar() const { return size() == 1; }

  std::span<T> values() { return {s_->values.data(), s_->values.size()}; }
  std::span<const T> values() const {
    return {s_->values.data(), s_->values.size()};
  }

  bool requires_grad() const { return s_->requires_grad; }

  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on)
      s_->grad.assign(s_->values.size(), T(0));
    else
      s_->grad.clear();
  }

  std::span<T> grad() {
    require_grad_buffer();
    return {s_->grad.data(), s_->grad.size()};
  }
  std::span<const T> grad() const {
    require_grad_buffer();
    return {s_->grad.data(), s_->grad.size()};
  }

  void zero_grad() {
    if (s_->requires_grad) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  T item() const {
    if (!is_scalar())
      throw std::invalid_argument("Tensor::item: size " +
                                  std::to_string(size()) + " != 1");
    return s_->values[0];
  }

  // Deep copy, detached from any tape.
  Tensor clone() const {
    Tensor t = from(s_->shape, s_->values);
    return t;
  }

  bool all_finite() const {
    for (T v : s_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Identity of the underlying storage; used by tests.
  const void* storage_id() const { return s_.get(); }

 private:
  void require_grad_buffer() const {
    if (!s_->requires_grad)
      throw std::runtime_error("Tensor: grad requested but requires_grad is false");
  }

  std::shared_ptr<detail::Storage<T>> s_;
};

// Ordered record of the executed differentiable operations. Replaying the
// entries in exact reverse execution order propagates gradients from a
// scalar loss to every requires_grad tensor reachable from it. Single
// writer; one tape per forward pass.
template <typename T>
class Tape {
 public:
  void record(const char* op, std::function<void()> backward_fn) {
    entries_.push_back({op, std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }

  void backward(Tensor<T>& loss) {
    if (!loss.is_scalar())
      throw std::invalid_argument("backward: loss has " +
                                  std::to_string(loss.size()) +
                                  " elements, expected a scalar");
    if (loss.requires_grad()) loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

template <typename T>
void backward(Tensor<T> loss, Tape<T>& tape) {
  tape.backward(loss);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace rail
