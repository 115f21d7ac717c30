// Dense time-major tensors.
//
// Every activation in the framework is a Tensor5 laid out as [T, B, C, H, W]
// with W fastest. Neuron layers iterate T explicitly; every other layer folds
// (T, B) into a single batch axis, which is a pure reinterpretation of the
// same buffer because T is the slowest-varying axis.
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cml {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape5 {
  std::size_t t = 1;
  std::size_t b = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t numel() const { return t * b * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  /// Number of (T·B) images when time is folded into batch.
  constexpr std::size_t images() const { return t * b; }

  /// Same memory, time merged into batch: (1, T·B, C, H, W).
  constexpr Shape5 folded() const { return {1, t * b, c, h, w}; }

  constexpr std::size_t offset(std::size_t ti, std::size_t bi, std::size_t ci,
                               std::size_t hi, std::size_t wi) const {
    return (((ti * b + bi) * c + ci) * h + hi) * w + wi;
  }

  friend constexpr bool operator==(const Shape5&, const Shape5&) = default;

  std::array<std::size_t, 5> dims() const { return {t, b, c, h, w}; }

  std::string str() const {
    std::ostringstream os;
    os << '[' << t << ',' << b << ',' << c << ',' << h << ',' << w << ']';
    return os.str();
  }
};

inline void require_same_shape(const Shape5& a, const Shape5& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

template <typename S>
class Tensor5 {
 public:
  using value_type = S;

  Tensor5() = default;
  explicit Tensor5(Shape5 shape, S fill = S(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor5(Shape5 shape, std::vector<S> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("Tensor5: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape5& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<S> span() { return data_; }
  std::span<const S> span() const { return data_; }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at(std::size_t t, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[shape_.offset(t, b, c, h, w)];
  }
  const S& at(std::size_t t, std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[shape_.offset(t, b, c, h, w)];
  }

  /// Reinterprets the buffer under a new shape of equal element count.
  Tensor5 reshaped(Shape5 s) const& {
    if (s.numel() != shape_.numel()) {
      throw ShapeError("reshape: " + shape_.str() + " -> " + s.str() + " changes element count");
    }
    return Tensor5(s, data_);
  }
  Tensor5 reshaped(Shape5 s) && {
    if (s.numel() != shape_.numel()) {
      throw ShapeError("reshape: " + shape_.str() + " -> " + s.str() + " changes element count");
    }
    return Tensor5(s, std::move(data_));
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor5<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor5<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor5& a, const Tensor5& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape5 shape_{0, 0, 0, 0, 0};
  std::vector<S> data_;
};

/// Non-owning read view with a shape; used to look at a tensor folded or
/// reinterpreted without copying.
template <typename S>
struct ConstView {
  Shape5 shape;
  std::span<const S> data;

  ConstView(const Tensor5<S>& t) : shape(t.shape()), data(t.span()) {}  // NOLINT
  ConstView(Shape5 s, std::span<const S> d) : shape(s), data(d) {
    if (d.size() != s.numel()) throw ShapeError("ConstView: span length does not match " + s.str());
  }

  ConstView folded() const { return {shape.folded(), data}; }
  const S& operator[](std::size_t i) const { return data[i]; }
};

template <typename S>
ConstView<S> fold_time(const Tensor5<S>& t) {
  return ConstView<S>(t).folded();
}

template <typename S>
S sum(const Tensor5<S>& t) {
  S acc = 0;
  for (S v : t.span()) acc += v;
  return acc;
}

template <typename S>
S max_abs(const Tensor5<S>& t) {
  S m = 0;
  for (S v : t.span()) m = std::max(m, v < 0 ? -v : v);
  return m;
}

}  // namespace cml
