#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace csiloc {

inline std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor. Rank is dynamic but almost everything in this
// project is a matrix [rows x cols] or a vector [n].
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<T> vals) : shape(std::move(s)), v(std::move(vals)) {
    if (v.size() != shape_size(shape))
      throw std::invalid_argument("tensor value count " + std::to_string(v.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(shape_size(t.shape), T(0));
    return t;
  }
  static Tensor full(std::vector<int> s, T value) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(shape_size(t.shape), value);
    return t;
  }

  std::size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }

  int rows() const {
    if (shape.size() != 2) throw std::logic_error("rows(): tensor is not 2-D: " + shape_str(shape));
    return shape[0];
  }
  int cols() const {
    if (shape.size() != 2) throw std::logic_error("cols(): tensor is not 2-D: " + shape_str(shape));
    return shape[1];
  }

  T& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<U>(v[i]);
    return t;
  }
};

// Boolean attention mask, shared (not a differentiable value). allow[r*cols+c]
// nonzero means key c may be attended from query row r.
struct BoolMask {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> allow;

  BoolMask() = default;
  BoolMask(int r, int c, std::uint8_t fill) : rows(r), cols(c), allow(std::size_t(r) * c, fill) {}

  static BoolMask all_allowed(int r, int c) { return BoolMask(r, c, 1); }

  bool at(int r, int c) const { return allow[static_cast<std::size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool a) { allow[static_cast<std::size_t>(r) * cols + c] = a ? 1 : 0; }
};

}  // namespace csiloc
