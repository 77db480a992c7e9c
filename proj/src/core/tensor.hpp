#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "core/common.hpp"
#include "core/rng.hpp"

namespace colidr {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major float64 tensor. Plain value type; gradient tracking lives
// in the tape (see tape.hpp), requires_grad only marks leaves that want
// gradients when fed into a tape.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(check_shape(shape), fill) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    CLDR_CHECK(data.size() == check_shape(shape), ErrorKind::ShapeMismatch,
               "tensor data length " << data.size() << " does not match shape "
                                     << shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi);

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  std::size_t ndim() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;

  // Copy with a new shape of equal element count.
  Tensor reshaped(Shape s) const;

 private:
  static std::size_t check_shape(const Shape& s);
};

}  // namespace colidr
