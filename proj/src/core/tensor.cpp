#include "core/tensor.hpp"

#include <cmath>

namespace colidr {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::size_t Tensor::check_shape(const Shape& s) {
  CLDR_CHECK(!s.empty(), ErrorKind::ShapeMismatch, "tensor shape must be non-empty");
  std::size_t n = 1;
  for (int d : s) {
    CLDR_CHECK(d > 0, ErrorKind::ShapeMismatch,
               "tensor dims must be positive, got " << shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.normal() * stddev;
  return t;
}

Tensor Tensor::uniform(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape s) const {
  CLDR_CHECK(shape_numel(s) == numel(), ErrorKind::ShapeMismatch,
             "reshape " << shape_str(shape) << " -> " << shape_str(s)
                        << " changes element count");
  Tensor t = *this;
  t.shape = std::move(s);
  return t;
}

}  // namespace colidr
