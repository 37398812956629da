#ifndef VLATTACK_TENSOR_HPP
#define VLATTACK_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlat {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles. Everything numeric in the project is
// one of these; vectors are 1xN or Nx1 as convenient.
struct Tensor {
  size_t rows = 0, cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(size_t r, size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double& at(size_t i, size_t j) { return v[i * cols + j]; }
  double at(size_t i, size_t j) const { return v[i * cols + j]; }
  double* row(size_t i) { return v.data() + i * cols; }
  const double* row(size_t i) const { return v.data() + i * cols; }

  size_t count() const { return rows * cols; }
  void zero() { std::fill(v.begin(), v.end(), 0.0); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

// c = a . b
Tensor matmul(const Tensor& a, const Tensor& b);
// c = a . b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// c = a^T . b
Tensor matmul_tn(const Tensor& a, const Tensor& b);

void add_inplace(Tensor& a, const Tensor& b);

}  // namespace vlat

#endif  // VLATTACK_TENSOR_HPP
