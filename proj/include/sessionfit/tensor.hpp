#pragma once

// Dense row-major float32 tensor plus the handful of primitives the network
// needs. Reductions accumulate in a fixed order (k ascending for matmul) so
// results are bitwise reproducible run to run.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sessionfit/prng.hpp"

namespace sessionfit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

inline std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("Tensor: data length does not match shape " +
                                  shape_to_string(shape));
    for (std::size_t extent : shape)
      if (extent == 0) throw std::invalid_argument("Tensor: zero extent in shape");
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }

  static Tensor full(Shape s, float value) {
    const std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<float>(n, value));
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data.size())
      throw std::invalid_argument("reshape: element count mismatch");
    return Tensor(std::move(s), data);
  }
};

inline void check_finite(const Tensor& t, const char* what) {
  for (float v : t.data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(what) + ": non-finite value produced");
  }
}

// Standard matrix product, [MxK] * [KxN] -> [MxN]. Each output element is
// accumulated with k ascending.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2)
    throw std::invalid_argument("matmul: expects rank-2 tensors");
  const std::size_t m = a.shape[0], k = a.shape[1];
  const std::size_t kb = b.shape[0], n = b.shape[1];
  if (k != kb)
    throw std::invalid_argument("matmul: shape mismatch " + shape_to_string(a.shape) +
                                " * " + shape_to_string(b.shape));
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data.data() + i * k;
    float* orow = out.data.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = b.data.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(out, "matmul");
  return out;
}

inline Tensor transpose2d(const Tensor& t) {
  if (t.shape.size() != 2) throw std::invalid_argument("transpose2d: expects rank-2 tensor");
  const std::size_t r = t.shape[0], c = t.shape[1];
  Tensor out = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = t.data[i * c + j];
  return out;
}

// Index of the maximum along the last axis, one index per leading position.
// Ties break to the lowest index.
inline std::vector<std::size_t> argmax_last_axis(const Tensor& t) {
  if (t.shape.empty()) throw std::invalid_argument("argmax_last_axis: rank-0 tensor");
  const std::size_t c = t.shape.back();
  if (c < 1) throw std::invalid_argument("argmax_last_axis: empty last axis");
  const std::size_t rows = t.size() / c;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = t.data.data() + r * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[r] = best;
  }
  return out;
}

// I.i.d. uniform samples in [lo, hi); one raw generator output per element,
// filled in row-major order.
inline Tensor rng_uniform(Prng& rng, float lo, float hi, Shape shape) {
  if (!(lo < hi)) throw std::invalid_argument("rng_uniform: requires lo < hi");
  Tensor out = Tensor::zeros(std::move(shape));
  for (float& v : out.data) v = rng.next_uniform(lo, hi);
  check_finite(out, "rng_uniform");
  return out;
}

}  // namespace sessionfit
