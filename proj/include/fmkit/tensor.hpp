#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmkit {

// Dense row-major tensor of 64-bit floats. Everything in this library is
// rank 0 (scalar), 1 (vector) or 2 (matrix); higher-rank scratch buffers
// are kept as flat std::vector<double> inside the kernels that need them.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  Tensor(std::vector<int> s, double fill);

  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> v);
  static Tensor matrix(int r, int c, std::vector<double> v);
  static Tensor zeros_like(const Tensor& t);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Rank-2 accessors; rank-1 tensors behave as a single row.
  int rows() const;
  int cols() const;

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool all_finite() const;
  std::string shape_str() const;
};

int64_t numel_of(const std::vector<int>& shape);

// splitmix64 finalizer; used to derive independent per-purpose seeds.
uint64_t mix64(uint64_t x);

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(uint64_t seed) : gen(seed) {}
  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo, double hi);
  int uniform_int(int lo, int hi);  // inclusive range
};

Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi);

}  // namespace fmkit
