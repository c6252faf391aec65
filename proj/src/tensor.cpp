#include "fmkit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fmkit {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::vec(std::vector<double> v) {
  Tensor t;
  t.shape = {static_cast<int>(v.size())};
  t.data = std::move(v);
  return t;
}

Tensor Tensor::matrix(int r, int c, std::vector<double> v) {
  if (static_cast<int64_t>(v.size()) != static_cast<int64_t>(r) * c)
    throw std::invalid_argument("matrix: data size does not match " + std::to_string(r) + "x" + std::to_string(c));
  Tensor t;
  t.shape = {r, c};
  t.data = std::move(v);
  return t;
}

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape); }

int Tensor::rows() const {
  if (rank() == 2) return shape[0];
  if (rank() <= 1) return 1;
  throw std::invalid_argument("rows(): rank > 2");
}

int Tensor::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  if (rank() == 0) return 1;
  throw std::invalid_argument("cols(): rank > 2");
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(gen);
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(gen);
}

int Rng::uniform_int(int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(gen);
}

Tensor randn(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace fmkit
