#pragma once

// Dense row-major linear algebra and a seeded PRNG.
//
// All reductions accumulate in a fixed order (ascending inner index), so
// results are bitwise reproducible for a given build. The PRNG is
// xoshiro256** seeded through splitmix64; normal deviates use the
// Box-Muller transform on top of it, so no standard-library distribution
// (whose output is implementation-defined) is involved anywhere.

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "tspeft/errors.hpp"

namespace tspeft {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v);
  Matrix transposed() const;

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a[m x k] * b[k x n]
Matrix matmul(const Matrix& a, const Matrix& b);
// a[m x k] * b[n x k]^T
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// a[k x m]^T * b[k x n]
Matrix matmul_at(const Matrix& a, const Matrix& b);
// out += a^T * b, shapes as in matmul_at
void matmul_at_accumulate(const Matrix& a, const Matrix& b, Matrix& out);

void add_inplace(Matrix& dst, const Matrix& src);
void axpy_inplace(Matrix& dst, double alpha, const Matrix& src);
Matrix scaled(const Matrix& m, double alpha);

std::vector<double> row_l2_norms(const Matrix& x);
std::vector<double> column_l2_norms(const Matrix& x);

double max_abs(const Matrix& m);
bool all_finite(const Matrix& m);

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform01();
  double uniform(double lo, double hi);
  double normal();
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

// Child seed for a named sub-stream; keeps independent consumers from
// sharing one stream while staying a pure function of the parent seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct UniformInit {
  double lo = 0.0;
  double hi = 0.0;
};
// N(0, 1 / fan_in)
struct ScaledNormalInit {
  double fan_in = 1.0;
};
using InitScheme = std::variant<UniformInit, ScaledNormalInit>;

Matrix seeded_init(std::size_t rows, std::size_t cols, Rng& rng, const InitScheme& scheme);

// FNV-1a over the raw bit patterns.
std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace tspeft
