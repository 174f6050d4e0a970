#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace crm {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  Matrix transposed() const;
  bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector scaled(std::span<const double> a, double s);
/// a / ||a||; the zero vector is returned unchanged.
Vector normalized(std::span<const double> a);

/// W x
Vector matvec(const Matrix& w, std::span<const double> x);
/// W^T y
Vector matvec_t(const Matrix& w, std::span<const double> y);
/// out = a b
Matrix matmul(const Matrix& a, const Matrix& b);
/// m += s * a b^T
void add_outer(Matrix& m, std::span<const double> a, std::span<const double> b, double s = 1.0);
/// y += s * x
void axpy(std::span<double> y, std::span<const double> x, double s = 1.0);

double sum_of_squares(std::span<const double> a);
bool all_finite(std::span<const double> a);
std::size_t argmax(std::span<const double> a);

}  // namespace crm
