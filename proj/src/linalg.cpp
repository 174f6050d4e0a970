#include "crm/linalg.hpp"

#include <cmath>
#include <string>

#include "crm/errors.hpp"

namespace crm {

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

}  // namespace

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  m.rows = rows.size();
  m.cols = rows.size() == 0 ? 0 : rows.begin()->size();
  m.data.reserve(m.rows * m.cols);
  for (const auto& r : rows) {
    if (r.size() != m.cols) throw ShapeError("Matrix::from_rows: ragged rows");
    m.data.insert(m.data.end(), r.begin(), r.end());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols, rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(sum_of_squares(a)); }

Vector add(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "add");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "sub");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector scaled(std::span<const double> a, double s) {
  Vector out(a.begin(), a.end());
  for (auto& v : out) v *= s;
  return out;
}

Vector normalized(std::span<const double> a) {
  const double n = norm(a);
  if (n == 0.0) return Vector(a.begin(), a.end());
  return scaled(a, 1.0 / n);
}

Vector matvec(const Matrix& w, std::span<const double> x) {
  if (w.cols != x.size()) {
    throw ShapeError("matvec: matrix has " + std::to_string(w.cols) + " columns, vector has " +
                     std::to_string(x.size()) + " entries");
  }
  Vector out(w.rows, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* r = w.data.data() + i * w.cols;
    double s = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) s += r[j] * x[j];
    out[i] = s;
  }
  return out;
}

Vector matvec_t(const Matrix& w, std::span<const double> y) {
  if (w.rows != y.size()) {
    throw ShapeError("matvec_t: matrix has " + std::to_string(w.rows) + " rows, vector has " +
                     std::to_string(y.size()) + " entries");
  }
  Vector out(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* r = w.data.data() + i * w.cols;
    const double yi = y[i];
    if (yi == 0.0) continue;
    for (std::size_t j = 0; j < w.cols; ++j) out[j] += r[j] * yi;
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols) + " and " +
                     std::to_string(b.rows) + " differ");
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

void add_outer(Matrix& m, std::span<const double> a, std::span<const double> b, double s) {
  if (m.rows != a.size() || m.cols != b.size()) throw ShapeError("add_outer: shape mismatch");
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double ai = s * a[i];
    if (ai == 0.0) continue;
    double* r = m.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) r[j] += ai * b[j];
  }
}

void axpy(std::span<double> y, std::span<const double> x, double s) {
  if (y.size() != x.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

double sum_of_squares(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

std::size_t argmax(std::span<const double> a) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a[i] > a[best]) best = i;
  return best;
}

}  // namespace crm
