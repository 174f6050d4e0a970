#include "crm/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "crm/errors.hpp"

namespace crm {

double gelu(double x) {
  if (!std::isfinite(x)) throw NumericError("gelu: non-finite input");
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

Vector gelu(std::span<const double> x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
  return out;
}

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double activate(ActivationKind kind, double x) { return kind == ActivationKind::Gelu ? gelu(x) : x; }

double activate_grad(ActivationKind kind, double x) {
  return kind == ActivationKind::Gelu ? gelu_grad(x) : 1.0;
}

Vector softmax(std::span<const double> z) {
  if (z.empty()) throw ShapeError("softmax: empty input");
  const double shift = *std::max_element(z.begin(), z.end());
  if (!std::isfinite(shift)) throw NumericError("softmax: non-finite logits");
  Vector out(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - shift);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

double cross_entropy(std::size_t label, std::span<const double> p) {
  if (label >= p.size()) {
    throw DataError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                    std::to_string(p.size()) + ")");
  }
  return -std::log(std::max(p[label], kProbabilityFloor));
}

AdamState AdamState::for_size(std::size_t n, double lr) {
  AdamState s;
  s.first_moment.assign(n, 0.0);
  s.second_moment.assign(n, 0.0);
  s.lr = lr;
  return s;
}

void adam_update(std::span<double> param, std::span<const double> grad, AdamState& state) {
  if (param.size() != grad.size()) throw ShapeError("adam_update: parameter/gradient length mismatch");
  if (state.first_moment.empty() && state.second_moment.empty()) {
    state.first_moment.assign(param.size(), 0.0);
    state.second_moment.assign(param.size(), 0.0);
  }
  if (state.first_moment.size() != param.size() || state.second_moment.size() != param.size()) {
    throw ShapeError("adam_update: state does not match parameter length");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    if (g == 0.0) continue;
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    param[i] -= state.lr * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
  }
}

void adam_update(Matrix& param, const Matrix& grad, AdamState& state) {
  if (!param.same_shape(grad)) throw ShapeError("adam_update: parameter/gradient shape mismatch");
  adam_update(std::span<double>(param.data), std::span<const double>(grad.data), state);
}

Matrix conv_rows(const Matrix& x, const Matrix& filters, ActivationKind act) {
  if (x.cols != filters.rows) {
    throw ShapeError("conv_rows: input rows have length " + std::to_string(x.cols) + ", filters have " +
                     std::to_string(filters.rows));
  }
  Matrix out = matmul(x, filters);
  if (act != ActivationKind::Identity)
    for (auto& v : out.data) v = activate(act, v);
  return out;
}

GradCheckResult grad_check(const LossFn& loss_fn, std::span<const double> params, double eps) {
  Vector p(params.begin(), params.end());
  Vector analytic(p.size(), 0.0);
  const double base = loss_fn(p, analytic);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  GradCheckResult result;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + eps;
    const double up = loss_fn(p, {});
    p[i] = saved - eps;
    const double down = loss_fn(p, {});
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

Vector flatten(const std::vector<std::span<double>>& views) {
  Vector flat;
  for (const auto& v : views) flat.insert(flat.end(), v.begin(), v.end());
  return flat;
}

void unflatten(std::span<const double> flat, const std::vector<std::span<double>>& views) {
  std::size_t offset = 0;
  for (const auto& v : views) {
    if (offset + v.size() > flat.size()) throw ShapeError("unflatten: flat vector too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.begin());
    offset += v.size();
  }
  if (offset != flat.size()) throw ShapeError("unflatten: flat vector too long");
}

double Rng::normal() {
  // Box-Muller; u1 is kept away from zero.
  const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) return 0;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r = 0;
  do {
    r = engine_();
  } while (r >= limit);
  return static_cast<std::size_t>(r % n);
}

void Rng::shuffle(std::vector<std::size_t>& items) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
}

void fill_normal(std::span<double> values, Rng& rng, double scale) {
  for (auto& v : values) v = scale * rng.normal();
}

}  // namespace crm
