#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "crm/linalg.hpp"

namespace crm {

enum class ActivationKind : std::uint8_t { Gelu = 0, Identity = 1 };

/// Exact GELU, x * Phi(x). Throws NumericError on non-finite input.
double gelu(double x);
Vector gelu(std::span<const double> x);
/// d/dx of x * Phi(x): Phi(x) + x * phi(x).
double gelu_grad(double x);

double activate(ActivationKind kind, double x);
double activate_grad(ActivationKind kind, double x);

/// Max-shifted softmax. Throws ShapeError on an empty input.
Vector softmax(std::span<const double> z);

/// -log p[label] with p[label] clamped to >= 1e-12.
double cross_entropy(std::size_t label, std::span<const double> p);
inline constexpr double kProbabilityFloor = 1e-12;

/// Adam moments for one parameter tensor.
struct AdamState {
  std::uint64_t step = 0;
  Vector first_moment;
  Vector second_moment;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_size(std::size_t n, double lr = 1e-3);
};

/// One bias-corrected Adam step. Coordinates whose gradient is exactly zero
/// keep both their moments and their value (lazy update), so an all-zero
/// gradient leaves the parameter untouched from any state.
void adam_update(std::span<double> param, std::span<const double> grad, AdamState& state);
void adam_update(Matrix& param, const Matrix& grad, AdamState& state);

/// out[i][j] = act(row_i(X) . col_j(F)).
Matrix conv_rows(const Matrix& x, const Matrix& filters, ActivationKind act);

/// Loss callback for grad_check: evaluates the loss at `params` and, when
/// `grad` is non-null, writes the analytic gradient (same length) into it.
using LossFn = std::function<double(std::span<const double> params, std::span<double> grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Central-difference check: max_i |a_i - n_i| / max(1, |a_i|, |n_i|).
GradCheckResult grad_check(const LossFn& loss_fn, std::span<const double> params, double eps = 1e-5);

/// Flattened copy of a list of parameter tensors, and the inverse.
Vector flatten(const std::vector<std::span<double>>& views);
void unflatten(std::span<const double> flat, const std::vector<std::span<double>>& views);

/// Deterministic generator; every stochastic step in the library draws from
/// one of these seeded explicitly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double normal();
  /// Uniform integer on [0, n).
  std::size_t below(std::size_t n);
  void shuffle(std::vector<std::size_t>& items);

 private:
  std::mt19937_64 engine_;
};

/// Fills `m` with N(0, scale^2) draws.
void fill_normal(std::span<double> values, Rng& rng, double scale);

}  // namespace crm
