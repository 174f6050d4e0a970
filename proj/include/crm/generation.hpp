#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "crm/backbone.hpp"
#include "crm/retrospection.hpp"

namespace crm {

/// d(x | omega_c): the class-irrelevant content of x relative to class c.
/// Stack X = [x | W^T | x (.) W^T] (D x (2C+1)), row convolution with L
/// filters, GELU, mean over filters, then two fully connected layers.
struct DecompositionModel {
  std::size_t class_id = 0;
  Matrix conv_Fg;  // (2C+1) x L
  Matrix fc1_W;    // M x D
  Vector fc1_b;    // M
  Matrix fc2_W;    // D x M
  Vector fc2_b;    // D
  double gamma = 15.0;
};

/// C decomposition functions plus the head_W snapshot they were trained against.
struct GenerationModel {
  std::vector<DecompositionModel> per_class;
  Matrix head_W;
  std::uint64_t backbone_fingerprint = 0;
  /// Re-normalize injected vectors to unit length (off by default).
  bool normalize_injected = false;

  std::size_t class_count() const { return per_class.size(); }
};

struct GenerationConfig {
  std::size_t filters = 10;  // L
  std::size_t hidden = 256;  // M
  double gamma = 15.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool normalize_injected = false;
};

DecompositionModel init_decomposition(std::size_t class_id, std::size_t class_count, std::size_t latent_dim,
                                      std::size_t filters, std::size_t hidden, double gamma, Rng& rng);

/// D x (2C+1) stack for a unit vector x.
Matrix decomposition_stack(std::span<const double> x_unit, const Matrix& head_W);
/// u = d(x); x is unit-normalized first.
LatentVec decompose(const DecompositionModel& m, const Matrix& head_W, std::span<const double> x);
/// (x + x*) / 2
LatentVec decomposition_target(std::span<const double> x, std::span<const double> x_star);
/// 2u - x with x unit-normalized, for a decomposition u of x.
LatentVec inject_decomposed(std::span<const double> u, std::span<const double> x);
/// x*_c = 2 d(x) - x with x unit-normalized; not re-normalized.
LatentVec inject(const DecompositionModel& m, const Matrix& head_W, std::span<const double> x);
/// One injected counterfactual per class, in class order.
CounterfactualSet generate_set(const GenerationModel& gm, std::span<const double> x);

/// A factual latent and its counterfactual toward `target`.
struct GenerationPair {
  LatentVec factual;
  LatentVec counterfactual;
  std::size_t label = 0;
  std::size_t target = 0;
};

std::vector<std::span<double>> parameter_views(DecompositionModel& m);
DecompositionModel zeros_like(const DecompositionModel& m);

/// Mean over pairs of r(u*, u~) + gamma l(c, f(x* - u*)) + r(u, u~) + gamma l(y, f(x - u)),
/// r the Euclidean distance, all samples unit-normalized, u~ = (x + x*) / 2.
double generation_objective(const DecompositionModel& m, const BackboneModel& backbone,
                            std::span<const GenerationPair> pairs, DecompositionModel* grad);

/// Trains omega_c on the pairs targeting its class; the snapshot with the
/// lowest validation objective is kept.
DecompositionModel train_decomposition(DecompositionModel init, const BackboneModel& backbone,
                                       std::span<const GenerationPair> train, std::span<const GenerationPair> val,
                                       const GenerationConfig& cfg, TrainHistory* history = nullptr);

/// One decomposition function per class, each on its own pairs with seed
/// cfg.seed + class_id. Throws DataError naming any class with no pairs.
GenerationModel train_generation(const BackboneModel& backbone, std::span<const GenerationPair> train,
                                 std::span<const GenerationPair> val, const GenerationConfig& cfg,
                                 std::uint64_t backbone_fingerprint,
                                 std::vector<TrainHistory>* histories = nullptr);

}  // namespace crm
