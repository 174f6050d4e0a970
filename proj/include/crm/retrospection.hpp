#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "crm/backbone.hpp"
#include "crm/core_math.hpp"

namespace crm {

enum class Fusion : std::uint8_t { Early = 0, Late = 1, Middle = 2 };
/// Pooling of per-counterfactual conv maps under middle fusion.
enum class MiddlePooling : std::uint8_t { Attention = 0, Mean = 1 };

const char* to_string(Fusion f);
Fusion parse_fusion(const std::string& s);

enum class Provenance : std::uint8_t { Handcrafted = 0, Generated = 1 };

/// A factual latent vector and the counterfactual latents it is compared against.
struct CounterfactualSet {
  LatentVec factual;
  std::vector<LatentVec> counterfactuals;
  std::vector<Provenance> provenance;
};

/// h(x, {x*} | eta): a 3-wide row convolution over the stacked predictions
/// [f(x), f(x*), f(x - x*)], a fully connected layer over the flattened
/// (class-major) C x K map, and a fusion step across counterfactuals.
struct RetrospectionModel {
  Matrix conv_F;  // 3 x K
  Matrix fc_W;    // C x (C*K)
  Vector fc_b;    // C
  Fusion fusion = Fusion::Early;
  MiddlePooling middle_pooling = MiddlePooling::Attention;
  Vector attn_v;  // C*K under middle fusion, empty otherwise
  ActivationKind act = ActivationKind::Gelu;
  double lambda = 0.0;

  std::size_t class_count() const { return fc_W.rows; }
  std::size_t filter_count() const { return conv_F.cols; }
};

RetrospectionModel init_retrospection(std::size_t class_count, std::size_t filters, Fusion fusion, double lambda,
                                      Rng& rng);

/// y_delta = f(x - x*).
Prediction compare_representation(const BackboneModel& backbone, std::span<const double> x,
                                  std::span<const double> x_star);
/// C x 3 stack [f(x), f(x*), f(x - x*)].
Matrix prediction_stack(const BackboneModel& backbone, std::span<const double> x, std::span<const double> x_star);
/// Logits y* = fc_W flatten(act(Y conv_F)) + fc_b for one stack Y.
Vector retrospect_stack(const RetrospectionModel& model, const Matrix& stack);
Vector retrospect_pair(const RetrospectionModel& model, const BackboneModel& backbone, std::span<const double> x,
                       std::span<const double> x_star);

/// The stacks the configured fusion consumes: one per counterfactual (late,
/// middle), or the single stack [f(x), f(mean x*), f(mean x* - x)] (early).
std::vector<Matrix> fusion_stacks(Fusion fusion, const BackboneModel& backbone, const CounterfactualSet& set);

struct FusionTrace {
  std::vector<double> weights;  // per stack
  Vector logits;                // fused, before softmax
};

/// Fuses precomputed stacks into a class distribution.
Prediction fuse_stacks(const RetrospectionModel& model, std::span<const Matrix> stacks, FusionTrace* trace = nullptr);
Prediction fuse(const RetrospectionModel& model, const BackboneModel& backbone, const CounterfactualSet& set,
                FusionTrace* trace = nullptr);

std::vector<std::span<double>> parameter_views(RetrospectionModel& model);
RetrospectionModel zeros_like(const RetrospectionModel& model);

struct RetrospectionExample {
  std::vector<Matrix> stacks;
  std::size_t label = 0;
};

/// Mean cross-entropy of the fused prediction plus lambda * ||eta||^2 over
/// every learnable tensor. Accumulates into `grad` when non-null.
double retrospection_objective(const RetrospectionModel& model, std::span<const RetrospectionExample> batch,
                               RetrospectionModel* grad);

struct LabeledSet {
  CounterfactualSet set;
  std::size_t label = 0;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Builds stacks with the frozen backbone once, then runs Adam; the snapshot
/// with the best validation accuracy is returned.
RetrospectionModel train_retrospection(RetrospectionModel init, const BackboneModel& backbone,
                                       std::span<const LabeledSet> train, std::span<const LabeledSet> val,
                                       const TrainConfig& cfg, TrainHistory* history = nullptr);

double retrospection_accuracy(const RetrospectionModel& model, std::span<const RetrospectionExample> examples);

}  // namespace crm
