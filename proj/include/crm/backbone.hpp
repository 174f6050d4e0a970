#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crm/core_math.hpp"
#include "crm/dataset.hpp"
#include "crm/linalg.hpp"

namespace crm {

using LatentVec = Vector;
using Prediction = Vector;

/// Token placed between the two segments of a text pair. Brackets are
/// punctuation to the tokenizer, so real text can never produce it.
inline constexpr std::string_view kSeparatorToken = "[sep]";

/// Lowercased tokens; ASCII whitespace and punctuation separate tokens and are dropped.
std::vector<std::string> tokenize(std::string_view text);
/// Tokens of text_a, then the separator and text_b tokens for pair samples.
std::vector<std::string> sample_tokens(const Sample& s);

struct Vocabulary {
  std::vector<std::string> terms;  // index -> term
  Vector idf;
  std::size_t max_features = 0;

  std::size_t size() const { return terms.size(); }
  /// Returns size() for out-of-vocabulary terms.
  std::size_t lookup(const std::string& term) const;
  void rebuild_index();

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

/// idf = ln((1 + N) / (1 + df)) + 1, keeping the max_features terms with the
/// highest document frequency (ties broken lexicographically).
Vocabulary fit_vocabulary(std::span<const Sample* const> corpus, std::size_t max_features);

/// Sparse input feature vector; indices strictly increasing.
struct SparseVec {
  std::vector<std::uint32_t> index;
  Vector value;
};

/// Raw term count x idf, L2-normalized.
SparseVec tfidf(const Vocabulary& vocab, const Sample& s);
SparseVec dense_features(std::span<const double> v);

struct DenseLayer {
  Matrix weight;
  Vector bias;
};

/// f(.|theta): features -> encoder MLP (GELU after every layer) -> latent x
/// -> softmax(head_W x + head_b). An empty encoder makes x the input itself.
struct BackboneModel {
  InputKind input_kind = InputKind::Text;
  std::size_t input_dim = 0;
  Vocabulary vocab;
  std::vector<DenseLayer> encoder;
  Matrix head_W;  // C x D
  Vector head_b;  // C
  double alpha = 0.0;

  std::size_t class_count() const { return head_W.rows; }
  std::size_t latent_dim() const { return head_W.cols; }
};

struct BackboneConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double alpha = 1e-5;
  std::size_t hidden_dim = 64;
  std::size_t hidden_layers = 1;
  std::size_t max_features = 5000;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<double> train_objective;  // after each epoch
  std::vector<double> val_score;        // selection metric after each epoch
  std::size_t best_epoch = 0;
};

/// Randomly initialized model; GELU-aware N(0, 2/fan_in) weights, zero biases.
BackboneModel init_backbone(InputKind kind, std::size_t input_dim, std::size_t class_count,
                            std::size_t hidden_dim, std::size_t hidden_layers, Rng& rng);

SparseVec features(const BackboneModel& model, const Sample& s);
LatentVec encode_features(const BackboneModel& model, const SparseVec& feats);
LatentVec encode(const BackboneModel& model, const Sample& s);
/// softmax(head_W x + head_b); x is any latent-space vector, including differences.
Prediction predict_latent(const BackboneModel& model, std::span<const double> x);
Prediction predict_text(const BackboneModel& model, const Sample& s);

/// Tensors in a fixed order: encoder (weight, bias)..., head_W, head_b.
std::vector<std::span<double>> parameter_views(BackboneModel& model);
/// Copy of `model` with every parameter zeroed; used as a gradient buffer.
BackboneModel zeros_like(const BackboneModel& model);

/// Mean cross-entropy over the examples plus alpha * (sum of squared
/// weights). Accumulates the gradient into `grad` when non-null.
double backbone_objective(const BackboneModel& model, std::span<const SparseVec> feats,
                          std::span<const std::size_t> labels, BackboneModel* grad);

/// Adam over shuffled mini-batches; returns the epoch snapshot with the best
/// validation accuracy (later epoch wins ties).
BackboneModel fit_classifier(BackboneModel init, std::span<const SparseVec> train_x,
                             std::span<const std::size_t> train_y, std::span<const SparseVec> val_x,
                             std::span<const std::size_t> val_y, const BackboneConfig& cfg,
                             TrainHistory* history = nullptr);

/// Builds the vocabulary (text datasets) from `train`, then fits the model.
/// An empty `val` falls back to selecting on the training set.
BackboneModel train_backbone(std::span<const Sample* const> train, std::span<const Sample* const> val,
                             const Dataset& shape, const BackboneConfig& cfg, TrainHistory* history = nullptr);

double accuracy(const BackboneModel& model, std::span<const SparseVec> feats, std::span<const std::size_t> labels);

/// Maximum class probability.
double mcp(std::span<const double> p);

struct ConfidenceBin {
  std::vector<std::size_t> members;  // indices into the evaluated set
  double accuracy = 0.0;
  double mean_mcp = 0.0;
};

struct ConfidenceBins {
  std::vector<ConfidenceBin> bins;  // ascending MCP
};

inline constexpr std::size_t kConfidenceLevels = 10;

/// Ranks by ascending MCP (ties by sample id) and splits into ten groups
/// whose sizes differ by at most one; the lowest-MCP groups take the extras.
ConfidenceBins confidence_bins(std::span<const Prediction> predictions, std::span<const std::size_t> labels,
                               std::span<const std::string> ids);
ConfidenceBins confidence_bins(const BackboneModel& model, std::span<const Sample* const> eval_set);

}  // namespace crm
