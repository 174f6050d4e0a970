#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "crm/linalg.hpp"

namespace crm {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };
enum class SampleKind : std::uint8_t { Factual = 0, Counterfactual = 1 };
enum class TaskKind : std::uint8_t { Single = 0, Pair = 1 };
/// Text rows go through the tf-idf featurizer; latent rows carry the vector
/// itself in text_a (whitespace-separated reals) and bypass the encoder.
enum class InputKind : std::uint8_t { Text = 0, Latent = 1 };

const char* to_string(Split s);
const char* to_string(SampleKind k);
Split parse_split(const std::string& s);

/// One labeled row. For counterfactuals `label` is the target class and
/// `parent_id` names the factual sample it was edited from.
struct Sample {
  std::string id;
  Split split = Split::Train;
  SampleKind kind = SampleKind::Factual;
  std::string parent_id;
  std::size_t label = 0;
  std::string text_a;
  std::string text_b;
  /// Parsed from text_a for latent datasets; empty otherwise.
  Vector latent;

  bool is_factual() const { return kind == SampleKind::Factual; }
};

struct Dataset {
  std::vector<Sample> samples;  // ordered by (split, id)
  std::vector<std::string> class_names;
  TaskKind task = TaskKind::Single;
  InputKind input = InputKind::Text;
  std::size_t latent_dim = 0;

  std::size_t class_count() const { return class_names.size(); }
  /// Samples of one split and kind, in dataset order.
  std::vector<const Sample*> select(Split split, SampleKind kind) const;
  const Sample* find(const std::string& id) const;
};

/// Parses and validates a dataset file. Throws DataError naming the line on
/// malformed rows, duplicate ids, dangling parents and label violations.
Dataset load_dataset(const std::string& path);
Dataset parse_dataset(const std::string& contents);
std::string serialize_dataset(const Dataset& ds);
void save_dataset(const std::string& path, const Dataset& ds);
/// Checks every invariant and sorts samples by (split, id).
void validate_and_sort(Dataset& ds);

std::string escape_field(const std::string& s);
std::string unescape_field(const std::string& s);
std::string format_latent(std::span<const double> v);
Vector parse_latent(const std::string& text);

struct CounterfactualLink {
  const Sample* sample = nullptr;
  std::size_t target_class = 0;
};

struct Linkage {
  std::map<std::string, std::vector<CounterfactualLink>> by_factual;
  /// Factual samples with no counterfactual at all.
  std::size_t unlinked_factuals = 0;
};

/// Factual id -> its counterfactual samples (dataset order). Every factual
/// gets an entry, possibly empty.
Linkage link_pairs(const Dataset& ds);

/// Ground truth for one synthetic counterfactual.
struct MirrorOracle {
  std::string factual_id;
  std::size_t target_class = 0;
  Vector midpoint;  // the class-irrelevant content shared by the pair
  Vector mirror;    // the exact reflection of the factual vector
};

struct SynthResult {
  Dataset dataset;
  Matrix class_means;                         // C x D, unit rows
  std::map<std::string, MirrorOracle> oracle;  // keyed by counterfactual id
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n = 1000;  // factual samples
  std::size_t classes = 2;
  std::size_t dim = 8;
  double noise = 0.0;
  /// Within-class spread present even at noise 0.
  double base_spread = 0.1;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
};

/// Latent-space dataset with mirrored counterfactuals: each factual is drawn
/// around its unit class mean, and its counterfactual toward class c is the
/// reflection across the bisector hyperplane of the two class means.
SynthResult synth_mirror_dataset(const SynthConfig& cfg);

/// Reflects x across the hyperplane bisecting unit vectors a and b.
Vector reflect_across_bisector(std::span<const double> x, std::span<const double> a,
                               std::span<const double> b);

}  // namespace crm
