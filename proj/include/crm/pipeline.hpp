#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crm/backbone.hpp"
#include "crm/dataset.hpp"
#include "crm/generation.hpp"
#include "crm/model_io.hpp"
#include "crm/retrospection.hpp"

namespace crm {

/// Where retrospection gets its counterfactuals: the dataset's own
/// counterfactual rows, or the generation module.
enum class CfSource : std::uint8_t { Handcrafted = 0, Generated = 1 };

const char* to_string(CfSource s);
CfSource parse_cf_source(const std::string& s);

struct RunConfig {
  std::string dataset;
  std::uint64_t seed = 0;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t repeats = 5;
  // backbone
  double alpha = 1e-5;
  std::size_t hidden_dim = 64;
  std::size_t max_features = 5000;
  // retrospection
  std::size_t filters_k = 10;
  double lambda = 0.0;
  Fusion fusion = Fusion::Early;
  MiddlePooling middle_pooling = MiddlePooling::Attention;
  // generation
  std::size_t filters_l = 10;
  std::size_t hidden_m = 256;
  double gamma = 15.0;
  bool normalize_injected = false;
  CfSource cf_source = CfSource::Handcrafted;

  BackboneConfig backbone_config(std::uint64_t run_seed) const;
  TrainConfig retrospection_config(std::uint64_t run_seed) const;
  GenerationConfig generation_config(std::uint64_t run_seed) const;
};

/// Applies one key=value setting; throws DataError on unknown keys or bad values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
/// Parses a key=value file body ('#' starts a comment, blank lines ignored).
void apply_config_text(RunConfig& cfg, const std::string& text);
RunConfig load_config(const std::string& path);
/// Every resolved key in a fixed order, as key=value lines.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg);

// ---- training stages -------------------------------------------------------

/// Normal training: factual training samples only.
BackboneModel baseline_normal(const Dataset& ds, const RunConfig& cfg, std::uint64_t run_seed);
/// +CF: factual and counterfactual training samples (counterfactuals carry
/// their target class); vocabulary refit on the combined set.
BackboneModel baseline_cf(const Dataset& ds, const RunConfig& cfg, std::uint64_t run_seed);

/// End-to-end classifier over [x, mean handcrafted x*] (2D inputs) from the
/// frozen +CF encoder, trained on factual labels.
struct ImplicitModel {
  BackboneModel net;
};
ImplicitModel baseline_implicit(const Dataset& ds, const BackboneModel& backbone, const RunConfig& cfg,
                                std::uint64_t run_seed);
/// Throws DataError when the factual has no handcrafted counterfactual.
Vector implicit_features(const Dataset& ds, const Linkage& link, const BackboneModel& backbone, const Sample& factual);
Prediction predict_implicit(const ImplicitModel& m, const Dataset& ds, const Linkage& link,
                            const BackboneModel& backbone, const Sample& factual);

std::vector<GenerationPair> generation_pairs(const Dataset& ds, const Linkage& link, const BackboneModel& backbone,
                                             Split split);
GenerationModel train_generation_stage(const Dataset& ds, const BackboneModel& backbone, const RunConfig& cfg,
                                       std::uint64_t run_seed);

/// Counterfactual set for one factual sample, or nullopt when the chosen
/// source has nothing for it (no handcrafted rows).
std::optional<CounterfactualSet> counterfactual_set(const Dataset& ds, const Linkage& link,
                                                    const BackboneModel& backbone, const GenerationModel* gen,
                                                    const Sample& factual, CfSource source);

RetrospectionModel train_retrospection_stage(const Dataset& ds, const BackboneModel& backbone,
                                             const GenerationModel* gen, const RunConfig& cfg,
                                             std::uint64_t run_seed);

// ---- inference -------------------------------------------------------------

/// Everything needed to reconstruct one CRM decision.
struct AuditRecord {
  std::string sample_id;
  CfSource source = CfSource::Handcrafted;
  Fusion fusion = Fusion::Early;
  Prediction factual_prediction;               // f(x)
  std::vector<Prediction> cf_predictions;      // f(x*_i)
  std::vector<Prediction> deltas;              // f(x - x*_i)
  std::vector<Matrix> stacks;                  // what the fusion consumed
  std::vector<double> fusion_weights;
  Vector fused_logits;
  Prediction output;
};

struct CrmPrediction {
  Prediction prediction;
  AuditRecord audit;
};

/// Throws DataError when the bundle lacks a component the source needs or
/// the sample has no counterfactuals.
CrmPrediction predict_crm(const ModelBundle& bundle, const Dataset& ds, const Linkage& link, const Sample& factual,
                          CfSource source);
/// Re-runs fusion from the audit's stacks.
Prediction refuse_audit(const RetrospectionModel& model, const AuditRecord& audit);

// ---- evaluation ------------------------------------------------------------

struct MethodResult {
  std::string method;
  std::vector<double> runs;
  double mean = 0.0;
  double std = 0.0;  // population std over runs
};

struct DecileRow {
  std::size_t decile = 0;  // 1 = least confident
  double n = 0.0;
  double acc_cf = 0.0;
  double acc_crm = 0.0;
  double gain = 0.0;  // acc_crm - acc_cf
};

struct EvalReport {
  std::vector<MethodResult> methods;
  std::vector<double> ri_runs;
  std::optional<double> ri;  // (acc_crm - acc_cf) / acc_cf from the mean accuracies
  std::vector<DecileRow> deciles;
  std::size_t crm_fallbacks = 0;  // test factuals without counterfactuals
  std::size_t test_size = 0;

  const MethodResult* find(const std::string& method) const;
};

/// (acc_crm - acc_cf) / acc_cf
double relative_improvement(double acc_cf, double acc_crm);
/// One decimal percentage, e.g. "15.6%".
std::string format_percent(double fraction);

/// Per-decile accuracies of +CF and CRM over the groups formed by ranking
/// the +CF confidence.
std::vector<DecileRow> decile_table(std::span<const Prediction> cf_predictions,
                                    std::span<const Prediction> crm_predictions, std::span<const std::size_t> labels,
                                    std::span<const std::string> ids);

struct EvalModels {
  const BackboneModel* normal = nullptr;
  const ImplicitModel* implicit = nullptr;
  const ModelBundle* crm = nullptr;  // backbone is the +CF model
  CfSource source = CfSource::Handcrafted;
};

inline const std::vector<std::string> kAllMethods = {"normal", "cf", "implicit", "crm"};

/// Single-run accuracy per method on one split. Unknown method names and
/// methods whose model is missing raise DataError.
EvalReport evaluate(const EvalModels& models, const Dataset& ds, Split split, const std::vector<std::string>& methods);

/// Writes decile, n, acc_cf, acc_crm, gain (tab-separated, one header line).
void write_decile_table(const std::string& path, const std::vector<DecileRow>& rows);
std::vector<DecileRow> confidence_report(const ModelBundle& bundle, const Dataset& ds, Split split, CfSource source,
                                         const std::string& out_path);
/// Index of the least-confident decile's row (always 0) and its gain.
double hardest_decile_gain(const std::vector<DecileRow>& rows);

std::string format_report(const EvalReport& report);

struct PipelineResult {
  ModelBundle bundle;  // from the first repeat
  EvalReport report;
  std::string manifest_json;
};

/// Full run for seeds seed .. seed + repeats - 1: +CF backbone, then the
/// generation module (generated source only), then retrospection, then test
/// inference; plus the normal and implicit baselines for the report.
PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& ds);
/// model.crm, report.tsv, deciles.tsv and manifest.json under `dir`.
void write_pipeline_outputs(const std::string& dir, const PipelineResult& result);

}  // namespace crm
