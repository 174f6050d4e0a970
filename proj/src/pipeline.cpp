#include "crm/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "crm/errors.hpp"

namespace crm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw DataError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw DataError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc{} || res.ptr != v.data() + v.size() || !std::isfinite(out))
    throw DataError("config: '" + key + "' expects a real number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw DataError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt_real(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void summarize(MethodResult& m) {
  if (m.runs.empty()) return;
  double s = 0.0;
  for (double v : m.runs) s += v;
  m.mean = s / static_cast<double>(m.runs.size());
  double var = 0.0;
  for (double v : m.runs) var += (v - m.mean) * (v - m.mean);
  m.std = std::sqrt(var / static_cast<double>(m.runs.size()));
}

bool every_factual_linked(const Dataset& ds, const Linkage& link) {
  for (const auto& s : ds.samples)
    if (s.is_factual() && link.by_factual.at(s.id).empty()) return false;
  return true;
}

}  // namespace

const char* to_string(CfSource s) { return s == CfSource::Handcrafted ? "handcrafted" : "generated"; }

CfSource parse_cf_source(const std::string& s) {
  if (s == "handcrafted") return CfSource::Handcrafted;
  if (s == "generated") return CfSource::Generated;
  throw DataError("unknown cf_source '" + s + "' (expected handcrafted or generated)");
}

BackboneConfig RunConfig::backbone_config(std::uint64_t run_seed) const {
  BackboneConfig b;
  b.epochs = epochs;
  b.batch_size = batch_size;
  b.lr = lr;
  b.alpha = alpha;
  b.hidden_dim = hidden_dim;
  b.max_features = max_features;
  b.seed = run_seed;
  return b;
}

TrainConfig RunConfig::retrospection_config(std::uint64_t run_seed) const {
  return TrainConfig{epochs, batch_size, lr, run_seed};
}

GenerationConfig RunConfig::generation_config(std::uint64_t run_seed) const {
  GenerationConfig g;
  g.filters = filters_l;
  g.hidden = hidden_m;
  g.gamma = gamma;
  g.epochs = epochs;
  g.batch_size = batch_size;
  g.lr = lr;
  g.seed = run_seed;
  g.normalize_injected = normalize_injected;
  return g;
}

void apply_setting(RunConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string v = trim(raw_value);
  if (key == "dataset") {
    cfg.dataset = v;
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, v);
  } else if (key == "epochs") {
    cfg.epochs = parse_count(key, v);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_count(key, v);
    if (cfg.batch_size == 0) throw DataError("config: batch_size must be positive");
  } else if (key == "lr") {
    cfg.lr = parse_real(key, v);
    if (cfg.lr <= 0.0) throw DataError("config: lr must be positive");
  } else if (key == "repeats") {
    cfg.repeats = parse_count(key, v);
    if (cfg.repeats == 0) throw DataError("config: repeats must be positive");
  } else if (key == "alpha") {
    cfg.alpha = parse_real(key, v);
    if (cfg.alpha < 0.0) throw DataError("config: alpha must be non-negative");
  } else if (key == "hidden_dim") {
    cfg.hidden_dim = parse_count(key, v);
    if (cfg.hidden_dim == 0) throw DataError("config: hidden_dim must be positive");
  } else if (key == "max_features") {
    cfg.max_features = parse_count(key, v);
    if (cfg.max_features == 0) throw DataError("config: max_features must be positive");
  } else if (key == "K") {
    cfg.filters_k = parse_count(key, v);
    if (cfg.filters_k == 0) throw DataError("config: K must be positive");
  } else if (key == "lambda") {
    cfg.lambda = parse_real(key, v);
    if (cfg.lambda < 0.0) throw DataError("config: lambda must be non-negative");
  } else if (key == "fusion") {
    cfg.fusion = parse_fusion(v);
  } else if (key == "middle_pooling") {
    if (v == "attention") {
      cfg.middle_pooling = MiddlePooling::Attention;
    } else if (v == "mean") {
      cfg.middle_pooling = MiddlePooling::Mean;
    } else {
      throw DataError("config: middle_pooling expects attention or mean");
    }
  } else if (key == "L") {
    cfg.filters_l = parse_count(key, v);
    if (cfg.filters_l == 0) throw DataError("config: L must be positive");
  } else if (key == "M") {
    cfg.hidden_m = parse_count(key, v);
    if (cfg.hidden_m == 0) throw DataError("config: M must be positive");
  } else if (key == "gamma") {
    cfg.gamma = parse_real(key, v);
    if (cfg.gamma < 0.0) throw DataError("config: gamma must be non-negative");
  } else if (key == "normalize_injected") {
    cfg.normalize_injected = parse_bool(key, v);
  } else if (key == "cf_source") {
    cfg.cf_source = parse_cf_source(v);
  } else {
    throw DataError("config: unknown key '" + key + "'");
  }
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("config line " + std::to_string(line_no) + ": expected key=value");
    apply_setting(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, buf.str());
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  return {
      {"dataset", cfg.dataset},
      {"seed", std::to_string(cfg.seed)},
      {"epochs", std::to_string(cfg.epochs)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"lr", fmt_real(cfg.lr)},
      {"repeats", std::to_string(cfg.repeats)},
      {"alpha", fmt_real(cfg.alpha)},
      {"hidden_dim", std::to_string(cfg.hidden_dim)},
      {"max_features", std::to_string(cfg.max_features)},
      {"K", std::to_string(cfg.filters_k)},
      {"lambda", fmt_real(cfg.lambda)},
      {"fusion", to_string(cfg.fusion)},
      {"middle_pooling", cfg.middle_pooling == MiddlePooling::Attention ? "attention" : "mean"},
      {"L", std::to_string(cfg.filters_l)},
      {"M", std::to_string(cfg.hidden_m)},
      {"gamma", fmt_real(cfg.gamma)},
      {"normalize_injected", cfg.normalize_injected ? "true" : "false"},
      {"cf_source", to_string(cfg.cf_source)},
  };
}

BackboneModel baseline_normal(const Dataset& ds, const RunConfig& cfg, std::uint64_t run_seed) {
  const auto train = ds.select(Split::Train, SampleKind::Factual);
  const auto val = ds.select(Split::Val, SampleKind::Factual);
  return train_backbone(train, val, ds, cfg.backbone_config(run_seed));
}

BackboneModel baseline_cf(const Dataset& ds, const RunConfig& cfg, std::uint64_t run_seed) {
  auto train = ds.select(Split::Train, SampleKind::Factual);
  const auto cfs = ds.select(Split::Train, SampleKind::Counterfactual);
  train.insert(train.end(), cfs.begin(), cfs.end());
  const auto val = ds.select(Split::Val, SampleKind::Factual);
  return train_backbone(train, val, ds, cfg.backbone_config(run_seed));
}

Vector implicit_features(const Dataset& ds, const Linkage& link, const BackboneModel& backbone,
                         const Sample& factual) {
  (void)ds;
  const auto& cfs = link.by_factual.at(factual.id);
  if (cfs.empty()) throw DataError("implicit baseline: factual '" + factual.id + "' has no counterfactuals");
  Vector x = encode(backbone, factual);
  const std::size_t D = x.size();
  Vector mean(D, 0.0);
  for (const auto& l : cfs) axpy(mean, encode(backbone, *l.sample), 1.0 / static_cast<double>(cfs.size()));
  x.insert(x.end(), mean.begin(), mean.end());
  return x;
}

ImplicitModel baseline_implicit(const Dataset& ds, const BackboneModel& backbone, const RunConfig& cfg,
                                std::uint64_t run_seed) {
  const Linkage link = link_pairs(ds);
  auto build = [&](Split split, std::vector<SparseVec>& xs, std::vector<std::size_t>& ys) {
    for (const Sample* s : ds.select(split, SampleKind::Factual)) {
      xs.push_back(dense_features(implicit_features(ds, link, backbone, *s)));
      ys.push_back(s->label);
    }
  };
  std::vector<SparseVec> tx, vx;
  std::vector<std::size_t> ty, vy;
  build(Split::Train, tx, ty);
  build(Split::Val, vx, vy);
  if (tx.empty()) throw DataError("implicit baseline: no training factuals");
  Rng rng(run_seed ^ 0x1f83d9abfb41bd6bULL);
  BackboneModel init = init_backbone(InputKind::Latent, 2 * backbone.latent_dim(), backbone.class_count(),
                                     cfg.hidden_dim, 1, rng);
  BackboneConfig bc = cfg.backbone_config(run_seed);
  return ImplicitModel{fit_classifier(std::move(init), tx, ty, vx, vy, bc)};
}

Prediction predict_implicit(const ImplicitModel& m, const Dataset& ds, const Linkage& link,
                            const BackboneModel& backbone, const Sample& factual) {
  const Vector in = implicit_features(ds, link, backbone, factual);
  return predict_latent(m.net, encode_features(m.net, dense_features(in)));
}

std::vector<GenerationPair> generation_pairs(const Dataset& ds, const Linkage& link, const BackboneModel& backbone,
                                             Split split) {
  std::vector<GenerationPair> out;
  for (const Sample* f : ds.select(split, SampleKind::Factual)) {
    const auto& cfs = link.by_factual.at(f->id);
    if (cfs.empty()) continue;
    const LatentVec x = encode(backbone, *f);
    for (const auto& l : cfs) out.push_back({x, encode(backbone, *l.sample), f->label, l.target_class});
  }
  return out;
}

GenerationModel train_generation_stage(const Dataset& ds, const BackboneModel& backbone, const RunConfig& cfg,
                                       std::uint64_t run_seed) {
  const Linkage link = link_pairs(ds);
  const auto train = generation_pairs(ds, link, backbone, Split::Train);
  const auto val = generation_pairs(ds, link, backbone, Split::Val);
  return train_generation(backbone, train, val, cfg.generation_config(run_seed), backbone_fingerprint(backbone));
}

std::optional<CounterfactualSet> counterfactual_set(const Dataset& ds, const Linkage& link,
                                                    const BackboneModel& backbone, const GenerationModel* gen,
                                                    const Sample& factual, CfSource source) {
  (void)ds;
  const LatentVec x = encode(backbone, factual);
  if (source == CfSource::Generated) {
    if (!gen) throw DataError("generated counterfactuals requested but no generation model is available");
    return generate_set(*gen, x);
  }
  const auto it = link.by_factual.find(factual.id);
  if (it == link.by_factual.end() || it->second.empty()) return std::nullopt;
  CounterfactualSet set;
  set.factual = x;
  for (const auto& l : it->second) {
    set.counterfactuals.push_back(encode(backbone, *l.sample));
    set.provenance.push_back(Provenance::Handcrafted);
  }
  return set;
}

RetrospectionModel train_retrospection_stage(const Dataset& ds, const BackboneModel& backbone,
                                             const GenerationModel* gen, const RunConfig& cfg,
                                             std::uint64_t run_seed) {
  const Linkage link = link_pairs(ds);
  auto build = [&](Split split) {
    std::vector<LabeledSet> out;
    for (const Sample* f : ds.select(split, SampleKind::Factual)) {
      auto set = counterfactual_set(ds, link, backbone, gen, *f, cfg.cf_source);
      if (set) out.push_back({std::move(*set), f->label});
    }
    return out;
  };
  const auto train = build(Split::Train);
  const auto val = build(Split::Val);
  if (train.empty()) throw DataError("retrospection: no training factual has counterfactuals");
  Rng rng(run_seed ^ 0x7f4a7c159e3779b9ULL);
  RetrospectionModel init = init_retrospection(backbone.class_count(), cfg.filters_k, cfg.fusion, cfg.lambda, rng);
  init.middle_pooling = cfg.middle_pooling;
  return train_retrospection(std::move(init), backbone, train, val, cfg.retrospection_config(run_seed));
}

CrmPrediction predict_crm(const ModelBundle& bundle, const Dataset& ds, const Linkage& link, const Sample& factual,
                          CfSource source) {
  if (!bundle.backbone) throw DataError("predict_crm: bundle has no backbone");
  if (!bundle.retrospection) throw DataError("predict_crm: bundle has no retrospection model");
  if (source == CfSource::Generated && !bundle.generation)
    throw DataError("predict_crm: bundle has no generation model");
  const BackboneModel& backbone = *bundle.backbone;
  const RetrospectionModel& retro = *bundle.retrospection;
  const auto set = counterfactual_set(ds, link, backbone, bundle.generation ? &*bundle.generation : nullptr, factual,
                                      source);
  if (!set) throw DataError("predict_crm: sample '" + factual.id + "' has no handcrafted counterfactuals");

  CrmPrediction out;
  AuditRecord& a = out.audit;
  a.sample_id = factual.id;
  a.source = source;
  a.fusion = retro.fusion;
  a.factual_prediction = predict_latent(backbone, set->factual);
  for (const auto& cf : set->counterfactuals) {
    a.cf_predictions.push_back(predict_latent(backbone, cf));
    a.deltas.push_back(compare_representation(backbone, set->factual, cf));
  }
  a.stacks = fusion_stacks(retro.fusion, backbone, *set);
  FusionTrace trace;
  a.output = fuse_stacks(retro, a.stacks, &trace);
  a.fusion_weights = std::move(trace.weights);
  a.fused_logits = std::move(trace.logits);
  out.prediction = a.output;
  return out;
}

Prediction refuse_audit(const RetrospectionModel& model, const AuditRecord& audit) {
  return fuse_stacks(model, audit.stacks);
}

const MethodResult* EvalReport::find(const std::string& method) const {
  for (const auto& m : methods)
    if (m.method == method) return &m;
  return nullptr;
}

double relative_improvement(double acc_cf, double acc_crm) {
  if (acc_cf <= 0.0) throw DataError("relative improvement needs a positive +CF accuracy");
  return (acc_crm - acc_cf) / acc_cf;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", fraction * 100.0);
  return buf;
}

std::vector<DecileRow> decile_table(std::span<const Prediction> cf_predictions,
                                    std::span<const Prediction> crm_predictions, std::span<const std::size_t> labels,
                                    std::span<const std::string> ids) {
  if (crm_predictions.size() != cf_predictions.size()) throw ShapeError("decile_table: length mismatch");
  const ConfidenceBins bins = confidence_bins(cf_predictions, labels, ids);
  std::vector<DecileRow> rows;
  for (std::size_t b = 0; b < bins.bins.size(); ++b) {
    const auto& bin = bins.bins[b];
    std::size_t hits = 0;
    for (std::size_t i : bin.members)
      if (argmax(crm_predictions[i]) == labels[i]) ++hits;
    DecileRow row;
    row.decile = b + 1;
    row.n = static_cast<double>(bin.members.size());
    row.acc_cf = bin.accuracy;
    row.acc_crm = static_cast<double>(hits) / static_cast<double>(bin.members.size());
    row.gain = row.acc_crm - row.acc_cf;
    rows.push_back(row);
  }
  return rows;
}

EvalReport evaluate(const EvalModels& models, const Dataset& ds, Split split, const std::vector<std::string>& methods) {
  for (const auto& m : methods)
    if (std::find(kAllMethods.begin(), kAllMethods.end(), m) == kAllMethods.end())
      throw DataError("evaluate: unknown method '" + m + "'");
  const auto want = [&](const char* m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  const auto eval_set = ds.select(split, SampleKind::Factual);
  if (eval_set.empty()) throw DataError(std::string("evaluate: split '") + to_string(split) + "' has no factual samples");
  const bool need_cf_backbone = want("cf") || want("crm") || want("implicit");
  if (need_cf_backbone && (!models.crm || !models.crm->backbone))
    throw DataError("evaluate: the +CF backbone is required for cf, implicit and crm");
  if (want("normal") && !models.normal) throw DataError("evaluate: no normal-training backbone supplied");
  if (want("implicit") && !models.implicit) throw DataError("evaluate: no implicit model supplied");
  if (want("crm") && !models.crm->retrospection) throw DataError("evaluate: bundle has no retrospection model");

  const Linkage link = link_pairs(ds);
  EvalReport report;
  report.test_size = eval_set.size();
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  std::vector<Prediction> cf_preds, crm_preds;
  std::size_t hits_normal = 0, hits_cf = 0, hits_implicit = 0, hits_crm = 0;
  for (const Sample* s : eval_set) {
    labels.push_back(s->label);
    ids.push_back(s->id);
    if (want("normal") && argmax(predict_text(*models.normal, *s)) == s->label) ++hits_normal;
    if (need_cf_backbone) {
      cf_preds.push_back(predict_text(*models.crm->backbone, *s));
      if (argmax(cf_preds.back()) == s->label) ++hits_cf;
    }
    if (want("implicit") &&
        argmax(predict_implicit(*models.implicit, ds, link, *models.crm->backbone, *s)) == s->label)
      ++hits_implicit;
    if (want("crm")) {
      const bool have_cfs = models.source == CfSource::Generated || !link.by_factual.at(s->id).empty();
      if (have_cfs) {
        crm_preds.push_back(predict_crm(*models.crm, ds, link, *s, models.source).prediction);
      } else {
        ++report.crm_fallbacks;
        crm_preds.push_back(cf_preds.back());
      }
      if (argmax(crm_preds.back()) == s->label) ++hits_crm;
    }
  }
  const double n = static_cast<double>(eval_set.size());
  auto add = [&](const char* name, std::size_t hits) {
    if (!want(name)) return;
    MethodResult m;
    m.method = name;
    m.runs = {static_cast<double>(hits) / n};
    summarize(m);
    report.methods.push_back(std::move(m));
  };
  add("normal", hits_normal);
  add("cf", hits_cf);
  add("implicit", hits_implicit);
  add("crm", hits_crm);
  if (want("cf") && want("crm")) {
    const double acc_cf = report.find("cf")->mean;
    if (acc_cf > 0.0) {
      report.ri = relative_improvement(acc_cf, report.find("crm")->mean);
      report.ri_runs = {*report.ri};
    }
    if (eval_set.size() >= kConfidenceLevels) report.deciles = decile_table(cf_preds, crm_preds, labels, ids);
  }
  return report;
}

void write_decile_table(const std::string& path, const std::vector<DecileRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "decile\tn\tacc_cf\tacc_crm\tgain\n";
  for (const auto& r : rows)
    out << r.decile << '\t' << fixed6(r.n) << '\t' << fixed6(r.acc_cf) << '\t' << fixed6(r.acc_crm) << '\t'
        << fixed6(r.gain) << '\n';
}

std::vector<DecileRow> confidence_report(const ModelBundle& bundle, const Dataset& ds, Split split, CfSource source,
                                         const std::string& out_path) {
  EvalModels models;
  models.crm = &bundle;
  models.source = source;
  const auto eval_set = ds.select(split, SampleKind::Factual);
  if (eval_set.size() < kConfidenceLevels)
    throw DataError("confidence report needs at least " + std::to_string(kConfidenceLevels) + " samples");
  const EvalReport report = evaluate(models, ds, split, {"cf", "crm"});
  write_decile_table(out_path, report.deciles);
  return report.deciles;
}

double hardest_decile_gain(const std::vector<DecileRow>& rows) {
  if (rows.empty()) throw DataError("empty decile table");
  return rows.front().gain;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  std::size_t runs = 0;
  for (const auto& m : report.methods) runs = std::max(runs, m.runs.size());
  out << "method\tmean\tstd";
  for (std::size_t r = 0; r < runs; ++r) out << "\trun_" << (r + 1);
  out << '\n';
  for (const auto& m : report.methods) {
    out << m.method << '\t' << fixed6(m.mean) << '\t' << fixed6(m.std);
    for (double v : m.runs) out << '\t' << fixed6(v);
    out << '\n';
  }
  if (report.ri) {
    MethodResult ri;
    ri.runs = report.ri_runs;
    summarize(ri);
    out << "ri\t" << fixed6(*report.ri) << '\t' << fixed6(ri.std);
    for (double v : report.ri_runs) out << '\t' << fixed6(v);
    out << '\n';
  }
  return out.str();
}

PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.repeats == 0) throw DataError("repeats must be positive");
  const Linkage link = link_pairs(ds);
  const bool implicit_possible = every_factual_linked(ds, link);
  std::vector<std::string> methods = {"normal", "cf"};
  if (implicit_possible) methods.push_back("implicit");
  methods.push_back("crm");

  PipelineResult result;
  std::vector<EvalReport> per_run;
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    const std::uint64_t run_seed = cfg.seed + r;
    seeds.push_back(run_seed);
    auto stage = [&](const char* name, auto&& fn) {
      try {
        return fn();
      } catch (const NumericError& e) {
        throw NumericError(std::string("stage '") + name + "' failed: " + e.what());
      } catch (const DataError& e) {
        throw DataError(std::string("stage '") + name + "' failed: " + e.what());
      }
    };
    ModelBundle bundle;
    bundle.backbone = stage("backbone", [&] { return baseline_cf(ds, cfg, run_seed); });
    if (cfg.cf_source == CfSource::Generated)
      bundle.generation = stage("generation", [&] { return train_generation_stage(ds, *bundle.backbone, cfg, run_seed); });
    bundle.retrospection = stage("retrospection", [&] {
      return train_retrospection_stage(ds, *bundle.backbone, bundle.generation ? &*bundle.generation : nullptr, cfg,
                                       run_seed);
    });
    const BackboneModel normal = stage("normal", [&] { return baseline_normal(ds, cfg, run_seed); });
    std::optional<ImplicitModel> implicit;
    if (implicit_possible)
      implicit = stage("implicit", [&] { return baseline_implicit(ds, *bundle.backbone, cfg, run_seed); });

    EvalModels models;
    models.normal = &normal;
    models.implicit = implicit ? &*implicit : nullptr;
    models.crm = &bundle;
    models.source = cfg.cf_source;
    per_run.push_back(stage("evaluate", [&] { return evaluate(models, ds, Split::Test, methods); }));
    if (r == 0) result.bundle = std::move(bundle);
  }

  EvalReport& rep = result.report;
  rep.test_size = per_run.front().test_size;
  for (const auto& name : methods) {
    MethodResult m;
    m.method = name;
    for (const auto& run : per_run) m.runs.push_back(run.find(name)->runs.front());
    summarize(m);
    rep.methods.push_back(std::move(m));
  }
  for (const auto& run : per_run) {
    rep.crm_fallbacks += run.crm_fallbacks;
    if (run.ri) rep.ri_runs.push_back(*run.ri);
  }
  if (rep.find("cf")->mean > 0.0) rep.ri = relative_improvement(rep.find("cf")->mean, rep.find("crm")->mean);
  if (!per_run.front().deciles.empty()) {
    rep.deciles = per_run.front().deciles;
    for (std::size_t d = 0; d < rep.deciles.size(); ++d) {
      DecileRow& row = rep.deciles[d];
      row.n = row.acc_cf = row.acc_crm = 0.0;
      for (const auto& run : per_run) {
        row.n += run.deciles[d].n;
        row.acc_cf += run.deciles[d].acc_cf;
        row.acc_crm += run.deciles[d].acc_crm;
      }
      const double k = static_cast<double>(per_run.size());
      row.n /= k;
      row.acc_cf /= k;
      row.acc_crm /= k;
      row.gain = row.acc_crm - row.acc_cf;
    }
  }

  nlohmann::ordered_json manifest;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config_entries(cfg)) config[k] = v;
  manifest["config"] = config;
  manifest["run_seeds"] = seeds;
  manifest["classes"] = ds.class_count();
  manifest["test_factuals"] = rep.test_size;
  manifest["implicit_baseline"] = implicit_possible ? "trained" : "skipped: some factuals lack counterfactuals";
  manifest["crm_fallbacks"] = rep.crm_fallbacks;
  nlohmann::ordered_json acc = nlohmann::ordered_json::object();
  for (const auto& m : rep.methods) acc[m.method] = {{"mean", m.mean}, {"std", m.std}, {"runs", m.runs}};
  manifest["accuracy"] = acc;
  if (rep.ri) {
    manifest["relative_improvement"] = *rep.ri;
    manifest["relative_improvement_text"] = format_percent(*rep.ri);
  }
  if (!rep.deciles.empty()) manifest["hardest_decile_gain"] = hardest_decile_gain(rep.deciles);
  manifest["outputs"] = {"model.crm", "report.tsv", "deciles.tsv", "manifest.json"};
  result.manifest_json = manifest.dump(2) + "\n";
  return result;
}

void write_pipeline_outputs(const std::string& dir, const PipelineResult& result) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  save_model((base / "model.crm").string(), result.bundle);
  {
    std::ofstream out(base / "report.tsv", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write report.tsv in '" + dir + "'");
    out << format_report(result.report);
  }
  if (!result.report.deciles.empty()) write_decile_table((base / "deciles.tsv").string(), result.report.deciles);
  std::ofstream out(base / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest.json in '" + dir + "'");
  out << result.manifest_json;
}

}  // namespace crm
