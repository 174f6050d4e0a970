#include "crm/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "crm/errors.hpp"
#include "crm/model_io.hpp"
#include "crm/pipeline.hpp"

namespace crm {

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::vector<std::string> settings;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config_path, "key=value configuration file");
  sub->add_option("--seed", o.seed, "base random seed");
  sub->add_option("--out", o.out, "output path");
  sub->add_option("--data", o.data, "dataset file");
  sub->add_option("--set", o.settings, "override one setting, key=value")->allow_extra_args(false);
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  for (const auto& s : o.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw DataError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (!o.data.empty()) cfg.dataset = o.data;
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

Dataset require_dataset(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw DataError("no dataset given (use --data or dataset= in the config)");
  return load_dataset(cfg.dataset);
}

std::string require_out(const CommonOptions& o) {
  if (o.out.empty()) throw DataError("--out is required");
  return o.out;
}

ModelBundle require_model(const std::string& path) {
  if (path.empty()) throw DataError("--model is required");
  return load_model(path);
}

nlohmann::ordered_json audit_json(const AuditRecord& a) {
  nlohmann::ordered_json j;
  j["id"] = a.sample_id;
  j["source"] = to_string(a.source);
  j["fusion"] = to_string(a.fusion);
  j["factual_prediction"] = a.factual_prediction;
  j["cf_predictions"] = a.cf_predictions;
  j["deltas"] = a.deltas;
  j["fusion_weights"] = a.fusion_weights;
  j["fused_logits"] = a.fused_logits;
  j["prediction"] = a.output;
  j["label"] = argmax(a.output);
  return j;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Counterfactual reasoning model: training, evaluation and inspection"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::string model_path;
  std::string sample_id;
  std::string split_name = "test";
  std::string methods = "cf,crm";
  std::string baseline = "cf";
  SynthConfig synth;

  auto* train = app.add_subcommand("train", "run every stage, evaluate on test and write model + reports to --out");
  add_common(train, opt);

  auto* train_bb = app.add_subcommand("train-backbone", "train the classification backbone into a model file");
  add_common(train_bb, opt);
  train_bb->add_option("--baseline", baseline, "normal or cf")->check(CLI::IsMember({"normal", "cf"}));

  auto* train_gen = app.add_subcommand("train-generation", "add a generation module to --model");
  add_common(train_gen, opt);
  train_gen->add_option("--model", model_path, "model file with a backbone");

  auto* train_rs = app.add_subcommand("train-retrospection", "add a retrospection module to --model");
  add_common(train_rs, opt);
  train_rs->add_option("--model", model_path, "model file with a backbone");

  auto* eval = app.add_subcommand("eval", "accuracy of the backbone and CRM on one split");
  add_common(eval, opt);
  eval->add_option("--model", model_path, "model file");
  eval->add_option("--split", split_name, "train, val or test");
  eval->add_option("--methods", methods, "comma-separated subset of cf,crm");

  auto* predict = app.add_subcommand("predict", "CRM prediction and audit record for one sample");
  add_common(predict, opt);
  predict->add_option("--model", model_path, "model file");
  predict->add_option("--id", sample_id, "factual sample id")->required();

  auto* conf = app.add_subcommand("confidence-report", "per-decile accuracy table over backbone confidence");
  add_common(conf, opt);
  conf->add_option("--model", model_path, "model file");
  conf->add_option("--split", split_name, "train, val or test");

  auto* synth_cmd = app.add_subcommand("synth-data", "write a mirrored synthetic latent dataset");
  add_common(synth_cmd, opt);
  synth_cmd->add_option("--n", synth.n, "factual samples")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--classes", synth.classes, "number of classes")->check(CLI::Range(2, 1000));
  synth_cmd->add_option("--dim", synth.dim, "latent dimension")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--noise", synth.noise, "extra within-class spread")->check(CLI::NonNegativeNumber);

  try {
    std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
    std::reverse(rev.begin(), rev.end());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig cfg = resolve_config(opt);
    if (app.got_subcommand(train)) {
      const Dataset ds = require_dataset(cfg);
      const std::string dir = require_out(opt);
      const PipelineResult result = run_pipeline(cfg, ds);
      write_pipeline_outputs(dir, result);
      out << format_report(result.report);
      if (result.report.ri) out << "relative improvement: " << format_percent(*result.report.ri) << '\n';
    } else if (app.got_subcommand(train_bb)) {
      const Dataset ds = require_dataset(cfg);
      ModelBundle bundle;
      bundle.backbone = baseline == "normal" ? baseline_normal(ds, cfg, cfg.seed) : baseline_cf(ds, cfg, cfg.seed);
      save_model(require_out(opt), bundle);
    } else if (app.got_subcommand(train_gen)) {
      const Dataset ds = require_dataset(cfg);
      ModelBundle bundle = require_model(model_path);
      if (!bundle.backbone) throw DataError("model file has no backbone");
      bundle.generation = train_generation_stage(ds, *bundle.backbone, cfg, cfg.seed);
      save_model(require_out(opt), bundle);
    } else if (app.got_subcommand(train_rs)) {
      const Dataset ds = require_dataset(cfg);
      ModelBundle bundle = require_model(model_path);
      if (!bundle.backbone) throw DataError("model file has no backbone");
      if (cfg.cf_source == CfSource::Generated && !bundle.generation)
        throw DataError("cf_source=generated needs a model file with a generation module");
      bundle.retrospection = train_retrospection_stage(
          ds, *bundle.backbone, bundle.generation ? &*bundle.generation : nullptr, cfg, cfg.seed);
      save_model(require_out(opt), bundle);
    } else if (app.got_subcommand(eval)) {
      const Dataset ds = require_dataset(cfg);
      const ModelBundle bundle = require_model(model_path);
      EvalModels models;
      models.crm = &bundle;
      models.source = cfg.cf_source;
      const EvalReport report = evaluate(models, ds, parse_split(split_name), split_list(methods));
      out << format_report(report);
      if (report.crm_fallbacks > 0)
        out << "samples without counterfactuals (backbone prediction used): " << report.crm_fallbacks << '\n';
    } else if (app.got_subcommand(predict)) {
      const Dataset ds = require_dataset(cfg);
      const ModelBundle bundle = require_model(model_path);
      const Sample* s = ds.find(sample_id);
      if (!s) throw DataError("no sample with id '" + sample_id + "'");
      if (!s->is_factual()) throw DataError("sample '" + sample_id + "' is a counterfactual row");
      const CrmPrediction p = predict_crm(bundle, ds, link_pairs(ds), *s, cfg.cf_source);
      out << audit_json(p.audit).dump(2) << '\n';
    } else if (app.got_subcommand(conf)) {
      const Dataset ds = require_dataset(cfg);
      const ModelBundle bundle = require_model(model_path);
      const std::string path = require_out(opt);
      const auto rows = confidence_report(bundle, ds, parse_split(split_name), cfg.cf_source, path);
      out << "hardest decile gain: " << hardest_decile_gain(rows) << '\n';
    } else if (app.got_subcommand(synth_cmd)) {
      synth.seed = cfg.seed;
      const SynthResult r = synth_mirror_dataset(synth);
      save_dataset(require_out(opt), r.dataset);
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const PersistenceError& e) {
    err << "model file error: " << e.what() << '\n';
    return kExitData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

}  // namespace crm
