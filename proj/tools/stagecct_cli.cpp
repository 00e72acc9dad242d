// Command-line front end: synth, preprocess, train, cross-validate, evaluate
// and gradcheck. Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 gradient check failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "stagecct/cohort_io.hpp"
#include "stagecct/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stagecct;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitGradcheck = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> threshold;
  bool parallel = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_threshold, bool with_parallel) {
  cmd->add_option("--config", f.config, "Run configuration (JSON); desk defaults when omitted");
  cmd->add_option("--seed", f.seed, "Override the global seed");
  cmd->add_option("--out", f.out, "Output directory (overrides out_dir)");
  if (with_threshold) cmd->add_option("--threshold", f.threshold, "Decision threshold in [0, 1]");
  if (with_parallel) cmd->add_flag("--parallel", f.parallel, "Run folds on separate threads");
}

experiment::RunConfig resolve(const CommonFlags& f) {
  auto cfg = f.config.empty() ? experiment::RunConfig::desk() : experiment::RunConfig::load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.threshold) cfg.threshold = *f.threshold;
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

json config_snapshot(const experiment::RunConfig& cfg) {
  json j = cfg.to_json();
  j["fingerprint"] = cfg.fingerprint();
  return j;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// ---- subcommands ----

struct SynthFlags {
  CommonFlags common;
  std::optional<std::size_t> n_pos, n_neg, variables;
  std::optional<double> separation, missing_rate;
};

int cmd_synth(const SynthFlags& f) {
  auto cfg = f.common.config.empty() ? experiment::RunConfig::desk() : experiment::RunConfig::load(f.common.config);
  auto spec = cfg.data.synthetic;
  if (f.common.seed) spec.seed = *f.common.seed;
  if (f.n_pos) spec.n_pos = *f.n_pos;
  if (f.n_neg) spec.n_neg = *f.n_neg;
  if (f.variables) spec.variables = *f.variables;
  if (f.separation) spec.separation = *f.separation;
  if (f.missing_rate) spec.missing_rate = *f.missing_rate;
  // Validation happens before the output directory is touched.
  spec.validate();
  const fs::path out = f.common.out.empty() ? cfg.out_dir : fs::path(f.common.out);

  const auto cohort = data::generate_synthetic(spec);
  data::write_csv_cohort(out, cohort.schema, cohort.records);
  std::size_t positives = 0;
  for (const auto& r : cohort.records) positives += r.label == 1;
  const json manifest = {{"seed", spec.seed},
                         {"synthetic", spec.to_json()},
                         {"patients", cohort.records.size()},
                         {"positives", positives},
                         {"files", {"events.csv", "labels.csv", "schema.json"}}};
  data::write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << cohort.records.size() << " patients (" << positives << " positive) to " << out.string()
            << "\n";
  return 0;
}

int cmd_preprocess(const CommonFlags& f, bool with_csv) {
  const auto cfg = resolve(f);
  const auto cohort = experiment::load_cohort(cfg.data);
  const auto stats = data::fit_stats(cohort.records, cohort.schema);
  const auto enc = experiment::encode(cohort, all_indices(cohort.records.size()), stats);

  data::EncodedCohort out;
  out.hours = enc.hours;
  out.width = enc.width;
  out.labels = enc.labels;
  for (std::size_t i = 0; i < cohort.records.size(); ++i) {
    out.patient_ids.push_back(cohort.records[i].patient_id);
    out.values.insert(out.values.end(), enc.samples[i].begin(), enc.samples[i].end());
  }
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  data::write_encoded_binary(dir / "encoded.bin", out);
  data::write_text(dir / "stats.json", stats.to_json().dump(2) + "\n");
  data::write_text(dir / "schema.json", cohort.schema.to_json().dump(2) + "\n");
  if (with_csv) data::write_encoded_csv(dir / "encoded_csv", out);
  std::cout << "encoded " << out.patient_ids.size() << " patients, " << out.hours << " x " << out.width << " each\n";
  return 0;
}

// Same layout for train and evaluate, so scoring the training cohort with the
// saved checkpoint yields an identical file.
json evaluation_json(const std::string& fingerprint, std::size_t n, const metrics::FoldMetrics& m) {
  return {{"fingerprint", fingerprint}, {"n", n}, {"metrics", m.to_json()}};
}

int cmd_train(const CommonFlags& f) {
  const auto cfg = resolve(f);
  const auto cohort = experiment::load_cohort(cfg.data);
  const auto indices = all_indices(cohort.records.size());
  const auto fingerprint = cfg.fingerprint();
  // The whole cohort is the training split; fold id 0 selects the seed streams.
  auto outcome = experiment::train_on(cfg, cohort, indices, 0);

  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  data::write_text(dir / "config.json", config_snapshot(cfg).dump(2) + "\n");
  std::string trace;
  for (const auto& t : outcome.trace) {
    json j = t.to_json();
    j["fingerprint"] = fingerprint;
    trace += j.dump() + "\n";
  }
  data::write_text(dir / "trace.jsonl", trace);
  experiment::save_checkpoint(dir / "checkpoint.bin", outcome.model, outcome.stats, cohort.schema);

  const auto enc = experiment::encode(cohort, indices, outcome.stats);
  const auto scores = experiment::predict(outcome.model, enc, cfg.batch_size);
  const auto m = metrics::evaluate_scores(scores, enc.labels, cfg.threshold);
  data::write_text(dir / "metrics.json", evaluation_json(fingerprint, scores.size(), m).dump(2) + "\n");
  std::cout << metrics::format_table({{"train", metrics::aggregate_folds({m}, cfg.deviation)}});
  return 0;
}

int cmd_cross_validate(const CommonFlags& f, bool ablation) {
  const auto cfg = resolve(f);
  const auto cohort = experiment::load_cohort(cfg.data);
  const fs::path dir = cfg.out_dir;
  if (ablation) {
    const auto a = experiment::run_ablation(cfg, cohort, f.parallel);
    experiment::write_ablation(dir, cfg, a);
    std::cout << a.table();
    return 0;
  }
  const auto cv = experiment::cross_validate(cfg, cohort, f.parallel);
  experiment::write_cross_validation(dir, cfg, cv);
  std::cout << metrics::format_table({{"run", cv.report}});
  return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& checkpoint, const std::string& data_dir) {
  auto cfg = resolve(f);
  if (!data_dir.empty()) {
    cfg.data.kind = experiment::DataKind::kCsv;
    cfg.data.events = fs::path(data_dir) / "events.csv";
    cfg.data.labels = fs::path(data_dir) / "labels.csv";
    cfg.data.schema = fs::path(data_dir) / "schema.json";
    cfg.data.validate();
  }
  auto [model, ckpt] = experiment::load_checkpoint(checkpoint, cfg.model);
  const auto cohort = experiment::load_cohort(cfg.data);
  if (cohort.records.empty()) throw std::invalid_argument("evaluate: the evaluation set is empty");
  if (cohort.schema.to_json() != ckpt.schema.to_json()) {
    throw std::invalid_argument("evaluate: data schema differs from the checkpoint's schema");
  }
  const auto enc = experiment::encode(cohort, all_indices(cohort.records.size()), ckpt.stats);
  const auto scores = experiment::predict(model, enc, cfg.batch_size);
  const auto m = metrics::evaluate_scores(scores, enc.labels, cfg.threshold);

  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  data::write_text(dir / "metrics.json", evaluation_json(cfg.fingerprint(), scores.size(), m).dump(2) + "\n");
  std::string csv = "patient_id,label,score\n";
  char buf[64];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", scores[i]);
    csv += cohort.records[i].patient_id + "," + std::to_string(enc.labels[i]) + "," + buf + "\n";
  }
  data::write_text(dir / "scores.csv", csv);
  const auto table = metrics::format_table({{"evaluate", metrics::aggregate_folds({m}, cfg.deviation)}});
  data::write_text(dir / "table.txt", "# fingerprint " + cfg.fingerprint() + "\n" + table);
  std::cout << table;
  return 0;
}

int cmd_gradcheck(const CommonFlags& f, std::size_t seeds, const std::string& corrupt_op) {
  const auto cfg = resolve(f);
  experiment::GradCheckSuiteOptions opts;
  opts.seeds = seeds;
  opts.base_seed = cfg.seed;
  if (!corrupt_op.empty()) opts.corrupt_op = corrupt_op;
  const auto suite = experiment::run_gradcheck_suite(cfg.model, opts);

  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  data::write_text(dir / "gradcheck.json", suite.to_json().dump(2) + "\n");
  for (const auto& e : suite.entries) {
    std::printf("%-4s %-22s max_rel_error %.3e  worst %s\n", e.pass ? "ok" : "FAIL", e.name.c_str(), e.max_rel_error,
                e.worst.c_str());
  }
  std::printf("%s in %.1f s\n", suite.pass() ? "all checks passed" : "gradient check FAILED", suite.seconds);
  return suite.pass() ? 0 : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stage-adaptive mortality model: data, training and evaluation"};
  app.require_subcommand(1);

  SynthFlags synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic cohort as CSV");
  add_common(synth_cmd, synth.common, false, false);
  synth_cmd->add_option("--n-pos", synth.n_pos, "Positive patients");
  synth_cmd->add_option("--n-neg", synth.n_neg, "Negative patients");
  synth_cmd->add_option("--variables", synth.variables, "Variables per hour");
  synth_cmd->add_option("--separation", synth.separation, "Class mean separation");
  synth_cmd->add_option("--missing-rate", synth.missing_rate, "Missing cell rate");

  CommonFlags pre;
  bool pre_csv = false;
  auto* pre_cmd = app.add_subcommand("preprocess", "Impute, encode and normalize a cohort");
  add_common(pre_cmd, pre, false, false);
  pre_cmd->add_flag("--csv", pre_csv, "Also write one CSV matrix per patient");

  CommonFlags train;
  auto* train_cmd = app.add_subcommand("train", "Train on the whole cohort and save a checkpoint");
  add_common(train_cmd, train, true, false);

  CommonFlags cv;
  bool ablation = false;
  auto* cv_cmd = app.add_subcommand("cross-validate", "Stratified k-fold cross-validation");
  add_common(cv_cmd, cv, true, true);
  cv_cmd->add_flag("--ablation", ablation, "Run the four loss arms and emit a comparison table");

  CommonFlags ev;
  std::string checkpoint, data_dir;
  auto* ev_cmd = app.add_subcommand("evaluate", "Score a cohort with a saved checkpoint");
  add_common(ev_cmd, ev, true, false);
  ev_cmd->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  ev_cmd->add_option("--data", data_dir, "Directory with events.csv, labels.csv and schema.json");

  CommonFlags gc;
  std::size_t gc_seeds = 20;
  std::string corrupt;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(gc_cmd, gc, false, false);
  gc_cmd->add_option("--seeds", gc_seeds, "Random seeds per check")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--corrupt-op", corrupt, "Testing aid: replace this op's backward with a wrong one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth);
    if (*pre_cmd) return cmd_preprocess(pre, pre_csv);
    if (*train_cmd) return cmd_train(train);
    if (*cv_cmd) return cmd_cross_validate(cv, ablation);
    if (*ev_cmd) return cmd_evaluate(ev, checkpoint, data_dir);
    if (*gc_cmd) return cmd_gradcheck(gc, gc_seeds, corrupt);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
