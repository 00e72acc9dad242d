#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagecct/cohort_io.hpp"
#include "stagecct/data.hpp"
#include "stagecct/metrics.hpp"
#include "stagecct/model.hpp"
#include "stagecct/train.hpp"

namespace stagecct::experiment {

enum class DataKind { kSynthetic, kCsv };

struct DataSource {
  DataKind kind = DataKind::kSynthetic;
  data::SyntheticSpec synthetic;
  // CSV inputs, as written by `synth` or hand-prepared.
  std::filesystem::path events, labels, schema;
  std::size_t horizon = 24;

  void validate() const;
  nlohmann::json to_json() const;
  static DataSource from_json(const nlohmann::json& j);
};

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  DataSource data;
  std::size_t folds = 10;
  std::uint64_t fold_seed = 0;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  metrics::Deviation deviation = metrics::Deviation::kPopulation;
  std::filesystem::path out_dir = "runs/out";

  void validate() const;
  // Loading and re-serializing is the identity.
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& file);

  // Covers every field that can change a result, so out_dir is excluded.
  std::string fingerprint() const;

  static RunConfig desk();
  static RunConfig paper();
};

data::Cohort load_cohort(const DataSource& source);

// Stream seeds for one fold; each fold owns its model init, mixing stream and
// batch order.
struct FoldSeeds {
  std::uint64_t model, mix, shuffle;
};
FoldSeeds fold_seeds(std::uint64_t global_seed, std::size_t fold);

struct Encoded {
  std::vector<std::vector<double>> samples;  // hours x width each
  std::vector<int> labels;
  std::size_t hours = 0, width = 0;
};

Encoded encode(const data::Cohort& cohort, const std::vector<std::size_t>& indices, const data::CohortStats& stats);

// Probabilities in sample order, computed without recording a tape.
std::vector<double> predict(const Model& model, const Encoded& data, std::size_t batch_size);

struct TraceRecord {
  std::size_t fold = 0, epoch = 0, step = 0;
  loss::LossBreakdown losses;

  nlohmann::json to_json() const;
};

struct TrainOutcome {
  Model model;
  data::CohortStats stats;
  std::vector<TraceRecord> trace;
};

// Fits preprocessing statistics on `train` only, then runs `epochs` passes of
// shuffled mini-batches through the Trainer. `fold` tags trace records and
// selects the seed streams.
TrainOutcome train_on(const RunConfig& config, const data::Cohort& cohort, const std::vector<std::size_t>& train,
                      std::size_t fold);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> train_indices, test_indices;
  data::CohortStats stats;
  std::vector<double> scores;
  metrics::FoldMetrics metrics;
  std::vector<TraceRecord> trace;
};

FoldResult run_fold(const RunConfig& config, const data::Cohort& cohort, const data::FoldPlan& plan, std::size_t fold);

struct CrossValidation {
  std::string fingerprint;
  std::vector<FoldResult> folds;
  metrics::MetricsReport report;

  // Deterministic: no timings, fixed key order.
  nlohmann::json metrics_json() const;
};

CrossValidation cross_validate(const RunConfig& config, const data::Cohort& cohort, bool parallel = false);

// Writes config.json, trace.jsonl, metrics.json and table.txt under `dir`.
void write_cross_validation(const std::filesystem::path& dir, const RunConfig& config, const CrossValidation& cv,
                            const std::string& arm_name = "run");

// ---- ablation ----

struct AblationArm {
  std::string name;
  bool patchup = false, cc = false;
};

// baseline (clip-BCE only), +PatchUp-soft, +CC, +both.
std::vector<AblationArm> ablation_arms();
RunConfig with_arm(const RunConfig& config, const AblationArm& arm);

struct Ablation {
  std::vector<std::pair<std::string, CrossValidation>> arms;

  std::string table() const;
  nlohmann::json metrics_json() const;
};

Ablation run_ablation(const RunConfig& config, const data::Cohort& cohort, bool parallel = false);
// One sub-directory per arm plus ablation.json and table.txt at the top.
void write_ablation(const std::filesystem::path& dir, const RunConfig& config, const Ablation& ablation);

// ---- checkpoints ----

class CheckpointError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Checkpoint {
  ModelConfig model_config;
  std::string fingerprint;  // of the model config
  data::CohortStats stats;
  data::VariableSchema schema;
};

void save_checkpoint(const std::filesystem::path& file, const Model& model, const data::CohortStats& stats,
                     const data::VariableSchema& schema);

// Refuses to load unless the stored fingerprint equals `expected.fingerprint()`.
std::pair<Model, Checkpoint> load_checkpoint(const std::filesystem::path& file, const ModelConfig& expected);

// ---- gradient suite ----

struct GradCheckEntry {
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0;
  std::string worst;  // parameter or op with the largest error
  std::size_t coordinates = 0, reduced_step = 0, skipped_at_kink = 0;
  bool pass = true;
};

struct GradCheckSuite {
  std::vector<GradCheckEntry> entries;
  double seconds = 0;
  bool pass() const;
  nlohmann::json to_json() const;  // without timing
};

struct GradCheckSuiteOptions {
  std::size_t seeds = 20;
  double threshold = 1e-4;
  std::uint64_t base_seed = 0;
  // Fault injection for the harness's own tests: an op whose backward is
  // replaced by a wrong one.
  std::optional<std::string> corrupt_op;
};

GradCheckSuite run_gradcheck_suite(const ModelConfig& desk, const GradCheckSuiteOptions& options);

}  // namespace stagecct::experiment
