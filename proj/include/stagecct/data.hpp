#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace stagecct::data {

// Category code for a cell whose value is absent from the vocabulary.
inline constexpr double kOutOfVocabulary = -2.0;
// Imputation placeholder when neither a previous value nor a training average exists.
inline constexpr double kPlaceholder = -1.0;
inline constexpr double kStdFloor = 1e-6;

enum class VariableKind { kContinuous, kCategorical };

struct VariableSpec {
  std::string name;
  VariableKind kind = VariableKind::kContinuous;
  std::vector<std::string> vocabulary;  // categorical only
};

class VariableSchema {
 public:
  VariableSchema() = default;
  explicit VariableSchema(std::vector<VariableSpec> variables);

  std::size_t size() const { return variables_.size(); }
  const VariableSpec& operator[](std::size_t v) const { return variables_.at(v); }
  const std::vector<VariableSpec>& variables() const { return variables_; }
  std::optional<std::size_t> index_of(const std::string& name) const;

  std::size_t encoded_width() const { return encoded_width_; }
  // [first, first + count) columns of the encoded matrix owned by variable v.
  std::pair<std::size_t, std::size_t> column_range(std::size_t v) const { return ranges_.at(v); }
  bool is_one_hot_column(std::size_t column) const { return one_hot_.at(column); }

  nlohmann::json to_json() const;
  static VariableSchema from_json(const nlohmann::json& j);

 private:
  std::vector<VariableSpec> variables_;
  std::vector<std::pair<std::size_t, std::size_t>> ranges_;
  std::vector<bool> one_hot_;
  std::size_t encoded_width_ = 0;
};

// Hour-by-variable grid. Categorical cells hold the vocabulary index as a real.
struct PatientRecord {
  std::string patient_id;
  std::size_t hours = 0;
  std::size_t variables = 0;
  std::vector<double> grid;
  std::vector<std::uint8_t> missing;
  int label = 0;

  PatientRecord() = default;
  PatientRecord(std::string id, std::size_t hours, std::size_t variables, int label);

  double& at(std::size_t hour, std::size_t var) { return grid[hour * variables + var]; }
  double at(std::size_t hour, std::size_t var) const { return grid[hour * variables + var]; }
  bool is_missing(std::size_t hour, std::size_t var) const { return missing[hour * variables + var] != 0; }
  void set(std::size_t hour, std::size_t var, double value);
};

struct Event {
  double time = 0;  // hours since admission
  std::string variable;
  std::string value;
};

// Last event per (hour, variable) wins; cells without events are marked missing.
PatientRecord discretize(const std::string& patient_id, std::span<const Event> events, const VariableSchema& schema,
                         int label, std::size_t horizon = 24);

struct CohortStats {
  std::vector<double> mean;                    // per encoded column
  std::vector<double> stddev;                  // per encoded column
  std::vector<std::optional<double>> average;  // per raw variable, imputation fallback

  nlohmann::json to_json() const;
  static CohortStats from_json(const nlohmann::json& j);
  bool operator==(const CohortStats&) const = default;
};

PatientRecord forward_impute(const PatientRecord& record, const CohortStats& stats);

struct EncodeReport {
  std::size_t out_of_vocabulary = 0;
};

// Impute first. One-hot groups stay raw; continuous columns become (x - mean) / max(std, 1e-6).
std::vector<double> encode_and_normalize(const PatientRecord& record, const VariableSchema& schema,
                                         const CohortStats& stats, EncodeReport* report = nullptr);
// Inverse of the continuous-column normalization, for round-trip checks.
std::vector<double> denormalize(std::span<const double> encoded, std::size_t hours, const VariableSchema& schema,
                                const CohortStats& stats);

// Averages from observed training values, then mean/std of the imputed, encoded
// training rows. Only `train` is read.
CohortStats fit_stats(std::span<const PatientRecord> train, const VariableSchema& schema);

struct SyntheticSpec {
  std::uint64_t seed = 7;
  std::size_t n_pos = 199;
  std::size_t n_neg = 522;
  std::size_t variables = 64;
  std::size_t categorical_variables = 0;
  std::size_t hours = 24;
  double missing_rate = 0.2;
  double separation = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct SyntheticCohort {
  VariableSchema schema;
  std::vector<PatientRecord> records;
};

SyntheticCohort generate_synthetic(const SyntheticSpec& spec);

struct FoldPlan {
  std::size_t k = 10;
  std::uint64_t seed = 0;
  std::vector<std::size_t> assignment;  // sample index -> fold id

  std::vector<std::size_t> train_indices(std::size_t fold) const;
  std::vector<std::size_t> test_indices(std::size_t fold) const;
};

FoldPlan stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed);

}  // namespace stagecct::data
