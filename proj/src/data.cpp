#include "stagecct/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "stagecct/rng.hpp"

namespace stagecct::data {

VariableSchema::VariableSchema(std::vector<VariableSpec> variables) : variables_(std::move(variables)) {
  for (const auto& v : variables_) {
    std::size_t width = 1;
    if (v.kind == VariableKind::kCategorical) {
      if (v.vocabulary.empty()) throw std::invalid_argument("schema: categorical variable '" + v.name + "' has no vocabulary");
      width = v.vocabulary.size();
    }
    ranges_.emplace_back(encoded_width_, width);
    for (std::size_t i = 0; i < width; ++i) one_hot_.push_back(v.kind == VariableKind::kCategorical);
    encoded_width_ += width;
  }
}

std::optional<std::size_t> VariableSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    if (variables_[i].name == name) return i;
  }
  return std::nullopt;
}

nlohmann::json VariableSchema::to_json() const {
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : variables_) {
    nlohmann::json j{{"name", v.name}, {"kind", v.kind == VariableKind::kContinuous ? "continuous" : "categorical"}};
    if (v.kind == VariableKind::kCategorical) j["vocabulary"] = v.vocabulary;
    vars.push_back(std::move(j));
  }
  return {{"variables", vars}};
}

VariableSchema VariableSchema::from_json(const nlohmann::json& j) {
  std::vector<VariableSpec> vars;
  for (const auto& v : j.at("variables")) {
    VariableSpec spec;
    spec.name = v.at("name").get<std::string>();
    const auto kind = v.at("kind").get<std::string>();
    if (kind == "continuous") {
      spec.kind = VariableKind::kContinuous;
    } else if (kind == "categorical") {
      spec.kind = VariableKind::kCategorical;
      spec.vocabulary = v.at("vocabulary").get<std::vector<std::string>>();
    } else {
      throw std::invalid_argument("schema: unknown variable kind '" + kind + "' for '" + spec.name + "'");
    }
    vars.push_back(std::move(spec));
  }
  return VariableSchema(std::move(vars));
}

PatientRecord::PatientRecord(std::string id, std::size_t h, std::size_t v, int lbl)
    : patient_id(std::move(id)), hours(h), variables(v), grid(h * v, 0.0), missing(h * v, 1), label(lbl) {
  if (lbl != 0 && lbl != 1) throw std::invalid_argument("record '" + patient_id + "': label must be 0 or 1");
}

void PatientRecord::set(std::size_t hour, std::size_t var, double value) {
  grid[hour * variables + var] = value;
  missing[hour * variables + var] = 0;
}

namespace {

double parse_value(const VariableSpec& spec, const std::string& text) {
  if (spec.kind == VariableKind::kCategorical) {
    const auto it = std::find(spec.vocabulary.begin(), spec.vocabulary.end(), text);
    return it == spec.vocabulary.end() ? kOutOfVocabulary : static_cast<double>(it - spec.vocabulary.begin());
  }
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty() || !std::isfinite(value)) {
    throw std::invalid_argument("discretize: value '" + text + "' for variable '" + spec.name + "' is not a number");
  }
  return value;
}

void check_shape(const PatientRecord& record, const CohortStats& stats) {
  if (stats.average.size() != record.variables) {
    throw std::invalid_argument("record '" + record.patient_id + "' has " + std::to_string(record.variables) +
                                " variables but stats cover " + std::to_string(stats.average.size()));
  }
}

// Encoded row values before normalization.
void encode_raw(const PatientRecord& record, const VariableSchema& schema, std::vector<double>& out,
                EncodeReport* report) {
  const std::size_t width = schema.encoded_width();
  out.assign(record.hours * width, 0.0);
  for (std::size_t t = 0; t < record.hours; ++t) {
    for (std::size_t v = 0; v < record.variables; ++v) {
      const auto [first, count] = schema.column_range(v);
      const double value = record.at(t, v);
      if (schema[v].kind == VariableKind::kContinuous) {
        out[t * width + first] = value;
        continue;
      }
      const double rounded = std::round(value);
      if (rounded == value && value >= 0 && value < static_cast<double>(count)) {
        out[t * width + first + static_cast<std::size_t>(value)] = 1.0;
      } else if (value != kPlaceholder && report != nullptr) {
        ++report->out_of_vocabulary;
      }
    }
  }
}

}  // namespace

PatientRecord discretize(const std::string& patient_id, std::span<const Event> events, const VariableSchema& schema,
                         int label, std::size_t horizon) {
  PatientRecord record(patient_id, horizon, schema.size(), label);
  std::vector<const Event*> ordered;
  ordered.reserve(events.size());
  for (const auto& e : events) {
    if (!(e.time >= 0)) throw std::invalid_argument("discretize: negative timestamp for patient '" + patient_id + "'");
    if (e.time >= static_cast<double>(horizon)) {
      throw std::invalid_argument("discretize: timestamp " + std::to_string(e.time) + " beyond horizon for patient '" +
                                  patient_id + "'");
    }
    ordered.push_back(&e);
  }
  std::stable_sort(ordered.begin(), ordered.end(), [](const Event* a, const Event* b) { return a->time < b->time; });
  for (const Event* e : ordered) {
    const auto var = schema.index_of(e->variable);
    if (!var) throw std::invalid_argument("discretize: unknown variable '" + e->variable + "'");
    const auto hour = static_cast<std::size_t>(std::floor(e->time));
    record.set(hour, *var, parse_value(schema[*var], e->value));
  }
  return record;
}

PatientRecord forward_impute(const PatientRecord& record, const CohortStats& stats) {
  check_shape(record, stats);
  PatientRecord out = record;
  for (std::size_t v = 0; v < record.variables; ++v) {
    std::optional<double> last;
    for (std::size_t t = 0; t < record.hours; ++t) {
      if (!record.is_missing(t, v)) {
        last = record.at(t, v);
      } else if (last) {
        out.at(t, v) = *last;
      } else {
        out.at(t, v) = stats.average[v].value_or(kPlaceholder);
      }
    }
  }
  return out;
}

std::vector<double> encode_and_normalize(const PatientRecord& record, const VariableSchema& schema,
                                         const CohortStats& stats, EncodeReport* report) {
  if (record.variables != schema.size()) {
    throw std::invalid_argument("encode: record has " + std::to_string(record.variables) + " variables, schema " +
                                std::to_string(schema.size()));
  }
  const std::size_t width = schema.encoded_width();
  if (stats.mean.size() != width || stats.stddev.size() != width) {
    throw std::invalid_argument("encode: stats cover " + std::to_string(stats.mean.size()) + " columns, schema encodes " +
                                std::to_string(width));
  }
  std::vector<double> out;
  encode_raw(record, schema, out, report);
  for (std::size_t t = 0; t < record.hours; ++t) {
    for (std::size_t c = 0; c < width; ++c) {
      if (schema.is_one_hot_column(c)) continue;
      double& x = out[t * width + c];
      x = (x - stats.mean[c]) / std::max(stats.stddev[c], kStdFloor);
    }
  }
  return out;
}

std::vector<double> denormalize(std::span<const double> encoded, std::size_t hours, const VariableSchema& schema,
                                const CohortStats& stats) {
  const std::size_t width = schema.encoded_width();
  if (encoded.size() != hours * width) throw std::invalid_argument("denormalize: size mismatch");
  std::vector<double> out(encoded.begin(), encoded.end());
  for (std::size_t t = 0; t < hours; ++t) {
    for (std::size_t c = 0; c < width; ++c) {
      if (schema.is_one_hot_column(c)) continue;
      double& x = out[t * width + c];
      x = x * std::max(stats.stddev[c], kStdFloor) + stats.mean[c];
    }
  }
  return out;
}

CohortStats fit_stats(std::span<const PatientRecord> train, const VariableSchema& schema) {
  if (train.empty()) throw std::invalid_argument("fit_stats: empty training split");
  const std::size_t vars = schema.size();
  CohortStats stats;
  stats.average.assign(vars, std::nullopt);
  std::vector<double> totals(vars, 0.0);
  std::vector<std::size_t> counts(vars, 0);
  for (const auto& r : train) {
    if (r.variables != vars) throw std::invalid_argument("fit_stats: record '" + r.patient_id + "' does not match schema");
    for (std::size_t t = 0; t < r.hours; ++t) {
      for (std::size_t v = 0; v < vars; ++v) {
        if (schema[v].kind != VariableKind::kContinuous || r.is_missing(t, v)) continue;
        totals[v] += r.at(t, v);
        ++counts[v];
      }
    }
  }
  for (std::size_t v = 0; v < vars; ++v) {
    if (counts[v] > 0) stats.average[v] = totals[v] / static_cast<double>(counts[v]);
  }

  const std::size_t width = schema.encoded_width();
  std::vector<double> sum(width, 0.0), sum_sq(width, 0.0);
  std::size_t rows = 0;
  std::vector<double> encoded;
  // Two passes keep the variance numerically tame.
  for (const auto& r : train) {
    encode_raw(forward_impute(r, stats), schema, encoded, nullptr);
    for (std::size_t t = 0; t < r.hours; ++t) {
      for (std::size_t c = 0; c < width; ++c) sum[c] += encoded[t * width + c];
    }
    rows += r.hours;
  }
  stats.mean.resize(width);
  for (std::size_t c = 0; c < width; ++c) stats.mean[c] = sum[c] / static_cast<double>(rows);
  for (const auto& r : train) {
    encode_raw(forward_impute(r, stats), schema, encoded, nullptr);
    for (std::size_t t = 0; t < r.hours; ++t) {
      for (std::size_t c = 0; c < width; ++c) {
        const double d = encoded[t * width + c] - stats.mean[c];
        sum_sq[c] += d * d;
      }
    }
  }
  stats.stddev.resize(width);
  for (std::size_t c = 0; c < width; ++c) {
    if (schema.is_one_hot_column(c)) {
      stats.mean[c] = 0.0;
      stats.stddev[c] = 1.0;
    } else {
      stats.stddev[c] = std::sqrt(sum_sq[c] / static_cast<double>(rows));
    }
  }
  return stats;
}

nlohmann::json CohortStats::to_json() const {
  nlohmann::json avg = nlohmann::json::array();
  for (const auto& a : average) avg.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"mean", mean}, {"stddev", stddev}, {"average", avg}};
}

CohortStats CohortStats::from_json(const nlohmann::json& j) {
  CohortStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  for (const auto& a : j.at("average")) s.average.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
  return s;
}

void SyntheticSpec::validate() const {
  if (n_pos < 1 || n_neg < 1) throw std::invalid_argument("synthetic spec: n_pos and n_neg must be at least 1");
  if (variables < 1 || hours < 1) throw std::invalid_argument("synthetic spec: variables and hours must be positive");
  if (categorical_variables > variables) throw std::invalid_argument("synthetic spec: more categorical than total variables");
  if (!(missing_rate >= 0 && missing_rate < 1)) throw std::invalid_argument("synthetic spec: missing_rate must lie in [0, 1)");
  if (!(separation >= 0)) throw std::invalid_argument("synthetic spec: separation must be non-negative");
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"seed", seed},
          {"n_pos", n_pos},
          {"n_neg", n_neg},
          {"variables", variables},
          {"categorical_variables", categorical_variables},
          {"hours", hours},
          {"missing_rate", missing_rate},
          {"separation", separation}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.seed = j.value("seed", s.seed);
  s.n_pos = j.value("n_pos", s.n_pos);
  s.n_neg = j.value("n_neg", s.n_neg);
  s.variables = j.value("variables", s.variables);
  s.categorical_variables = j.value("categorical_variables", s.categorical_variables);
  s.hours = j.value("hours", s.hours);
  s.missing_rate = j.value("missing_rate", s.missing_rate);
  s.separation = j.value("separation", s.separation);
  return s;
}

SyntheticCohort generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t n_cont = spec.variables - spec.categorical_variables;
  std::vector<VariableSpec> vars;
  for (std::size_t v = 0; v < spec.variables; ++v) {
    char name[32];
    if (v < n_cont) {
      std::snprintf(name, sizeof(name), "var%03zu", v);
      vars.push_back({name, VariableKind::kContinuous, {}});
    } else {
      std::snprintf(name, sizeof(name), "cat%03zu", v - n_cont);
      vars.push_back({name, VariableKind::kCategorical, {"A", "B", "C"}});
    }
  }
  SyntheticCohort cohort{VariableSchema(std::move(vars)), {}};

  std::vector<double> baseline(spec.variables), scale(spec.variables), direction(spec.variables, 0.0);
  for (std::size_t v = 0; v < spec.variables; ++v) {
    baseline[v] = rng.normal();
    scale[v] = rng.uniform(0.5, 2.0);
  }
  // Half of the variables (at least one) carry the class signal.
  const auto order = rng.permutation(spec.variables);
  const std::size_t informative = std::max<std::size_t>(1, spec.variables / 2);
  for (std::size_t i = 0; i < informative; ++i) direction[order[i]] = rng.bernoulli(0.5) ? 1.0 : -1.0;

  std::vector<int> labels(spec.n_pos, 1);
  labels.resize(spec.n_pos + spec.n_neg, 0);
  const auto shuffle = rng.permutation(labels.size());

  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int label = labels[shuffle[i]];
    char id[32];
    std::snprintf(id, sizeof(id), "p%05zu", i);
    PatientRecord r(id, spec.hours, spec.variables, label);
    const double sign = label == 1 ? 0.5 : -0.5;
    std::vector<double> offset(spec.variables);
    for (auto& o : offset) o = rng.normal(0.0, 0.5);
    for (std::size_t t = 0; t < spec.hours; ++t) {
      for (std::size_t v = 0; v < spec.variables; ++v) {
        const double shift = direction[v] * spec.separation * sign;
        const double noise = offset[v] + rng.normal();
        const bool absent = rng.bernoulli(spec.missing_rate);
        double value = 0;
        if (v < n_cont) {
          value = baseline[v] + shift + scale[v] * noise;
        } else {
          const double latent = shift + noise;
          value = latent < -0.5 ? 0.0 : (latent < 0.5 ? 1.0 : 2.0);
        }
        if (!absent) r.set(t, v, value);
      }
    }
    cohort.records.push_back(std::move(r));
  }
  return cohort;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] != fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::test_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == fold) out.push_back(i);
  }
  return out;
}

FoldPlan stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_kfold: k must be at least 2");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("stratified_kfold: labels must be 0 or 1");
    (labels[i] == 1 ? pos : neg).push_back(i);
  }
  if (pos.size() < k || neg.size() < k) {
    throw std::invalid_argument("stratified_kfold: class with " + std::to_string(std::min(pos.size(), neg.size())) +
                                " members is smaller than k=" + std::to_string(k));
  }
  Rng rng(seed);
  const auto pos_order = rng.permutation(pos.size());
  const auto neg_order = rng.permutation(neg.size());
  FoldPlan plan{k, seed, std::vector<std::size_t>(labels.size())};
  // Deal positives then negatives round-robin so both class and fold sizes differ by at most one.
  std::size_t slot = 0;
  for (auto i : pos_order) plan.assignment[pos[i]] = slot++ % k;
  for (auto i : neg_order) plan.assignment[neg[i]] = slot++ % k;
  return plan;
}

}  // namespace stagecct::data
