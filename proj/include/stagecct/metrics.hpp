#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace stagecct::metrics {

struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

// A sample is predicted positive iff score >= threshold.
ConfusionMatrix confusion_at(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);

// Ratios with a zero denominator are absent rather than 0.
struct Rates {
  std::optional<double> sensitivity, specificity, accuracy;
};

Rates rates(const ConfusionMatrix& cm);

struct RocPoint {
  double fpr = 0, tpr = 0;
};

// Points from a descending threshold sweep, one per distinct score, framed by
// (0, 0) and (1, 1).
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);

// Trapezoidal area under roc_curve, accumulated in integer counts so that it
// coincides with the pairwise (Mann-Whitney) statistic.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct FoldMetrics {
  ConfusionMatrix confusion;
  Rates rates;
  std::optional<double> auroc;

  nlohmann::json to_json() const;
};

FoldMetrics evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);

struct Summary {
  double mean = 0, std = 0;
  std::size_t defined = 0;   // folds that contributed
  std::size_t undefined = 0; // folds where the metric was absent

  nlohmann::json to_json() const;
};

struct MetricsReport {
  Summary sensitivity, specificity, accuracy, auroc;
  std::size_t folds = 0;

  nlohmann::json to_json() const;
};

enum class Deviation { kPopulation, kSample };

MetricsReport aggregate_folds(const std::vector<FoldMetrics>& folds, Deviation deviation = Deviation::kPopulation);

// "0.9166 ± 0.0132"
std::string format_mean_std(const Summary& s);

// One row per arm: name, then sensitivity, specificity, accuracy, AUROC.
std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);

}  // namespace stagecct::metrics
