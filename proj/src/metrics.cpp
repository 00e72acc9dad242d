#include "stagecct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stagecct::metrics {
namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("metrics: labels must be 0 or 1");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("metrics: non-finite score");
  }
}

struct Group {
  std::size_t pos = 0, neg = 0;
};

// Tied scores collapse into one group; groups are ordered by descending score.
std::vector<Group> descending_groups(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Group> groups;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k == 0 || scores[order[k]] != scores[order[k - 1]]) groups.emplace_back();
    (labels[order[k]] == 1 ? groups.back().pos : groups.back().neg) += 1;
  }
  return groups;
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

Summary summarize(const std::vector<std::optional<double>>& values, Deviation deviation) {
  Summary s;
  std::vector<double> xs;
  for (const auto& v : values) {
    if (v) xs.push_back(*v);
  }
  s.defined = xs.size();
  s.undefined = values.size() - xs.size();
  if (xs.empty()) return s;
  // Identical values would otherwise pick up rounding noise from sum / n.
  if (std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs.front(); })) {
    s.mean = xs.front();
    return s;
  }
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  double sq = 0;
  for (double x : xs) sq += (x - s.mean) * (x - s.mean);
  const std::size_t dof = deviation == Deviation::kPopulation ? xs.size() : xs.size() - 1;
  s.std = dof == 0 ? 0.0 : std::sqrt(sq / static_cast<double>(dof));
  return s;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

ConfusionMatrix confusion_at(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  check_inputs(scores, labels);
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("metrics: threshold must lie in [0, 1]");
  for (double s : scores) {
    if (s < 0.0 || s > 1.0) throw std::invalid_argument("metrics: scores must lie in [0, 1]");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? cm.tp : cm.fn) += 1;
    } else {
      (predicted ? cm.fp : cm.tn) += 1;
    }
  }
  return cm;
}

Rates rates(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("metrics: empty confusion matrix");
  return {ratio(cm.tp, cm.tp + cm.fn), ratio(cm.tn, cm.tn + cm.fp), ratio(cm.tp + cm.tn, cm.total())};
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const std::size_t p = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n = labels.size() - p;
  if (p == 0 || n == 0) throw std::invalid_argument("metrics: ROC needs both classes");
  std::vector<RocPoint> curve{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (const auto& g : descending_groups(scores, labels)) {
    tp += g.pos;
    fp += g.neg;
    curve.push_back({static_cast<double>(fp) / static_cast<double>(n), static_cast<double>(tp) / static_cast<double>(p)});
  }
  return curve;
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const std::uint64_t p = static_cast<std::uint64_t>(std::count(labels.begin(), labels.end(), 1));
  const std::uint64_t n = labels.size() - p;
  if (p == 0 || n == 0) throw std::invalid_argument("metrics: AUROC needs at least one positive and one negative");
  // Twice the trapezoid area in units of 1/(P*N): each segment adds
  // neg * (tp_before + tp_after).
  std::uint64_t twice_area = 0, tp = 0;
  for (const auto& g : descending_groups(scores, labels)) {
    twice_area += g.neg * (2 * tp + g.pos);
    tp += g.pos;
  }
  return static_cast<double>(twice_area) / static_cast<double>(2 * p * n);
}

nlohmann::json FoldMetrics::to_json() const {
  return {{"confusion", {{"tp", confusion.tp}, {"fp", confusion.fp}, {"tn", confusion.tn}, {"fn", confusion.fn}}},
          {"sensitivity", optional_json(rates.sensitivity)},
          {"specificity", optional_json(rates.specificity)},
          {"accuracy", optional_json(rates.accuracy)},
          {"auroc", optional_json(auroc)}};
}

FoldMetrics evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  if (scores.empty()) throw std::invalid_argument("metrics: empty evaluation set");
  FoldMetrics m;
  m.confusion = confusion_at(scores, labels, threshold);
  m.rates = rates(m.confusion);
  const bool both = m.confusion.tp + m.confusion.fn > 0 && m.confusion.tn + m.confusion.fp > 0;
  if (both) m.auroc = metrics::auroc(scores, labels);
  return m;
}

nlohmann::json Summary::to_json() const {
  return {{"mean", mean}, {"std", std}, {"defined", defined}, {"undefined", undefined}};
}

nlohmann::json MetricsReport::to_json() const {
  return {{"folds", folds},
          {"sensitivity", sensitivity.to_json()},
          {"specificity", specificity.to_json()},
          {"accuracy", accuracy.to_json()},
          {"auroc", auroc.to_json()}};
}

MetricsReport aggregate_folds(const std::vector<FoldMetrics>& folds, Deviation deviation) {
  if (folds.empty()) throw std::invalid_argument("metrics: no folds to aggregate");
  std::vector<std::optional<double>> sens, spec, acc, auc;
  for (const auto& f : folds) {
    sens.push_back(f.rates.sensitivity);
    spec.push_back(f.rates.specificity);
    acc.push_back(f.rates.accuracy);
    auc.push_back(f.auroc);
  }
  MetricsReport r;
  r.folds = folds.size();
  r.sensitivity = summarize(sens, deviation);
  r.specificity = summarize(spec, deviation);
  r.accuracy = summarize(acc, deviation);
  r.auroc = summarize(auc, deviation);
  return r;
}

std::string format_mean_std(const Summary& s) {
  if (s.defined == 0) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f \xC2\xB1 %.4f", s.mean, s.std);
  std::string out = buf;
  if (s.undefined) out += " (" + std::to_string(s.undefined) + " undefined)";
  return out;
}

std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  const std::vector<std::string> header{"Method", "Sensitivity", "Specificity", "Accuracy", "AUROC"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& [name, r] : rows) {
    cells.push_back({name, format_mean_std(r.sensitivity), format_mean_std(r.specificity), format_mean_std(r.accuracy),
                     format_mean_std(r.auroc)});
  }
  // Column widths count code points so the two-byte plus-minus sign lines up.
  auto width = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
  };
  std::vector<std::size_t> w(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) w[c] = std::max(w[c], width(row[c]));
  }
  std::ostringstream os;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      os << cells[r][c];
      if (c + 1 < cells[r].size()) os << std::string(w[c] - width(cells[r][c]) + 2, ' ');
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto x : w) total += x + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

}  // namespace stagecct::metrics
