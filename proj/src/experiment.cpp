#include "stagecct/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "stagecct/gradcheck.hpp"
#include "stagecct/loss.hpp"
#include "stagecct/mix.hpp"
#include "stagecct/ops.hpp"
#include "stagecct/rng.hpp"

namespace stagecct::experiment {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

DataKind data_kind_from_string(const std::string& s) {
  if (s == "synthetic") return DataKind::kSynthetic;
  if (s == "csv") return DataKind::kCsv;
  throw std::invalid_argument("data.kind must be \"synthetic\" or \"csv\", got \"" + s + "\"");
}

const char* to_string(metrics::Deviation d) { return d == metrics::Deviation::kPopulation ? "population" : "sample"; }

metrics::Deviation deviation_from_string(const std::string& s) {
  if (s == "population") return metrics::Deviation::kPopulation;
  if (s == "sample") return metrics::Deviation::kSample;
  throw std::invalid_argument("std must be \"population\" or \"sample\", got \"" + s + "\"");
}

// Re-throws the active exception with a location prefix, keeping its category
// so callers can still tell validation problems from runtime failures.
[[noreturn]] void rethrow_with_context(const std::string& where) {
  try {
    throw;
  } catch (const NumericError& e) {
    throw NumericError(where + ": " + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(where + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(where + ": " + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
}

std::vector<data::PatientRecord> subset(const data::Cohort& cohort, const std::vector<std::size_t>& indices) {
  std::vector<data::PatientRecord> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(cohort.records.at(i));
  return out;
}

void check_model_matches_data(const ModelConfig& model, const data::Cohort& cohort) {
  if (cohort.records.empty()) throw std::invalid_argument("cohort has no patients");
  const std::size_t width = cohort.schema.encoded_width();
  if (model.variables != width) {
    throw std::invalid_argument("model.variables is " + std::to_string(model.variables) +
                                " but the data encodes to " + std::to_string(width) + " columns");
  }
  if (model.hours != cohort.records.front().hours) {
    throw std::invalid_argument("model.hours is " + std::to_string(model.hours) + " but records span " +
                                std::to_string(cohort.records.front().hours) + " hours");
  }
}

Tensor batch_of(const Encoded& data, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  std::vector<const std::vector<double>*> rows;
  for (std::size_t k = begin; k < end; ++k) rows.push_back(&data.samples[order[k]]);
  return make_batch(rows, data.hours, data.width);
}

}  // namespace

// ---- configuration ----

void DataSource::validate() const {
  if (kind == DataKind::kSynthetic) {
    synthetic.validate();
    return;
  }
  for (const auto& [label, path] : {std::pair{"events", events}, {"labels", labels}, {"schema", schema}}) {
    if (path.empty()) throw std::invalid_argument(std::string("data.") + label + " path is required for csv data");
    if (!fs::exists(path)) throw std::invalid_argument(std::string("data.") + label + " not found: " + path.string());
  }
  if (horizon == 0) throw std::invalid_argument("data.horizon must be positive");
}

json DataSource::to_json() const {
  if (kind == DataKind::kSynthetic) return {{"kind", "synthetic"}, {"synthetic", synthetic.to_json()}};
  return {{"kind", "csv"},
          {"events", events.string()},
          {"labels", labels.string()},
          {"schema", schema.string()},
          {"horizon", horizon}};
}

DataSource DataSource::from_json(const json& j) {
  DataSource d;
  d.kind = data_kind_from_string(j.value("kind", std::string("synthetic")));
  if (j.contains("synthetic")) d.synthetic = data::SyntheticSpec::from_json(j.at("synthetic"));
  d.events = j.value("events", std::string());
  d.labels = j.value("labels", std::string());
  d.schema = j.value("schema", std::string());
  d.horizon = j.value("horizon", d.horizon);
  return d;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (folds < 2) throw std::invalid_argument("folds.k must be at least 2");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("threshold must lie in [0, 1]");
  if (data.kind == DataKind::kSynthetic) {
    if (data.synthetic.hours != model.hours) throw std::invalid_argument("data.synthetic.hours must equal model.hours");
  } else if (data.horizon != model.hours) {
    throw std::invalid_argument("data.horizon must equal model.hours");
  }
}

json RunConfig::to_json() const {
  return {{"model", model.to_json()},
          {"train", train.to_json()},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"data", data.to_json()},
          {"folds", {{"k", folds}, {"seed", fold_seed}}},
          {"seed", seed},
          {"threshold", threshold},
          {"std", to_string(deviation)},
          {"out_dir", out_dir.string()}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("data")) c.data = DataSource::from_json(j.at("data"));
  if (j.contains("folds")) {
    c.folds = j.at("folds").value("k", c.folds);
    c.fold_seed = j.at("folds").value("seed", c.fold_seed);
  }
  c.seed = j.value("seed", c.seed);
  c.threshold = j.value("threshold", c.threshold);
  c.deviation = deviation_from_string(j.value("std", std::string("population")));
  c.out_dir = j.value("out_dir", c.out_dir.string());
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& file) {
  if (!fs::is_regular_file(file)) throw std::invalid_argument("config file not found: " + file.string());
  json j;
  try {
    j = json::parse(data::read_text(file));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + file.string() + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + file.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config " + file.string() + ": " + e.what());
  }
}

std::string RunConfig::fingerprint() const {
  json j = to_json();
  j.erase("out_dir");
  return json_fingerprint(j);
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.train.optimizer.kind = OptimizerKind::kAdam;
  c.train.optimizer.learning_rate = 1e-3;
  // At this width the unweighted CC sum over 192 features outweighs clip-BCE
  // and Adam shrinks the features until the classifier collapses.
  c.train.cc_weight = 0.01;
  c.epochs = 3;
  c.out_dir = "runs/desk";
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.model = ModelConfig::paper();
  c.data.synthetic.variables = c.model.variables;
  c.out_dir = "runs/paper";
  return c;
}

// ---- data plumbing ----

data::Cohort load_cohort(const DataSource& source) {
  source.validate();
  if (source.kind == DataKind::kSynthetic) {
    auto synth = data::generate_synthetic(source.synthetic);
    return {std::move(synth.schema), std::move(synth.records)};
  }
  return data::load_csv_cohort(source.events, source.labels, source.schema, source.horizon);
}

FoldSeeds fold_seeds(std::uint64_t global_seed, std::size_t fold) {
  const std::uint64_t base = mix_seed(global_seed, fold);
  return {mix_seed(base, 1), mix_seed(base, 2), mix_seed(base, 3)};
}

Encoded encode(const data::Cohort& cohort, const std::vector<std::size_t>& indices, const data::CohortStats& stats) {
  Encoded out;
  out.width = cohort.schema.encoded_width();
  out.hours = cohort.records.empty() ? 0 : cohort.records.front().hours;
  for (auto i : indices) {
    const auto& r = cohort.records.at(i);
    out.samples.push_back(data::encode_and_normalize(r, cohort.schema, stats));
    out.labels.push_back(r.label);
  }
  return out;
}

std::vector<double> predict(const Model& model, const Encoded& data, std::size_t batch_size) {
  if (active_tape() != nullptr) throw TapeError("predict must run without an active tape");
  std::vector<std::size_t> order(data.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> scores;
  scores.reserve(order.size());
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    const auto p = model.forward(batch_of(data, order, begin, end)).probability;
    scores.insert(scores.end(), p.values().begin(), p.values().end());
  }
  return scores;
}

json TraceRecord::to_json() const {
  return {{"fold", fold},
          {"epoch", epoch},
          {"step", step},
          {"clip_bce", losses.clip_bce},
          {"patchup", losses.patchup},
          {"cc", losses.cc},
          {"total", losses.total}};
}

TrainOutcome train_on(const RunConfig& config, const data::Cohort& cohort, const std::vector<std::size_t>& train,
                      std::size_t fold) {
  check_model_matches_data(config.model, cohort);
  if (train.empty()) throw std::invalid_argument("training split is empty");
  const auto records = subset(cohort, train);
  TrainOutcome out{Model(config.model, fold_seeds(config.seed, fold).model),
                   data::fit_stats(records, cohort.schema),
                   {}};
  const FoldSeeds seeds = fold_seeds(config.seed, fold);
  const Encoded enc = encode(cohort, train, out.stats);

  Trainer trainer(out.model, config.train, seeds.mix);
  Rng shuffle(seeds.shuffle);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffle.permutation(enc.samples.size());
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<double> labels;
      for (std::size_t k = begin; k < end; ++k) labels.push_back(enc.labels[order[k]]);
      try {
        const auto losses = trainer.step(batch_of(enc, order, begin, end), labels);
        out.trace.push_back({fold, epoch, step, losses});
      } catch (...) {
        rethrow_with_context("fold " + std::to_string(fold) + ", epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
      }
      ++step;
    }
  }
  return out;
}

FoldResult run_fold(const RunConfig& config, const data::Cohort& cohort, const data::FoldPlan& plan, std::size_t fold) {
  FoldResult r;
  r.fold = fold;
  r.train_indices = plan.train_indices(fold);
  r.test_indices = plan.test_indices(fold);
  // Leak guard: the two splits must be disjoint and cover the cohort.
  std::vector<std::uint8_t> seen(cohort.records.size(), 0);
  for (auto i : r.train_indices) seen.at(i) |= 1;
  for (auto i : r.test_indices) {
    if (seen.at(i) & 1) throw std::logic_error("fold " + std::to_string(fold) + ": sample " + std::to_string(i) +
                                               " is in both the training and held-out split");
    seen[i] |= 2;
  }
  if (std::count(seen.begin(), seen.end(), 0) != 0) throw std::logic_error("fold plan does not cover every sample");

  auto trained = train_on(config, cohort, r.train_indices, fold);
  r.stats = std::move(trained.stats);
  r.trace = std::move(trained.trace);
  const Encoded test = encode(cohort, r.test_indices, r.stats);
  r.scores = predict(trained.model, test, config.batch_size);
  try {
    r.metrics = metrics::evaluate_scores(r.scores, test.labels, config.threshold);
  } catch (...) {
    rethrow_with_context("fold " + std::to_string(fold) + ", evaluation");
  }
  return r;
}

CrossValidation cross_validate(const RunConfig& config, const data::Cohort& cohort, bool parallel) {
  config.validate();
  check_model_matches_data(config.model, cohort);
  std::vector<int> labels;
  for (const auto& r : cohort.records) labels.push_back(r.label);
  const auto plan = data::stratified_kfold(labels, config.folds, config.fold_seed);

  CrossValidation cv;
  cv.fingerprint = config.fingerprint();
  cv.folds.resize(config.folds);
  if (!parallel) {
    for (std::size_t f = 0; f < config.folds; ++f) cv.folds[f] = run_fold(config, cohort, plan, f);
  } else {
    // Each fold owns its model, tape and seeded streams, so results do not
    // depend on scheduling. Errors surface in fold order.
    std::vector<std::exception_ptr> errors(config.folds);
    const std::size_t workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    for (std::size_t first = 0; first < config.folds; first += workers) {
      std::vector<std::thread> pool;
      for (std::size_t f = first; f < std::min(config.folds, first + workers); ++f) {
        pool.emplace_back([&, f] {
          try {
            cv.folds[f] = run_fold(config, cohort, plan, f);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<metrics::FoldMetrics> per_fold;
  for (const auto& f : cv.folds) per_fold.push_back(f.metrics);
  cv.report = metrics::aggregate_folds(per_fold, config.deviation);
  return cv;
}

json CrossValidation::metrics_json() const {
  json folds_json = json::array();
  for (const auto& f : folds) {
    json j = f.metrics.to_json();
    j["fold"] = f.fold;
    j["n_train"] = f.train_indices.size();
    j["n_test"] = f.test_indices.size();
    folds_json.push_back(std::move(j));
  }
  return {{"fingerprint", fingerprint}, {"folds", std::move(folds_json)}, {"report", report.to_json()}};
}

void write_cross_validation(const fs::path& dir, const RunConfig& config, const CrossValidation& cv,
                            const std::string& arm_name) {
  fs::create_directories(dir);
  json cfg = config.to_json();
  cfg["fingerprint"] = cv.fingerprint;
  data::write_text(dir / "config.json", cfg.dump(2) + "\n");

  std::ostringstream trace;
  for (const auto& f : cv.folds) {
    for (const auto& t : f.trace) {
      json j = t.to_json();
      j["fingerprint"] = cv.fingerprint;
      trace << j.dump() << '\n';
    }
  }
  data::write_text(dir / "trace.jsonl", trace.str());
  data::write_text(dir / "metrics.json", cv.metrics_json().dump(2) + "\n");
  data::write_text(dir / "table.txt",
                   "# fingerprint " + cv.fingerprint + "\n" + metrics::format_table({{arm_name, cv.report}}));
}

// ---- ablation ----

std::vector<AblationArm> ablation_arms() {
  return {{"baseline", false, false}, {"+PatchUp-soft", true, false}, {"+CC", false, true}, {"+both", true, true}};
}

RunConfig with_arm(const RunConfig& config, const AblationArm& arm) {
  RunConfig c = config;
  c.train.use_clip_bce = true;
  c.train.use_patchup = arm.patchup;
  c.train.use_cc = arm.cc;
  if (arm.patchup) c.train.patchup.mode = mix::MixMode::kSoft;
  return c;
}

std::string Ablation::table() const {
  std::vector<std::pair<std::string, metrics::MetricsReport>> rows;
  for (const auto& [name, cv] : arms) rows.emplace_back(name, cv.report);
  return metrics::format_table(rows);
}

json Ablation::metrics_json() const {
  json out = json::array();
  for (const auto& [name, cv] : arms) {
    json j = cv.metrics_json();
    j["arm"] = name;
    out.push_back(std::move(j));
  }
  return out;
}

Ablation run_ablation(const RunConfig& config, const data::Cohort& cohort, bool parallel) {
  Ablation a;
  for (const auto& arm : ablation_arms()) a.arms.emplace_back(arm.name, cross_validate(with_arm(config, arm), cohort, parallel));
  return a;
}

void write_ablation(const fs::path& dir, const RunConfig& config, const Ablation& ablation) {
  const auto arms = ablation_arms();
  std::string fingerprints;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    // Arm names start with '+', which is awkward on a command line.
    std::string sub = arms[i].name;
    if (sub.front() == '+') sub = "plus_" + sub.substr(1);
    write_cross_validation(dir / sub, with_arm(config, arms[i]), ablation.arms[i].second, arms[i].name);
    fingerprints += "# " + arms[i].name + " " + ablation.arms[i].second.fingerprint + "\n";
  }
  data::write_text(dir / "ablation.json", ablation.metrics_json().dump(2) + "\n");
  data::write_text(dir / "table.txt", fingerprints + ablation.table());
}

// ---- checkpoints ----

namespace {
constexpr char kMagic[8] = {'S', 'T', 'G', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const fs::path& file, const Model& model, const data::CohortStats& stats,
                     const data::VariableSchema& schema) {
  json params = json::array();
  for (const auto& e : model.params().entries()) {
    params.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"trainable", e.trainable}});
  }
  const json header = {{"model", model.config().to_json()},
                       {"fingerprint", model.config().fingerprint()},
                       {"stats", stats.to_json()},
                       {"schema", schema.to_json()},
                       {"params", std::move(params)}};
  const std::string text = header.dump();
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + file.string());
  const std::uint64_t length = text.size();
  os.write(kMagic, sizeof(kMagic));
  os.write(reinterpret_cast<const char*>(&length), sizeof(length));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : model.params().entries()) {
    const auto v = e.tensor.values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Scalar)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + file.string());
}

std::pair<Model, Checkpoint> load_checkpoint(const fs::path& file, const ModelConfig& expected) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + file.string());
  char magic[8];
  std::uint64_t length = 0;
  is.read(magic, sizeof(magic));
  is.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(file.string() + " is not a checkpoint");
  }
  std::string text(length, '\0');
  is.read(text.data(), static_cast<std::streamsize>(length));
  if (!is) throw CheckpointError(file.string() + ": truncated header");
  const json header = json::parse(text);

  Checkpoint ck;
  ck.fingerprint = header.at("fingerprint").get<std::string>();
  const std::string wanted = expected.fingerprint();
  if (ck.fingerprint != wanted) {
    throw CheckpointError("checkpoint fingerprint " + ck.fingerprint + " does not match config fingerprint " + wanted +
                          " (" + file.string() + ")");
  }
  ck.model_config = ModelConfig::from_json(header.at("model"));
  ck.stats = data::CohortStats::from_json(header.at("stats"));
  ck.schema = data::VariableSchema::from_json(header.at("schema"));

  Model model(ck.model_config, 0);
  const auto& params = header.at("params");
  if (params.size() != model.params().entries().size()) throw CheckpointError(file.string() + ": parameter count differs");
  for (const auto& p : params) {
    Tensor& t = model.params().get(p.at("name").get<std::string>());
    if (p.at("shape").get<Shape>() != t.shape()) {
      throw CheckpointError(file.string() + ": shape mismatch for " + p.at("name").get<std::string>());
    }
    auto v = t.mutable_values();
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Scalar)));
    if (!is) throw CheckpointError(file.string() + ": truncated parameter data");
  }
  return {std::move(model), std::move(ck)};
}

// ---- gradient suite ----

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), v);
}

// Contracts an op's output against fixed random weights so every output
// coordinate carries a distinct gradient.
Tensor weighted(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, random_tensor(rng, y.shape())));
}

struct OpCase {
  std::string name;
  // Builds the checked function and its inputs for one seed.
  std::function<std::pair<std::function<Tensor()>, std::vector<NamedTensor>>(Rng&, std::uint64_t)> build;
};

std::vector<OpCase> op_cases() {
  using Inputs = std::vector<NamedTensor>;
  using Built = std::pair<std::function<Tensor()>, Inputs>;
  std::vector<OpCase> cases;
  auto unary = [&cases](std::string name, std::function<Tensor(const Tensor&)> op, Shape shape, double lo, double hi) {
    cases.push_back({name, [=](Rng& rng, std::uint64_t s) -> Built {
                       Tensor x = random_tensor(rng, shape, lo, hi);
                       return {[=] { return weighted(op(x), s); }, Inputs{{"x", x}}};
                     }});
  };
  cases.push_back({"conv2d", [](Rng& rng, std::uint64_t s) -> Built {
                     Tensor x = random_tensor(rng, {2, 2, 5, 5}), w = random_tensor(rng, {3, 2, 3, 3}),
                            b = random_tensor(rng, {3});
                     return {[=] { return weighted(ops::conv2d(x, w, b, {2, 1}), s); }, Inputs{{"x", x}, {"w", w}, {"b", b}}};
                   }});
  unary("maxpool2d", [](const Tensor& x) { return ops::maxpool2d(x, {3, 2, 1}); }, {2, 2, 5, 5}, -1, 1);
  cases.push_back({"conv1d", [](Rng& rng, std::uint64_t s) -> Built {
                     Tensor x = random_tensor(rng, {2, 3, 6}), w = random_tensor(rng, {2, 3, 3}), b = random_tensor(rng, {2});
                     return {[=] { return weighted(ops::conv1d(x, w, b, 2, 0), s); }, Inputs{{"x", x}, {"w", w}, {"b", b}}};
                   }});
  unary("relu", [](const Tensor& x) { return ops::relu(x); }, {4, 5}, -1, 1);
  unary("sigmoid", [](const Tensor& x) { return ops::sigmoid(x); }, {4, 5}, -3, 3);
  unary("log", [](const Tensor& x) { return ops::log(x); }, {4, 5}, 0.2, 2.0);
  unary("abs", [](const Tensor& x) { return ops::abs(x); }, {4, 5}, -1, 1);
  unary("clamp", [](const Tensor& x) { return ops::clamp(x, -0.5, 0.5); }, {4, 5}, -1, 1);
  auto binary = [&cases](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    cases.push_back({name, [=](Rng& rng, std::uint64_t s) -> Built {
                       Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
                       return {[=] { return weighted(op(a, b), s); }, Inputs{{"a", a}, {"b", b}}};
                     }});
  };
  binary("add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); });
  unary("add_scalar", [](const Tensor& x) { return ops::add(x, 0.75); }, {3, 4}, -1, 1);
  unary("mul_scalar", [](const Tensor& x) { return ops::mul(x, -1.5); }, {3, 4}, -1, 1);
  cases.push_back({"linear", [](Rng& rng, std::uint64_t s) -> Built {
                     Tensor x = random_tensor(rng, {2, 3, 4}), w = random_tensor(rng, {5, 4}), b = random_tensor(rng, {5});
                     return {[=] { return weighted(ops::linear(x, w, b), s); }, Inputs{{"x", x}, {"w", w}, {"b", b}}};
                   }});
  cases.push_back({"matmul", [](Rng& rng, std::uint64_t s) -> Built {
                     Tensor a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 4, 2});
                     Tensor c = random_tensor(rng, {3, 4}), d = random_tensor(rng, {4, 5});
                     return {[=] { return ops::add(weighted(ops::matmul(a, b), s), weighted(ops::matmul(c, d), s + 1)); },
                             Inputs{{"a", a}, {"b", b}, {"c", c}, {"d", d}}};
                   }});
  unary("reshape", [](const Tensor& x) { return ops::reshape(x, {4, 6}); }, {2, 3, 4}, -1, 1);
  unary("permute", [](const Tensor& x) { return ops::permute(x, {2, 0, 1}); }, {2, 3, 4}, -1, 1);
  unary("slice", [](const Tensor& x) { return ops::slice(x, 1, 1, 2); }, {2, 4, 3}, -1, 1);
  binary("concat", [](const Tensor& a, const Tensor& b) { return ops::concat({a, b, a}, 1); });
  unary("gather", [](const Tensor& x) {
          const std::vector<std::size_t> idx{2, 0, 2, 1};
          return ops::gather(x, idx);
        }, {3, 4}, -1, 1);
  unary("expand", [](const Tensor& x) { return ops::expand(x, {3, 4}); }, {1, 4}, -1, 1);
  unary("sum", [](const Tensor& x) { return ops::sum(x); }, {3, 4}, -1, 1);
  unary("mean", [](const Tensor& x) { return ops::mean(x); }, {3, 4}, -1, 1);
  unary("max_last", [](const Tensor& x) { return ops::max_last(x); }, {3, 5}, -1, 1);
  unary("softmax", [](const Tensor& x) { return ops::softmax(x); }, {3, 5}, -2, 2);
  cases.push_back({"layer_norm", [](Rng& rng, std::uint64_t s) -> Built {
                     Tensor x = random_tensor(rng, {3, 6}), g = random_tensor(rng, {6}, 0.5, 1.5), b = random_tensor(rng, {6});
                     return {[=] { return weighted(ops::layer_norm(x, g, b), s); }, Inputs{{"x", x}, {"gamma", g}, {"beta", b}}};
                   }});
  return cases;
}

void record(GradCheckEntry& entry, const GradCheckReport& report, const std::string& context) {
  ++entry.seeds;
  entry.coordinates += report.coordinates;
  entry.reduced_step += report.reduced_step;
  entry.skipped_at_kink += report.skipped_at_kink;
  if (report.max_rel_error >= entry.max_rel_error) {
    entry.max_rel_error = report.max_rel_error;
    entry.worst = context + ": " + report.worst();
  }
  // A check that mostly skipped its coordinates would pass vacuously, so at
  // most 5% may sit on kinks.
  entry.pass = entry.pass && report.pass() && 20 * entry.skipped_at_kink <= entry.coordinates + entry.skipped_at_kink;
}

std::vector<double> random_labels(Rng& rng, std::size_t n) {
  std::vector<double> y(n);
  for (auto& v : y) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  y[0] = 1.0;
  y[n - 1] = 0.0;
  return y;
}

}  // namespace

bool GradCheckSuite::pass() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.pass; });
}

json GradCheckSuite::to_json() const {
  json list = json::array();
  for (const auto& e : entries) {
    list.push_back({{"name", e.name},
                    {"seeds", e.seeds},
                    {"coordinates", e.coordinates},
                    {"reduced_step", e.reduced_step},
                    {"skipped_at_kink", e.skipped_at_kink},
                    {"max_rel_error", e.max_rel_error},
                    {"worst", e.worst},
                    {"pass", e.pass}});
  }
  return {{"pass", pass()}, {"checks", std::move(list)}};
}

GradCheckSuite run_gradcheck_suite(const ModelConfig& desk, const GradCheckSuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  if (options.corrupt_op) {
    std::optional<OpKind> kind;
    for (int k = 0; k <= static_cast<int>(OpKind::kLayerNorm); ++k) {
      if (op_name(static_cast<OpKind>(k)) == *options.corrupt_op) kind = static_cast<OpKind>(k);
    }
    if (!kind) throw std::invalid_argument("unknown op '" + *options.corrupt_op + "'");
    testing::inject_backward_fault(kind);
  }
  struct FaultReset {
    ~FaultReset() { testing::inject_backward_fault(std::nullopt); }
  } reset;

  GradCheckOptions gc;
  gc.threshold = options.threshold;
  GradCheckSuite suite;

  for (const auto& c : op_cases()) {
    GradCheckEntry entry;
    entry.name = c.name;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      const std::uint64_t seed = mix_seed(options.base_seed, s);
      Rng rng(seed);
      auto [f, inputs] = c.build(rng, seed);
      record(entry, grad_check_params(f, inputs, gc), "seed " + std::to_string(s));
    }
    suite.entries.push_back(std::move(entry));
  }

  {
    GradCheckEntry entry;
    entry.name = "clip_bce";
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(mix_seed(options.base_seed, 100 + s));
      // Keep probabilities inside the band; its edges are jump points.
      Tensor p = random_tensor(rng, {8}, 0.3, 0.7);
      const auto y = random_labels(rng, 8);
      record(entry, grad_check_params([&] { return loss::clip_bce(p, y); }, {{"p", p}}, gc), "seed " + std::to_string(s));
    }
    suite.entries.push_back(std::move(entry));
  }
  {
    GradCheckEntry entry;
    entry.name = "patchup_loss";
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(mix_seed(options.base_seed, 200 + s));
      Tensor gi = random_tensor(rng, {4, 3, 5}), gj = random_tensor(rng, {4, 3, 5}), w = random_tensor(rng, {15}, -1, 1);
      mix::PatchUpConfig cfg;
      cfg.gamma = 0.5;
      const auto mask = mix::sample_block_mask({4, 3, 5}, cfg, rng).tensor();
      const double lambda = rng.uniform(0.1, 0.9), pu = rng.uniform(0.2, 0.8);
      const auto yi = random_labels(rng, 4), yj = random_labels(rng, 4);
      std::vector<double> ymix(4);
      for (std::size_t i = 0; i < 4; ++i) ymix[i] = rng.uniform(0.0, 1.0);
      auto f = [&] {
        const Tensor mixed = ops::add(mix::patchup_soft(gi, gj, mask, lambda), mix::patchup_hard(gi, gj, mask));
        const Tensor pred = ops::sigmoid(ops::linear(ops::reshape(mixed, {4, 15}), ops::reshape(w, {1, 15})));
        return mix::patchup_loss(ops::reshape(pred, {4}), yi, ymix, pu);
      };
      record(entry, grad_check_params(f, {{"gi", gi}, {"gj", gj}, {"w", w}}, gc), "seed " + std::to_string(s));
    }
    suite.entries.push_back(std::move(entry));
  }
  {
    GradCheckEntry entry;
    entry.name = "cc_loss";
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(mix_seed(options.base_seed, 300 + s));
      const std::size_t width = 10;
      const auto y = random_labels(rng, 6);
      loss::ClassCenters centers(width, 1);
      // Centers come from an unrelated batch so no |f - m| sits on its kink.
      centers.update(random_tensor(rng, {6, width}).values(), y, 0);
      Tensor f = random_tensor(rng, {6, width});
      std::vector<Scalar> g(6 * width);
      for (auto& v : g) v = rng.uniform(0.0, 1.0);
      record(entry, grad_check_params([&] { return loss::cc_loss(f, y, centers, g); }, {{"feature", f}}, gc),
             "seed " + std::to_string(s));
    }
    suite.entries.push_back(std::move(entry));
  }
  {
    // End-to-end: clip-BCE + PatchUp + CC through the whole desk model. The
    // centers, G and the mixing draw are computed once at the base point and
    // then held fixed, as they are constants of the differentiated loss.
    GradCheckEntry entry;
    entry.name = "end_to_end";
    GradCheckOptions e2e = gc;
    e2e.max_coords_per_param = 1;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      const std::uint64_t seed = mix_seed(options.base_seed, 400 + s);
      e2e.coordinate_seed = seed | 1;
      Rng rng(seed);
      Model model(desk, seed);
      // Wake the zero-initialised classifier, gently enough that both
      // probabilities stay inside the clip band and every term is live.
      for (auto& v : model.params().get("head.out.weight").mutable_values()) v = rng.uniform(-0.1, 0.1);
      if (model.params().contains("head.fc.weight")) {
        for (auto& v : model.params().get("head.fc.weight").mutable_values()) v = rng.uniform(-0.1, 0.1);
      }
      const Tensor x = random_tensor(rng, {2, desk.hours, desk.variables}, -2, 2);
      const std::vector<double> y{1.0, 0.0};

      loss::ClassCenters centers(desk.feature_width(), 1);
      std::vector<Scalar> attention;
      mix::MixOutcome outcome;
      {
        Tape tape;
        TapeScope scope(tape);
        const Tensor other = random_tensor(rng, {2, desk.hours, desk.variables}, -2, 2);
        centers.update(model.forward(other).feature.values(), y, 0);
        const ForwardResult r = model.forward(x);
        tape.backward_until(loss::clip_bce(r.probability, y), r.feature);
        attention = loss::attention_from_gradient(r.feature.grad(), desk.feature_width());
        tape.zero_grad();
        mix::PatchUpConfig cfg;
        outcome = mix::apply_mix(r.sequence.detach(), y, cfg, rng);
      }
      std::vector<NamedTensor> params;
      for (auto& e : model.params().entries()) params.push_back({e.name, e.tensor});
      auto f = [&] { return loss_terms(model, model.forward(x), y, &centers, &attention, &outcome).total; };
      record(entry, grad_check_params(f, params, e2e), "seed " + std::to_string(s));
    }
    suite.entries.push_back(std::move(entry));
  }
  suite.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return suite;
}

}  // namespace stagecct::experiment
