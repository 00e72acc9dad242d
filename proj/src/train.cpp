#include "stagecct/train.hpp"

#include <cmath>
#include <stdexcept>

namespace stagecct {
namespace {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("adam eps must be positive");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", to_string(kind)}, {"learning_rate", learning_rate}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  if (j.contains("kind")) c.kind = optimizer_from_string(j.at("kind").get<std::string>());
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.validate();
  return c;
}

void Optimizer::step(Params& params) {
  auto& entries = params.entries();
  const double lr = config_.learning_rate;
  ++steps_;
  if (config_.kind == OptimizerKind::kSgd) {
    for (auto& e : entries) {
      if (!e.trainable || !e.tensor.has_grad()) continue;
      const auto g = e.tensor.grad();
      auto v = e.tensor.mutable_values();
      for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr * g[k];
    }
    return;
  }
  if (m_.empty()) {
    m_.resize(entries.size());
    v_.resize(entries.size());
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable || !e.tensor.has_grad()) continue;
    const auto g = e.tensor.grad();
    auto val = e.tensor.mutable_values();
    if (m_[i].empty()) {
      m_[i].assign(g.size(), 0.0);
      v_[i].assign(g.size(), 0.0);
    }
    for (std::size_t k = 0; k < val.size(); ++k) {
      m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * g[k];
      v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * g[k] * g[k];
      val[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + config_.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (!use_clip_bce && !use_cc && !use_patchup) throw std::invalid_argument("at least one loss term must be enabled");
  patchup.validate();
  optimizer.validate();
  if (!(cc_weight >= 0.0) || !std::isfinite(cc_weight)) throw std::invalid_argument("cc_weight must be finite and non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"use_clip_bce", use_clip_bce},
          {"use_cc", use_cc},
          {"use_patchup", use_patchup},
          {"cc_weight", cc_weight},
          {"patchup", patchup.to_json()},
          {"warmup_iters", warmup_iters},
          {"optimizer", optimizer.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.use_clip_bce = j.value("use_clip_bce", c.use_clip_bce);
  c.use_cc = j.value("use_cc", c.use_cc);
  c.use_patchup = j.value("use_patchup", c.use_patchup);
  c.cc_weight = j.value("cc_weight", c.cc_weight);
  if (j.contains("patchup")) c.patchup = mix::PatchUpConfig::from_json(j.at("patchup"));
  c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
  if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
  c.validate();
  return c;
}

LossTerms loss_terms(const Model& model, const ForwardResult& forward, const std::vector<double>& labels,
                     const loss::ClassCenters* centers, const std::vector<Scalar>* attention,
                     const mix::MixOutcome* mix, bool include_clip_bce, double cc_weight) {
  LossTerms t;
  t.clip_bce = loss::clip_bce(forward.probability, labels);
  if (include_clip_bce) t.total = t.clip_bce;
  // Terms are added in a fixed order: clip-BCE, PatchUp, CC.
  auto accumulate = [&t](const Tensor& term) { t.total = t.total.defined() ? ops::add(t.total, term) : term; };
  double cc = 0.0, patchup = 0.0;
  if (centers && attention) {
    t.cc = loss::cc_loss(forward.feature, labels, *centers, *attention);
    if (cc_weight != 1.0) t.cc = ops::mul(t.cc, cc_weight);
    cc = t.cc.item();
  }
  if (mix && mix->applied) {
    const Tensor pred = model.head_forward(mix::replay_mix(forward.sequence, *mix));
    t.patchup = mix::patchup_loss(pred, labels, mix->y, mix->pu);
    patchup = t.patchup.item();
    accumulate(t.patchup);
  }
  if (t.cc.defined()) accumulate(t.cc);
  if (!t.total.defined()) throw std::invalid_argument("loss_terms: no loss term is enabled");
  t.values = loss::total_loss(include_clip_bce ? t.clip_bce.item() : 0.0, patchup, cc);
  return t;
}

Trainer::Trainer(Model& model, TrainConfig config, std::uint64_t seed)
    : model_(model),
      config_(std::move(config)),
      mix_rng_(seed),
      centers_(model.config().feature_width(), config_.warmup_iters),
      optimizer_(config_.optimizer) {
  config_.validate();
}

loss::LossBreakdown Trainer::step(const Tensor& x, const std::vector<double>& labels) {
  for (auto& e : model_.params().entries()) e.tensor.clear_grad();
  Tape tape;
  TapeScope scope(tape);

  const ForwardResult r = model_.forward(x);
  centers_.update(r.feature.values(), labels, iteration_);

  std::vector<Scalar> attention;
  if (config_.use_cc || force_attention_pass) {
    const Tensor first = loss::clip_bce(r.probability, labels);
    tape.backward_until(first, r.feature);
    attention = loss::attention_from_gradient(r.feature.grad(), centers_.width());
    tape.zero_grad();
  }

  mix::MixOutcome outcome;
  if (config_.use_patchup) outcome = mix::apply_mix(r.sequence, labels, config_.patchup, mix_rng_);

  const LossTerms terms = loss_terms(model_, r, labels, config_.use_cc ? &centers_ : nullptr,
                                     config_.use_cc ? &attention : nullptr, config_.use_patchup ? &outcome : nullptr,
                                     config_.use_clip_bce, config_.cc_weight);
  if (!std::isfinite(terms.total.item())) {
    throw NumericError("train_step: non-finite total at iteration " + std::to_string(iteration_) + ": " +
                       terms.values.to_json().dump());
  }
  tape.backward(terms.total);
  optimizer_.step(model_.params());
  ++iteration_;
  return terms.values;
}

}  // namespace stagecct
