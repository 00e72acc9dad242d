#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagecct/loss.hpp"
#include "stagecct/mix.hpp"
#include "stagecct/model.hpp"

namespace stagecct {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

// Updates trainable tensors in place from their gradient buffers. Frozen
// tensors and tensors without a gradient are left untouched.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

  void step(Params& params);
  std::size_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::size_t steps_ = 0;
  std::vector<std::vector<Scalar>> m_, v_;
};

struct TrainConfig {
  bool use_clip_bce = true;
  bool use_cc = true;
  bool use_patchup = true;
  // Multiplies the CC term in the total. 1 is the unweighted sum.
  double cc_weight = 1.0;
  mix::PatchUpConfig patchup;
  std::size_t warmup_iters = 100;
  OptimizerConfig optimizer;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossTerms {
  Tensor clip_bce, patchup, cc, total;
  loss::LossBreakdown values;
};

// Assembles the loss graph on top of a forward pass. Null auxiliaries
// disable the corresponding term, which then contributes exactly 0. When
// `include_clip_bce` is false the clip-BCE value is still computed (it drives
// G) but left out of the total.
LossTerms loss_terms(const Model& model, const ForwardResult& forward, const std::vector<double>& labels,
                     const loss::ClassCenters* centers, const std::vector<Scalar>* attention,
                     const mix::MixOutcome* mix, bool include_clip_bce = true, double cc_weight = 1.0);

class Trainer {
 public:
  // `seed` drives the mixing stream only; the model carries its own init seed.
  Trainer(Model& model, TrainConfig config, std::uint64_t seed);

  // One iteration: forward, center update, clip-BCE, first backward to the
  // hooked feature for G, CC and PatchUp terms, gradient reset, backward of
  // the total, optimizer update.
  loss::LossBreakdown step(const Tensor& x, const std::vector<double>& labels);

  std::size_t iteration() const { return iteration_; }
  const loss::ClassCenters& centers() const { return centers_; }
  const TrainConfig& config() const { return config_; }

  // Runs the first backward even when the CC term is disabled.
  bool force_attention_pass = false;

 private:
  Model& model_;
  TrainConfig config_;
  Rng mix_rng_;
  loss::ClassCenters centers_;
  Optimizer optimizer_;
  std::size_t iteration_ = 0;
};

}  // namespace stagecct
