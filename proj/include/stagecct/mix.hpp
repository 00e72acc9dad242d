#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagecct/rng.hpp"
#include "stagecct/tensor.hpp"

namespace stagecct::mix {

enum class MixMode { kHard, kSoft, kManifold };

const char* to_string(MixMode mode);
MixMode mode_from_string(const std::string& s);

struct PatchUpConfig {
  double patchup_prob = 1.0;
  double gamma = 0.75;
  std::size_t block_size = 1;
  MixMode mode = MixMode::kSoft;
  double alpha = 2.0;  // lambda ~ Beta(alpha, alpha)
  std::vector<std::string> sites{"pseudo_sequence"};

  void validate() const;
  nlohmann::json to_json() const;
  static PatchUpConfig from_json(const nlohmann::json& j);
};

// Binary mask; 1 keeps the feature, 0 marks it altered. The last two axes (or
// the only axis of a 1-D shape) form the plane blocks live in; leading axes
// index independent planes.
struct BlockMask {
  Shape shape;
  std::vector<std::uint8_t> keep;
  double pu = 1.0;  // exact fraction of ones

  Tensor tensor() const;
};

double unaltered_fraction(const std::vector<std::uint8_t>& keep);

// Probability of seeding a block at each valid center so that, ignoring
// overlap, the expected altered fraction equals gamma.
double adjusted_gamma(double gamma, std::size_t block_h, std::size_t block_w, std::size_t height, std::size_t width);

BlockMask sample_block_mask(const Shape& shape, double gamma, std::size_t block_size, Rng& rng);
BlockMask sample_block_mask(const Shape& shape, const PatchUpConfig& cfg, Rng& rng);

// True when every zero entry is covered by a block_size x block_size window
// (fully inside the plane) whose entries are all zero.
bool zeros_are_block_union(const BlockMask& mask, std::size_t block_size);

// lambda * a + (1 - lambda) * b
Tensor mix_lambda(const Tensor& a, const Tensor& b, double lambda);
double mix_lambda(double a, double b, double lambda);

Tensor patchup_hard(const Tensor& gi, const Tensor& gj, const Tensor& mask);
Tensor patchup_soft(const Tensor& gi, const Tensor& gj, const Tensor& mask, double lambda);
Tensor manifold_mixup(const Tensor& gi, const Tensor& gj, double lambda);

struct Targets {
  double w = 0;  // reweighted target W(y_i, y_j)
  double y = 0;  // target of the altered region, Y
};

Targets reweighted_target(double yi, double yj, double pu, double lambda, MixMode mode);

// Mean over the batch of pu * bce(pred, y_i) + (1 - pu) * bce(pred, Y), with
// pred clamped to [1e-7, 1 - 1e-7].
Tensor patchup_loss(const Tensor& pred, const std::vector<double>& yi, const std::vector<double>& y_mixed, double pu);

struct MixOutcome {
  bool applied = false;
  Tensor mixed;
  BlockMask mask;
  double lambda = 1.0;
  double pu = 1.0;
  std::vector<std::size_t> partner;  // pi: sample i is mixed with sample partner[i]
  MixMode mode = MixMode::kSoft;
  std::vector<double> w;  // per-sample reweighted target
  std::vector<double> y;  // per-sample Y
};

// Mixes a batch-leading activation with a permuted copy of itself. `labels`
// holds one target per sample.
MixOutcome apply_mix(const Tensor& activation, const std::vector<double>& labels, const PatchUpConfig& cfg, Rng& rng);

// Re-applies a sampled outcome (mask, lambda, partner) to a new activation of
// the same shape.
Tensor replay_mix(const Tensor& activation, const MixOutcome& outcome);

}  // namespace stagecct::mix
