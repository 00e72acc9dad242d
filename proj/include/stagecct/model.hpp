#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagecct/ops.hpp"
#include "stagecct/rng.hpp"
#include "stagecct/tensor.hpp"

namespace stagecct {

// FNV-1a of the compact JSON dump, as 16 hex digits. nlohmann::json keeps
// object keys sorted, so equal configs hash equally.
std::string json_fingerprint(const nlohmann::json& j);

enum class HeadKind { kStageAdaptive, kFullyConnected };
enum class PoolingKind { kSequencePool, kFlatten };

struct ModelConfig {
  std::size_t hours = 24;
  std::size_t variables = 64;

  // Per-hour residual extractor.
  std::size_t extractor_width = 32;
  std::size_t extractor_blocks = 2;

  // Reconstructed map (C, H, W).
  std::size_t map_channels = 3;
  std::size_t map_height = 32;
  std::size_t map_width = 32;

  // Convolutional tokenizer: `tokenizer_stages` x MaxPool(ReLU(Conv2d(x))).
  std::size_t tokenizer_stages = 2;
  std::size_t tokenizer_kernel = 3;
  std::size_t tokenizer_stride = 1;
  std::size_t tokenizer_padding = 1;
  std::size_t tokenizer_hidden_channels = 32;
  std::size_t pool_kernel = 2;
  std::size_t pool_stride = 2;
  std::size_t pool_padding = 0;

  // Transformer encoder.
  std::size_t encoder_depth = 2;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  PoolingKind pooling = PoolingKind::kSequencePool;

  // Pseudo-sequence (hours x seq_dim) is the reshaped encoder output.
  std::size_t seq_dim = 8;

  HeadKind head = HeadKind::kStageAdaptive;
  std::size_t head_channels = 16;
  std::size_t head_layers = 2;
  std::size_t head_kernel = 3;

  bool freeze_tokenizer = true;

  std::size_t feature_width() const { return hours * seq_dim; }
  void validate() const;

  static ModelConfig desk();
  static ModelConfig paper();

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  // FNV-1a over the canonical JSON dump.
  std::string fingerprint() const;
};

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

class Params {
 public:
  Tensor& add(const std::string& name, Tensor tensor, bool trainable);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t count() const;

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

// (T, d) reshape of the encoder output; z_t is the final row.
struct PseudoSequence {
  Tensor matrix;  // (T, d) for one sample

  std::size_t steps() const { return matrix.dim(0); }
  std::vector<Scalar> row(std::size_t i) const;
  std::vector<Scalar> last() const { return row(steps() - 1); }
};

PseudoSequence to_pseudo_sequence(const Tensor& feature, std::size_t steps);

struct ForwardResult {
  Tensor probability;  // (B)
  Tensor feature;      // (B, T*d), the hooked encoder output
  Tensor sequence;     // (B, T, d), the mixing site
  std::vector<Tensor> attention;  // (B*heads, N, N) per layer, when requested
};

struct ShapeLedger {
  Shape input, extractor_out, map, tokens, feature, sequence, probability;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }

  // x: (B, T, V) -> (B, T, extractor_width)
  Tensor extract_features(const Tensor& x) const;
  // (B, T, w) -> (B, C, H, W)
  Tensor reconstruct_map(const Tensor& extracted) const;
  // (B, C, H, W) -> (B, N, E) with positional embeddings added.
  Tensor conv_tokenize(const Tensor& map) const;
  // (B, N, E) -> (B, T*d)
  Tensor encode(const Tensor& tokens, std::vector<Tensor>* attention = nullptr) const;
  // (B, T*d) -> (B, T, d)
  Tensor pseudo_sequence(const Tensor& feature) const;
  // (B, T, d) -> (B)
  Tensor head_forward(const Tensor& sequence) const;

  ForwardResult forward(const Tensor& x, bool keep_attention = false) const;

  static ShapeLedger shape_ledger(const ModelConfig& config);

 private:
  Tensor param(const std::string& name) const { return params_.get(name); }
  Tensor residual_block(const Tensor& x, const std::string& prefix) const;
  Tensor attention_block(const Tensor& x, const std::string& prefix, std::vector<Tensor>* attention) const;

  ModelConfig config_;
  Params params_;
};

// Input batch tensor from encoded per-patient matrices (each T x V).
Tensor make_batch(const std::vector<const std::vector<double>*>& samples, std::size_t hours, std::size_t width);

}  // namespace stagecct
