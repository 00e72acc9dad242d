#include "stagecct/model.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace stagecct {

namespace {

std::string indexed(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

const char* to_string(HeadKind k) { return k == HeadKind::kStageAdaptive ? "stage_adaptive" : "fully_connected"; }
const char* to_string(PoolingKind k) { return k == PoolingKind::kSequencePool ? "sequence_pool" : "flatten"; }

HeadKind head_from_string(const std::string& s) {
  if (s == "stage_adaptive") return HeadKind::kStageAdaptive;
  if (s == "fully_connected") return HeadKind::kFullyConnected;
  throw std::invalid_argument("model config: unknown head kind '" + s + "'");
}

PoolingKind pooling_from_string(const std::string& s) {
  if (s == "sequence_pool") return PoolingKind::kSequencePool;
  if (s == "flatten") return PoolingKind::kFlatten;
  throw std::invalid_argument("model config: unknown pooling kind '" + s + "'");
}

Tensor he_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

Shape token_grid(const ModelConfig& c) {
  Shape s{1, c.map_channels, c.map_height, c.map_width};
  for (std::size_t i = 0; i < c.tokenizer_stages; ++i) {
    const std::size_t out = i + 1 == c.tokenizer_stages ? c.embed_dim : c.tokenizer_hidden_channels;
    s = ops::conv2d_shape(s, {out, s[1], c.tokenizer_kernel, c.tokenizer_kernel},
                          {c.tokenizer_stride, c.tokenizer_padding});
    s = ops::maxpool2d_shape(s, {c.pool_kernel, c.pool_stride, c.pool_padding});
  }
  return s;
}

}  // namespace

void ModelConfig::validate() const {
  const std::size_t extents[] = {hours, variables, extractor_width, map_channels, map_height, map_width,
                                 tokenizer_stages, tokenizer_kernel, tokenizer_stride, tokenizer_hidden_channels,
                                 pool_kernel, pool_stride, embed_dim, heads, mlp_ratio, seq_dim, head_channels,
                                 head_layers, head_kernel};
  for (auto e : extents) {
    if (e == 0) throw std::invalid_argument("model config: all extents must be positive");
  }
  if (head == HeadKind::kStageAdaptive && hours < 2) {
    throw std::invalid_argument("model config: the stage-adaptive head needs at least 2 hours");
  }
  if (embed_dim % heads != 0) throw std::invalid_argument("model config: embed_dim must be divisible by heads");
  token_grid(*this);  // throws ShapeError when the map is too small for the tokenizer
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.variables = 812;
  c.extractor_width = 16;
  c.extractor_blocks = 8;
  c.map_height = 224;
  c.map_width = 224;
  c.tokenizer_kernel = 7;
  c.tokenizer_stride = 2;
  c.tokenizer_padding = 3;
  c.tokenizer_hidden_channels = 64;
  c.pool_kernel = 3;
  c.pool_stride = 2;
  c.pool_padding = 1;
  c.encoder_depth = 14;
  c.embed_dim = 384;
  c.heads = 6;
  c.mlp_ratio = 3;
  c.seq_dim = 300;
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"hours", hours},
          {"variables", variables},
          {"extractor_width", extractor_width},
          {"extractor_blocks", extractor_blocks},
          {"map_channels", map_channels},
          {"map_height", map_height},
          {"map_width", map_width},
          {"tokenizer_stages", tokenizer_stages},
          {"tokenizer_kernel", tokenizer_kernel},
          {"tokenizer_stride", tokenizer_stride},
          {"tokenizer_padding", tokenizer_padding},
          {"tokenizer_hidden_channels", tokenizer_hidden_channels},
          {"pool_kernel", pool_kernel},
          {"pool_stride", pool_stride},
          {"pool_padding", pool_padding},
          {"encoder_depth", encoder_depth},
          {"embed_dim", embed_dim},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"pooling", to_string(pooling)},
          {"seq_dim", seq_dim},
          {"head", to_string(head)},
          {"head_channels", head_channels},
          {"head_layers", head_layers},
          {"head_kernel", head_kernel},
          {"freeze_tokenizer", freeze_tokenizer}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
#define STAGECCT_FIELD(name) c.name = j.value(#name, c.name)
  STAGECCT_FIELD(hours);
  STAGECCT_FIELD(variables);
  STAGECCT_FIELD(extractor_width);
  STAGECCT_FIELD(extractor_blocks);
  STAGECCT_FIELD(map_channels);
  STAGECCT_FIELD(map_height);
  STAGECCT_FIELD(map_width);
  STAGECCT_FIELD(tokenizer_stages);
  STAGECCT_FIELD(tokenizer_kernel);
  STAGECCT_FIELD(tokenizer_stride);
  STAGECCT_FIELD(tokenizer_padding);
  STAGECCT_FIELD(tokenizer_hidden_channels);
  STAGECCT_FIELD(pool_kernel);
  STAGECCT_FIELD(pool_stride);
  STAGECCT_FIELD(pool_padding);
  STAGECCT_FIELD(encoder_depth);
  STAGECCT_FIELD(embed_dim);
  STAGECCT_FIELD(heads);
  STAGECCT_FIELD(mlp_ratio);
  STAGECCT_FIELD(seq_dim);
  STAGECCT_FIELD(head_channels);
  STAGECCT_FIELD(head_layers);
  STAGECCT_FIELD(head_kernel);
  STAGECCT_FIELD(freeze_tokenizer);
#undef STAGECCT_FIELD
  if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
  if (j.contains("head")) c.head = head_from_string(j.at("head").get<std::string>());
  c.validate();
  return c;
}

std::string json_fingerprint(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string ModelConfig::fingerprint() const {
  return json_fingerprint(to_json());
}

Tensor& Params::add(const std::string& name, Tensor tensor, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("params: duplicate name '" + name + "'");
  tensor.set_requires_grad(trainable);
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(tensor), trainable});
  return entries_.back().tensor;
}

const Tensor& Params::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("params: no tensor named '" + name + "'");
  return entries_[it->second].tensor;
}

Tensor& Params::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("params: no tensor named '" + name + "'");
  return entries_[it->second].tensor;
}

std::size_t Params::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

std::vector<Scalar> PseudoSequence::row(std::size_t i) const {
  const std::size_t d = matrix.dim(1);
  if (i >= steps()) throw std::out_of_range("pseudo-sequence row out of range");
  auto v = matrix.values();
  return {v.begin() + static_cast<std::ptrdiff_t>(i * d), v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

PseudoSequence to_pseudo_sequence(const Tensor& feature, std::size_t steps) {
  if (feature.ndim() != 1) throw ShapeError("to_pseudo_sequence: expected a 1-D feature, got " + to_string(feature.shape()));
  if (steps == 0 || feature.numel() % steps != 0) {
    throw ShapeError("to_pseudo_sequence: width " + std::to_string(feature.numel()) + " not divisible by " +
                     std::to_string(steps));
  }
  return {ops::reshape(feature, {steps, feature.numel() / steps})};
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  const std::size_t w = c.extractor_width;
  auto linear_params = [&](const std::string& prefix, std::size_t out, std::size_t in, bool bias, bool trainable = true) {
    params_.add(prefix + ".weight", he_uniform(rng, {out, in}, in), trainable);
    if (bias) params_.add(prefix + ".bias", Tensor::zeros({out}), trainable);
  };
  auto norm_params = [&](const std::string& prefix, std::size_t width) {
    params_.add(prefix + ".gamma", Tensor::full({width}, 1.0), true);
    params_.add(prefix + ".beta", Tensor::zeros({width}), true);
  };

  linear_params("extractor.input", w, c.variables, true);
  for (std::size_t b = 0; b < c.extractor_blocks; ++b) {
    const auto p = indexed("extractor.block", b);
    linear_params(p + ".fc1", w, w, true);
    norm_params(p + ".norm", w);
    linear_params(p + ".fc2", w, w, true);
  }
  linear_params("reconstruct", c.map_channels * c.map_height * c.map_width, c.hours * w, true);

  std::size_t in_channels = c.map_channels;
  for (std::size_t s = 0; s < c.tokenizer_stages; ++s) {
    const std::size_t out = s + 1 == c.tokenizer_stages ? c.embed_dim : c.tokenizer_hidden_channels;
    const std::size_t fan_in = in_channels * c.tokenizer_kernel * c.tokenizer_kernel;
    params_.add(indexed("tokenizer.conv", s) + ".weight",
                he_uniform(rng, {out, in_channels, c.tokenizer_kernel, c.tokenizer_kernel}, fan_in),
                !c.freeze_tokenizer);
    in_channels = out;
  }
  const Shape grid = token_grid(c);
  const std::size_t tokens = grid[2] * grid[3];
  const std::size_t e = c.embed_dim;
  params_.add("encoder.pos_embedding", he_uniform(rng, {tokens, e}, e), true);
  for (std::size_t l = 0; l < c.encoder_depth; ++l) {
    const auto p = indexed("encoder.layer", l);
    norm_params(p + ".norm1", e);
    linear_params(p + ".attn.qkv", 3 * e, e, false);
    linear_params(p + ".attn.proj", e, e, true);
    norm_params(p + ".norm2", e);
    linear_params(p + ".mlp.fc1", e * c.mlp_ratio, e, true);
    linear_params(p + ".mlp.fc2", e, e * c.mlp_ratio, true);
  }
  if (c.encoder_depth > 0) norm_params("encoder.norm", e);
  if (c.pooling == PoolingKind::kSequencePool) {
    linear_params("encoder.pool", 1, e, true);
    linear_params("encoder.fc", c.feature_width(), e, true);
  } else {
    linear_params("encoder.fc", c.feature_width(), tokens * e, true);
  }

  if (c.head == HeadKind::kStageAdaptive) {
    std::size_t ch = c.seq_dim;
    for (std::size_t l = 0; l < c.head_layers; ++l) {
      params_.add(indexed("head.conv", l) + ".weight",
                  he_uniform(rng, {c.head_channels, ch, c.head_kernel}, ch * c.head_kernel), true);
      params_.add(indexed("head.conv", l) + ".bias", Tensor::zeros({c.head_channels}), true);
      ch = c.head_channels;
    }
    linear_params("head.gate", c.head_channels, c.seq_dim, true);
    // The classifier starts at exactly p = 0.5 for every sample.
    params_.add("head.out.weight", Tensor::zeros({1, c.head_channels}), true);
    params_.add("head.out.bias", Tensor::zeros({1}), true);
  } else {
    params_.add("head.fc.weight", Tensor::zeros({1, c.feature_width()}), true);
    params_.add("head.fc.bias", Tensor::zeros({1}), true);
  }
}

Tensor Model::residual_block(const Tensor& x, const std::string& prefix) const {
  Tensor h = ops::linear(x, param(prefix + ".fc1.weight"), param(prefix + ".fc1.bias"));
  h = ops::relu(ops::layer_norm(h, param(prefix + ".norm.gamma"), param(prefix + ".norm.beta")));
  h = ops::linear(h, param(prefix + ".fc2.weight"), param(prefix + ".fc2.bias"));
  return ops::add(x, h);
}

Tensor Model::extract_features(const Tensor& x) const {
  const auto& c = config_;
  if (x.ndim() != 3 || x.dim(1) != c.hours || x.dim(2) != c.variables) {
    throw ShapeError("extract_features: expected (B, " + std::to_string(c.hours) + ", " + std::to_string(c.variables) +
                     "), got " + stagecct::to_string(x.shape()));
  }
  Tensor h = ops::linear(x, param("extractor.input.weight"), param("extractor.input.bias"));
  for (std::size_t b = 0; b < c.extractor_blocks; ++b) h = residual_block(h, indexed("extractor.block", b));
  return h;
}

Tensor Model::reconstruct_map(const Tensor& extracted) const {
  const auto& c = config_;
  const std::size_t batch = extracted.dim(0);
  Tensor flat = ops::reshape(extracted, {batch, c.hours * c.extractor_width});
  Tensor m = ops::linear(flat, param("reconstruct.weight"), param("reconstruct.bias"));
  return ops::reshape(m, {batch, c.map_channels, c.map_height, c.map_width});
}

Tensor Model::conv_tokenize(const Tensor& map) const {
  const auto& c = config_;
  Tensor x = map;
  for (std::size_t s = 0; s < c.tokenizer_stages; ++s) {
    x = ops::conv2d(x, param(indexed("tokenizer.conv", s) + ".weight"), std::nullopt,
                    {c.tokenizer_stride, c.tokenizer_padding});
    x = ops::maxpool2d(ops::relu(x), {c.pool_kernel, c.pool_stride, c.pool_padding});
  }
  const std::size_t batch = x.dim(0), e = x.dim(1), n = x.dim(2) * x.dim(3);
  x = ops::permute(ops::reshape(x, {batch, e, n}), {0, 2, 1});
  return ops::add(x, ops::expand(param("encoder.pos_embedding"), {batch, n, e}));
}

Tensor Model::attention_block(const Tensor& x, const std::string& prefix, std::vector<Tensor>* attention) const {
  const auto& c = config_;
  const std::size_t batch = x.dim(0), n = x.dim(1), e = x.dim(2), h = c.heads, dh = e / h;
  Tensor qkv = ops::linear(x, param(prefix + ".qkv.weight"));
  qkv = ops::permute(ops::reshape(qkv, {batch, n, 3, h, dh}), {2, 0, 3, 1, 4});  // (3, B, h, N, dh)
  auto part = [&](std::size_t i) { return ops::reshape(ops::slice(qkv, 0, i, 1), {batch * h, n, dh}); };
  const Tensor q = part(0), k = part(1), v = part(2);
  Tensor scores = ops::mul(ops::matmul(q, ops::permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = ops::softmax(scores);
  if (attention) attention->push_back(weights);
  Tensor out = ops::matmul(weights, v);  // (B*h, N, dh)
  out = ops::reshape(ops::permute(ops::reshape(out, {batch, h, n, dh}), {0, 2, 1, 3}), {batch, n, e});
  return ops::linear(out, param(prefix + ".proj.weight"), param(prefix + ".proj.bias"));
}

Tensor Model::encode(const Tensor& tokens, std::vector<Tensor>* attention) const {
  const auto& c = config_;
  Tensor x = tokens;
  for (std::size_t l = 0; l < c.encoder_depth; ++l) {
    const auto p = indexed("encoder.layer", l);
    Tensor y = ops::layer_norm(x, param(p + ".norm1.gamma"), param(p + ".norm1.beta"));
    x = ops::add(x, attention_block(y, p + ".attn", attention));
    y = ops::layer_norm(x, param(p + ".norm2.gamma"), param(p + ".norm2.beta"));
    y = ops::relu(ops::linear(y, param(p + ".mlp.fc1.weight"), param(p + ".mlp.fc1.bias")));
    x = ops::add(x, ops::linear(y, param(p + ".mlp.fc2.weight"), param(p + ".mlp.fc2.bias")));
  }
  if (c.encoder_depth > 0) x = ops::layer_norm(x, param("encoder.norm.gamma"), param("encoder.norm.beta"));
  const std::size_t batch = x.dim(0), n = x.dim(1), e = x.dim(2);
  Tensor pooled;
  if (c.pooling == PoolingKind::kSequencePool) {
    Tensor logits = ops::linear(x, param("encoder.pool.weight"), param("encoder.pool.bias"));  // (B, N, 1)
    Tensor w = ops::softmax(ops::reshape(logits, {batch, 1, n}));
    pooled = ops::reshape(ops::matmul(w, x), {batch, e});
  } else {
    pooled = ops::reshape(x, {batch, n * e});
  }
  return ops::linear(pooled, param("encoder.fc.weight"), param("encoder.fc.bias"));
}

Tensor Model::pseudo_sequence(const Tensor& feature) const {
  const auto& c = config_;
  if (feature.ndim() != 2 || feature.dim(1) % c.hours != 0) {
    throw ShapeError("pseudo_sequence: feature " + stagecct::to_string(feature.shape()) + " not divisible into " +
                     std::to_string(c.hours) + " steps");
  }
  return ops::reshape(feature, {feature.dim(0), c.hours, feature.dim(1) / c.hours});
}

Tensor Model::head_forward(const Tensor& sequence) const {
  const auto& c = config_;
  if (sequence.ndim() != 3 || sequence.dim(1) != c.hours || sequence.dim(2) != c.seq_dim) {
    throw ShapeError("head_forward: expected (B, " + std::to_string(c.hours) + ", " + std::to_string(c.seq_dim) +
                     "), got " + stagecct::to_string(sequence.shape()));
  }
  const std::size_t batch = sequence.dim(0);
  if (c.head == HeadKind::kFullyConnected) {
    Tensor flat = ops::reshape(sequence, {batch, c.hours * c.seq_dim});
    Tensor logit = ops::linear(flat, param("head.fc.weight"), param("head.fc.bias"));
    return ops::sigmoid(ops::reshape(logit, {batch}));
  }
  // The convolutions read the history p_1..p_{T-1}; z_t enters only through the gate.
  Tensor h = ops::permute(ops::slice(sequence, 1, 0, c.hours - 1), {0, 2, 1});  // (B, d, T-1)
  for (std::size_t l = 0; l < c.head_layers; ++l) {
    const auto p = indexed("head.conv", l);
    h = ops::relu(ops::conv1d(h, param(p + ".weight"), param(p + ".bias"), c.head_kernel - 1, 0));
  }
  Tensor last = ops::reshape(ops::slice(sequence, 1, c.hours - 1, 1), {batch, c.seq_dim});
  Tensor gate = ops::sigmoid(ops::linear(last, param("head.gate.weight"), param("head.gate.bias")));
  gate = ops::expand(ops::reshape(gate, {batch, c.head_channels, 1}), {batch, c.head_channels, c.hours - 1});
  Tensor pooled = ops::max_last(ops::mul(h, gate));  // (B, channels)
  Tensor logit = ops::linear(pooled, param("head.out.weight"), param("head.out.bias"));
  return ops::sigmoid(ops::reshape(logit, {batch}));
}

ForwardResult Model::forward(const Tensor& x, bool keep_attention) const {
  ForwardResult r;
  Tensor tokens = conv_tokenize(reconstruct_map(extract_features(x)));
  r.feature = encode(tokens, keep_attention ? &r.attention : nullptr);
  r.sequence = pseudo_sequence(r.feature);
  r.probability = head_forward(r.sequence);
  return r;
}

ShapeLedger Model::shape_ledger(const ModelConfig& c) {
  c.validate();
  ShapeLedger l;
  l.input = {c.hours, c.variables};
  l.extractor_out = {c.hours, c.extractor_width};
  l.map = {c.map_channels, c.map_height, c.map_width};
  const Shape grid = token_grid(c);
  l.tokens = {grid[2] * grid[3], grid[1]};
  l.feature = {c.feature_width()};
  l.sequence = {c.hours, c.seq_dim};
  l.probability = {};
  return l;
}

Tensor make_batch(const std::vector<const std::vector<double>*>& samples, std::size_t hours, std::size_t width) {
  if (samples.empty()) throw ShapeError("make_batch: empty batch");
  std::vector<Scalar> values;
  values.reserve(samples.size() * hours * width);
  for (const auto* s : samples) {
    if (s->size() != hours * width) {
      throw ShapeError("make_batch: sample has " + std::to_string(s->size()) + " values, expected " +
                       std::to_string(hours * width));
    }
    values.insert(values.end(), s->begin(), s->end());
  }
  return Tensor({samples.size(), hours, width}, std::move(values));
}

}  // namespace stagecct
