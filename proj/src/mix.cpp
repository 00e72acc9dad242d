#include "stagecct/mix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "stagecct/ops.hpp"

namespace stagecct::mix {
namespace {

void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0, 1], got " + std::to_string(v));
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + stagecct::to_string(a.shape()) + " vs " + stagecct::to_string(b.shape()));
  }
}

struct Plane {
  std::size_t count, height, width, block_h, block_w;
};

Plane plane_of(const Shape& shape, std::size_t block) {
  if (shape.empty()) throw ShapeError("block mask: shape must have at least one axis");
  Plane p{1, 1, shape.back(), 1, block};
  if (shape.size() >= 2) {
    p.height = shape[shape.size() - 2];
    p.block_h = block;
    for (std::size_t i = 0; i + 2 < shape.size(); ++i) p.count *= shape[i];
  }
  return p;
}

// Draws Bernoulli(p) bits two at a time from one 64-bit word, comparing each
// 32-bit half against p * 2^32.
class BitSource {
 public:
  BitSource(double p, Rng& rng)
      : threshold_(static_cast<std::uint64_t>(std::ldexp(std::clamp(p, 0.0, 1.0), 32))), rng_(rng) {}

  bool next() {
    if (!have_) {
      word_ = rng_.next();
      have_ = true;
      return (word_ & 0xffffffffULL) < threshold_;
    }
    have_ = false;
    return (word_ >> 32) < threshold_;
  }

 private:
  std::uint64_t threshold_;
  Rng& rng_;
  std::uint64_t word_ = 0;
  bool have_ = false;
};

Tensor constant_like(const Tensor& like, std::vector<Scalar> values) { return Tensor(like.shape(), std::move(values)); }

// a_coef * gi + b_coef * gj with constant per-element coefficients.
Tensor blend(const Tensor& gi, const Tensor& gj, std::vector<Scalar> a_coef, std::vector<Scalar> b_coef) {
  return ops::add(ops::mul(constant_like(gi, std::move(a_coef)), gi), ops::mul(constant_like(gj, std::move(b_coef)), gj));
}

std::vector<Scalar> mask_values(const Tensor& mask) {
  std::vector<Scalar> m(mask.values().begin(), mask.values().end());
  for (double v : m) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("patchup: mask entries must be 0 or 1");
  }
  return m;
}

Tensor bce(const Tensor& p, const std::vector<double>& target) {
  for (double t : target) check_unit(t, "bce target");
  const Tensor t(p.shape(), target);
  std::vector<Scalar> one_minus(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) one_minus[i] = 1.0 - target[i];
  const Tensor u(p.shape(), std::move(one_minus));
  const Tensor pos = ops::mul(t, ops::log(p));
  const Tensor neg = ops::mul(u, ops::log(ops::add(ops::mul(p, -1.0), 1.0)));
  return ops::mul(ops::add(pos, neg), -1.0);
}

}  // namespace

const char* to_string(MixMode mode) {
  switch (mode) {
    case MixMode::kHard: return "hard";
    case MixMode::kSoft: return "soft";
    case MixMode::kManifold: return "manifold";
  }
  return "?";
}

MixMode mode_from_string(const std::string& s) {
  if (s == "hard") return MixMode::kHard;
  if (s == "soft") return MixMode::kSoft;
  if (s == "manifold") return MixMode::kManifold;
  throw std::invalid_argument("unknown mix mode '" + s + "'");
}

void PatchUpConfig::validate() const {
  check_unit(patchup_prob, "patchup_prob");
  check_unit(gamma, "gamma");
  if (block_size == 0 || block_size % 2 == 0) throw std::invalid_argument("block_size must be an odd positive integer");
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (sites.empty()) throw std::invalid_argument("at least one mixing site is required");
  for (const auto& s : sites) {
    if (s != "pseudo_sequence") throw std::invalid_argument("unsupported mixing site '" + s + "'");
  }
}

nlohmann::json PatchUpConfig::to_json() const {
  return {{"patchup_prob", patchup_prob}, {"gamma", gamma}, {"block_size", block_size},
          {"mode", to_string(mode)},       {"alpha", alpha}, {"sites", sites}};
}

PatchUpConfig PatchUpConfig::from_json(const nlohmann::json& j) {
  PatchUpConfig c;
  c.patchup_prob = j.value("patchup_prob", c.patchup_prob);
  c.gamma = j.value("gamma", c.gamma);
  c.block_size = j.value("block_size", c.block_size);
  if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
  c.alpha = j.value("alpha", c.alpha);
  c.sites = j.value("sites", c.sites);
  c.validate();
  return c;
}

Tensor BlockMask::tensor() const { return Tensor(shape, std::vector<Scalar>(keep.begin(), keep.end())); }

double unaltered_fraction(const std::vector<std::uint8_t>& keep) {
  if (keep.empty()) throw std::invalid_argument("empty mask");
  std::size_t ones = 0;
  for (auto k : keep) ones += k;
  return static_cast<double>(ones) / static_cast<double>(keep.size());
}

double adjusted_gamma(double gamma, std::size_t block_h, std::size_t block_w, std::size_t height, std::size_t width) {
  if (block_h > height || block_w > width) throw ShapeError("block mask: block larger than the tensor");
  if (block_h == 1 && block_w == 1) return gamma;
  const double num = gamma * static_cast<double>(height * width);
  const double den = static_cast<double>(block_h * block_w * (height - block_h + 1) * (width - block_w + 1));
  return std::min(1.0, num / den);
}

BlockMask sample_block_mask(const Shape& shape, double gamma, std::size_t block_size, Rng& rng) {
  check_unit(gamma, "gamma");
  if (block_size == 0 || block_size % 2 == 0) throw std::invalid_argument("block_size must be an odd positive integer");
  const Plane p = plane_of(shape, block_size);
  if (p.block_h > p.height || p.block_w > p.width) {
    throw ShapeError("block mask: block " + std::to_string(block_size) + " larger than plane " + stagecct::to_string(shape));
  }
  BlockMask m;
  m.shape = shape;
  m.keep.assign(p.count * p.height * p.width, 1);
  BitSource bits(adjusted_gamma(gamma, p.block_h, p.block_w, p.height, p.width), rng);
  if (p.block_h == 1 && p.block_w == 1) {
    for (auto& k : m.keep) k = bits.next() ? 0 : 1;
  } else {
    const std::size_t rows = p.height - p.block_h + 1, cols = p.width - p.block_w + 1;
    for (std::size_t n = 0; n < p.count; ++n) {
      std::uint8_t* plane = m.keep.data() + n * p.height * p.width;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          if (!bits.next()) continue;
          for (std::size_t dr = 0; dr < p.block_h; ++dr) {
            std::fill_n(plane + (r + dr) * p.width + c, p.block_w, std::uint8_t{0});
          }
        }
      }
    }
  }
  m.pu = unaltered_fraction(m.keep);
  return m;
}

BlockMask sample_block_mask(const Shape& shape, const PatchUpConfig& cfg, Rng& rng) {
  return sample_block_mask(shape, cfg.gamma, cfg.block_size, rng);
}

bool zeros_are_block_union(const BlockMask& mask, std::size_t block_size) {
  const Plane p = plane_of(mask.shape, block_size);
  if (p.block_h > p.height || p.block_w > p.width) return false;
  const std::size_t rows = p.height - p.block_h + 1, cols = p.width - p.block_w + 1;
  for (std::size_t n = 0; n < p.count; ++n) {
    const std::uint8_t* plane = mask.keep.data() + n * p.height * p.width;
    // Summed-area table of ones so each window is tested in O(1).
    std::vector<std::size_t> sat((p.height + 1) * (p.width + 1), 0);
    for (std::size_t r = 0; r < p.height; ++r) {
      for (std::size_t c = 0; c < p.width; ++c) {
        sat[(r + 1) * (p.width + 1) + c + 1] = plane[r * p.width + c] + sat[r * (p.width + 1) + c + 1] +
                                               sat[(r + 1) * (p.width + 1) + c] - sat[r * (p.width + 1) + c];
      }
    }
    std::vector<std::uint8_t> covered(p.height * p.width, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t r2 = r + p.block_h, c2 = c + p.block_w;
        const std::size_t ones = sat[r2 * (p.width + 1) + c2] - sat[r * (p.width + 1) + c2] -
                                 sat[r2 * (p.width + 1) + c] + sat[r * (p.width + 1) + c];
        if (ones != 0) continue;
        for (std::size_t dr = 0; dr < p.block_h; ++dr) {
          std::fill_n(covered.data() + (r + dr) * p.width + c, p.block_w, std::uint8_t{1});
        }
      }
    }
    for (std::size_t i = 0; i < covered.size(); ++i) {
      if (plane[i] == 0 && !covered[i]) return false;
    }
  }
  return true;
}

double mix_lambda(double a, double b, double lambda) {
  check_unit(lambda, "lambda");
  return lambda * a + (1.0 - lambda) * b;
}

Tensor mix_lambda(const Tensor& a, const Tensor& b, double lambda) {
  check_same(a, b, "mix_lambda");
  check_unit(lambda, "lambda");
  return ops::add(ops::mul(a, lambda), ops::mul(b, 1.0 - lambda));
}

Tensor patchup_hard(const Tensor& gi, const Tensor& gj, const Tensor& mask) {
  check_same(gi, gj, "patchup_hard");
  check_same(gi, mask, "patchup_hard");
  std::vector<Scalar> a = mask_values(mask), b(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) b[k] = 1.0 - a[k];
  return blend(gi, gj, std::move(a), std::move(b));
}

Tensor patchup_soft(const Tensor& gi, const Tensor& gj, const Tensor& mask, double lambda) {
  check_same(gi, gj, "patchup_soft");
  check_same(gi, mask, "patchup_soft");
  check_unit(lambda, "lambda");
  // Kept entries take g_i; altered entries take lambda * g_i + (1 - lambda) * g_j.
  std::vector<Scalar> a = mask_values(mask), b(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    const bool keep = a[k] == 1.0;
    a[k] = keep ? 1.0 : lambda;
    b[k] = keep ? 0.0 : 1.0 - lambda;
  }
  return blend(gi, gj, std::move(a), std::move(b));
}

Tensor manifold_mixup(const Tensor& gi, const Tensor& gj, double lambda) {
  check_same(gi, gj, "manifold_mixup");
  check_unit(lambda, "lambda");
  return blend(gi, gj, std::vector<Scalar>(gi.numel(), lambda), std::vector<Scalar>(gi.numel(), 1.0 - lambda));
}

Targets reweighted_target(double yi, double yj, double pu, double lambda, MixMode mode) {
  check_unit(yi, "y_i");
  check_unit(yj, "y_j");
  check_unit(pu, "pu");
  check_unit(lambda, "lambda");
  switch (mode) {
    case MixMode::kHard: return {mix_lambda(yi, yj, pu), yj};
    case MixMode::kSoft: {
      const double y = mix_lambda(yi, yj, lambda);
      return {mix_lambda(yi, y, pu), y};
    }
    case MixMode::kManifold: {
      const double y = mix_lambda(yi, yj, lambda);
      return {y, y};
    }
  }
  throw std::invalid_argument("unknown mix mode");
}

Tensor patchup_loss(const Tensor& pred, const std::vector<double>& yi, const std::vector<double>& y_mixed, double pu) {
  if (pred.ndim() != 1) throw ShapeError("patchup_loss: predictions must be 1-D, got " + stagecct::to_string(pred.shape()));
  if (yi.size() != pred.numel() || y_mixed.size() != pred.numel()) {
    throw ShapeError("patchup_loss: target count does not match the batch");
  }
  check_unit(pu, "pu");
  const Tensor p = ops::clamp(pred, 1e-7, 1.0 - 1e-7);
  const Tensor per = ops::add(ops::mul(bce(p, yi), pu), ops::mul(bce(p, y_mixed), 1.0 - pu));
  return ops::mean(per);
}

MixOutcome apply_mix(const Tensor& activation, const std::vector<double>& labels, const PatchUpConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t batch = activation.dim(0);
  if (labels.size() != batch) throw ShapeError("apply_mix: one label per sample is required");
  MixOutcome out;
  out.mode = cfg.mode;
  out.mixed = activation;
  out.partner.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) out.partner[i] = i;
  out.w = out.y = labels;
  if (!(rng.uniform() < cfg.patchup_prob)) return out;

  out.applied = true;
  out.lambda = rng.beta(cfg.alpha, cfg.alpha);
  out.partner = rng.permutation(batch);
  if (cfg.mode == MixMode::kManifold) {
    out.mask.shape = activation.shape();
    out.mask.keep.assign(activation.numel(), 0);
    out.mask.pu = 0.0;
  } else {
    out.mask = sample_block_mask(activation.shape(), cfg, rng);
  }
  out.mixed = replay_mix(activation, out);
  out.pu = out.mask.pu;
  for (std::size_t i = 0; i < batch; ++i) {
    const auto t = reweighted_target(labels[i], labels[out.partner[i]], out.pu, out.lambda, cfg.mode);
    out.w[i] = t.w;
    out.y[i] = t.y;
  }
  return out;
}

Tensor replay_mix(const Tensor& activation, const MixOutcome& outcome) {
  if (!outcome.applied) return activation;
  if (activation.shape() != outcome.mask.shape) throw ShapeError("replay_mix: activation does not match the mask");
  const Tensor partner = ops::gather(activation, outcome.partner);
  switch (outcome.mode) {
    case MixMode::kHard: return patchup_hard(activation, partner, outcome.mask.tensor());
    case MixMode::kSoft: return patchup_soft(activation, partner, outcome.mask.tensor(), outcome.lambda);
    case MixMode::kManifold: return manifold_mixup(activation, partner, outcome.lambda);
  }
  throw std::invalid_argument("unknown mix mode");
}

}  // namespace stagecct::mix
