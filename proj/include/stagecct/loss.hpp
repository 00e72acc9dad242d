#pragma once

#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagecct/tensor.hpp"

namespace stagecct::loss {

// Returns x when 0.25 <= exp(x) <= 0.75, else 0. The band is tested on x
// against log(0.25) and log(0.75) so that clip(log 0.25) keeps its boundary.
Scalar clip(Scalar x);
bool in_clip_band(Scalar log_value);

// -1/N sum[y clip(log p) + (1 - y) clip(log(1 - p))], p clamped to
// [1e-7, 1 - 1e-7]. Confidently wrong samples fall outside the band too and
// contribute nothing. The band indicator is constant under differentiation.
Tensor clip_bce(const Tensor& probability, const std::vector<double>& labels);

class ClassCenters {
 public:
  ClassCenters() = default;
  ClassCenters(std::size_t width, std::size_t warmup_iters = 100);

  // features: (B, width) values, row-major.
  void update(std::span<const Scalar> features, const std::vector<double>& labels, std::size_t iteration);

  std::size_t width() const { return width_; }
  std::size_t warmup_iters() const { return warmup_; }
  const std::vector<Scalar>& center(int cls) const { return cls == 0 ? m0_ : m1_; }
  std::size_t count(int cls) const { return cls == 0 ? n0_ : n1_; }

 private:
  std::size_t width_ = 0, warmup_ = 100;
  std::vector<Scalar> m0_, m1_;
  // Post-warmup running sums; the centers are sum / count.
  std::vector<Scalar> s0_, s1_;
  std::size_t n0_ = 0, n1_ = 0;
};

// Per-row min-max normalization of a (B, width) gradient; constant rows map
// to zeros.
std::vector<Scalar> attention_from_gradient(std::span<const Scalar> raw, std::size_t width);

// (1/N) sum_i sum(|f_i - m_{y_i}| * G_i). Centers and G are constants.
Tensor cc_loss(const Tensor& feature, const std::vector<double>& labels, const ClassCenters& centers,
               const std::vector<Scalar>& attention);

struct LossBreakdown {
  double clip_bce = 0, patchup = 0, cc = 0, total = 0;

  nlohmann::json to_json() const;
  bool operator==(const LossBreakdown&) const = default;
};

// Unweighted sum; throws NumericError when any part is non-finite.
LossBreakdown total_loss(double clip_bce, double patchup, double cc);

}  // namespace stagecct::loss
