#include "stagecct/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "stagecct/ops.hpp"

namespace stagecct::loss {
namespace {

const Scalar kLogLow = std::log(0.25);
const Scalar kLogHigh = std::log(0.75);

void check_labels(const std::vector<double>& labels, std::size_t n, const char* op) {
  if (labels.size() != n) throw ShapeError(std::string(op) + ": one label per sample is required");
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument(std::string(op) + ": labels must be 0 or 1");
  }
}

}  // namespace

bool in_clip_band(Scalar log_value) { return log_value >= kLogLow && log_value <= kLogHigh; }

Scalar clip(Scalar x) { return in_clip_band(x) ? x : 0.0; }

Tensor clip_bce(const Tensor& probability, const std::vector<double>& labels) {
  if (probability.ndim() != 1) throw ShapeError("clip_bce: probabilities must be 1-D");
  const std::size_t n = probability.numel();
  if (n == 0) throw ShapeError("clip_bce: empty batch");
  check_labels(labels, n, "clip_bce");
  const Tensor p = ops::clamp(probability, 1e-7, 1.0 - 1e-7);
  const Tensor log_p = ops::log(p);
  const Tensor log_q = ops::log(ops::add(ops::mul(p, -1.0), 1.0));
  std::vector<Scalar> wp(n), wq(n);
  for (std::size_t i = 0; i < n; ++i) {
    wp[i] = labels[i] == 1.0 && in_clip_band(log_p.at(i)) ? 1.0 : 0.0;
    wq[i] = labels[i] == 0.0 && in_clip_band(log_q.at(i)) ? 1.0 : 0.0;
    if (auto* trace = BranchTrace::active()) trace->note(static_cast<std::uint64_t>(2 * wp[i] + wq[i]));
  }
  const Tensor terms = ops::add(ops::mul(Tensor({n}, std::move(wp)), log_p), ops::mul(Tensor({n}, std::move(wq)), log_q));
  return ops::mul(ops::mean(terms), -1.0);
}

ClassCenters::ClassCenters(std::size_t width, std::size_t warmup_iters)
    : width_(width), warmup_(warmup_iters), m0_(width, 0.0), m1_(width, 0.0), s0_(width, 0.0), s1_(width, 0.0) {}

void ClassCenters::update(std::span<const Scalar> features, const std::vector<double>& labels, std::size_t iteration) {
  if (width_ == 0 || features.size() != labels.size() * width_) {
    throw ShapeError("update_centers: features do not match labels x width");
  }
  check_labels(labels, labels.size(), "update_centers");
  std::vector<Scalar> sum0(width_, 0.0), sum1(width_, 0.0);
  std::size_t k0 = 0, k1 = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& sum = labels[i] == 1.0 ? sum1 : sum0;
    (labels[i] == 1.0 ? k1 : k0) += 1;
    for (std::size_t j = 0; j < width_; ++j) sum[j] += features[i * width_ + j];
  }
  if (iteration < warmup_) {
    std::fill(m0_.begin(), m0_.end(), 0.0);
    std::fill(m1_.begin(), m1_.end(), 0.0);
    for (std::size_t j = 0; j < width_; ++j) {
      if (k0) m0_[j] = sum0[j] / static_cast<double>(k0);
      if (k1) m1_[j] = sum1[j] / static_cast<double>(k1);
    }
    return;
  }
  n0_ += k0;
  n1_ += k1;
  for (std::size_t j = 0; j < width_; ++j) {
    s0_[j] += sum0[j];
    s1_[j] += sum1[j];
    if (n0_) m0_[j] = s0_[j] / static_cast<double>(n0_);
    if (n1_) m1_[j] = s1_[j] / static_cast<double>(n1_);
  }
}

std::vector<Scalar> attention_from_gradient(std::span<const Scalar> raw, std::size_t width) {
  if (width == 0 || raw.size() % width != 0) throw ShapeError("attention_from_gradient: gradient is not (B, width)");
  std::vector<Scalar> g(raw.begin(), raw.end());
  for (std::size_t row = 0; row < raw.size() / width; ++row) {
    auto first = g.begin() + static_cast<std::ptrdiff_t>(row * width);
    auto last = first + static_cast<std::ptrdiff_t>(width);
    const auto [lo, hi] = std::minmax_element(first, last);
    const Scalar min = *lo, range = *hi - *lo;
    for (auto it = first; it != last; ++it) *it = range > 0 ? (*it - min) / range : 0.0;
  }
  return g;
}

Tensor cc_loss(const Tensor& feature, const std::vector<double>& labels, const ClassCenters& centers,
               const std::vector<Scalar>& attention) {
  if (feature.ndim() != 2 || feature.dim(1) != centers.width()) {
    throw ShapeError("cc_loss: feature " + to_string(feature.shape()) + " does not match center width " +
                     std::to_string(centers.width()));
  }
  const std::size_t n = feature.dim(0), w = feature.dim(1);
  check_labels(labels, n, "cc_loss");
  if (attention.size() != feature.numel()) throw ShapeError("cc_loss: attention does not match the feature");
  std::vector<Scalar> target(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = centers.center(labels[i] == 1.0 ? 1 : 0);
    std::copy(m.begin(), m.end(), target.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  const Tensor dist = ops::abs(ops::sub(feature, Tensor(feature.shape(), std::move(target))));
  return ops::mul(ops::sum(ops::mul(dist, Tensor(feature.shape(), attention))), 1.0 / static_cast<double>(n));
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"clip_bce", clip_bce}, {"patchup", patchup}, {"cc", cc}, {"total", total}};
}

LossBreakdown total_loss(double clip_bce, double patchup, double cc) {
  if (!std::isfinite(clip_bce) || !std::isfinite(patchup) || !std::isfinite(cc)) {
    throw NumericError("total_loss: non-finite part (clip_bce=" + std::to_string(clip_bce) +
                       ", patchup=" + std::to_string(patchup) + ", cc=" + std::to_string(cc) + ")");
  }
  return {clip_bce, patchup, cc, clip_bce + patchup + cc};
}

}  // namespace stagecct::loss
