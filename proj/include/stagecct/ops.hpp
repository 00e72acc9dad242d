#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "stagecct/tensor.hpp"

// Differentiable forward ops. Each op validates shapes, rejects non-finite
// inputs, and appends a tape record when a tape is active and any input
// requires gradients. Broadcasting is limited to tensor-with-Scalar; every
// other shape change goes through reshape/permute/expand explicitly.
namespace stagecct::ops {

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct Pool2dAttrs {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

// Shape rules, shared with the symbolic shape ledger.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad_total);
Shape conv2d_shape(const Shape& input, const Shape& weight, const Conv2dAttrs& attrs);
Shape maxpool2d_shape(const Shape& input, const Pool2dAttrs& attrs);
Shape conv1d_shape(const Shape& input, const Shape& weight, std::size_t pad_left, std::size_t pad_right);

// Element-wise.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);  // subgradient 0 at the kink
Tensor clamp(const Tensor& x, Scalar lo, Scalar hi);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, Scalar s);
Tensor mul(const Tensor& a, Scalar s);

// x: (..., in), weight: (out, in), bias: (out) -> (..., out)
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt);
// (m, k) x (k, n) or batched (b, m, k) x (b, k, n).
Tensor matmul(const Tensor& a, const Tensor& b);

// x: (B, C, H, W), weight: (O, C, kh, kw), bias: (O). Cross-correlation, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias, const Conv2dAttrs& attrs);
// Padding never wins the max; ties route to the first maximal element.
Tensor maxpool2d(const Tensor& x, const Pool2dAttrs& attrs);
// x: (B, C, L), weight: (O, C, k), bias: (O). Asymmetric zero padding.
Tensor conv1d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias, std::size_t pad_left,
              std::size_t pad_right);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Rows of x along axis 0, in the given order (repeats allowed).
Tensor gather(const Tensor& x, std::span<const std::size_t> indices);
// Trailing-aligned broadcast where x's extents are 1 or equal to the target's.
Tensor expand(const Tensor& x, const Shape& shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Maximum over the last axis; ties route to the first maximal element.
Tensor max_last(const Tensor& x);
// Softmax over the last axis.
Tensor softmax(const Tensor& x);
// Normalizes over the last axis; gamma and beta have the last axis' extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);

}  // namespace stagecct::ops
