#include "stagecct/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

namespace stagecct::ops {
namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

ConstMatMap cmat(const Scalar* data, std::size_t rows, std::size_t cols) {
  return ConstMatMap(data, static_cast<Index>(rows), static_cast<Index>(cols));
}
MatMap mat(Scalar* data, std::size_t rows, std::size_t cols) {
  return MatMap(data, static_cast<Index>(rows), static_cast<Index>(cols));
}

[[noreturn]] void shape_error(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

void require_ndim(OpKind kind, const Tensor& t, std::size_t n, const char* name) {
  if (t.ndim() != n) {
    shape_error(kind, std::string(name) + " must be " + std::to_string(n) + "-D, got " + to_string(t.shape()));
  }
}

void require_same_shape(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(kind, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void check_finite(OpKind kind, const Tensor& t) {
  for (auto v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op_name(kind)) + ": non-finite input value");
  }
}

void check_finite(OpKind kind, std::initializer_list<const Tensor*> ts) {
  for (const auto* t : ts) check_finite(kind, *t);
}

bool wants_record(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

bool wants_record(const std::vector<Tensor>& inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void push(OpKind kind, std::vector<Tensor> inputs, const Tensor& out, std::function<void(OpRecord&)> backward) {
  active_tape()->append(OpRecord{kind, std::move(inputs), out, std::move(backward)});
}

template <class Fwd, class Dx>
Tensor unary(OpKind kind, const Tensor& x, Fwd fwd, Dx dydx) {
  check_finite(kind, x);
  Buffer out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Tensor y = Tensor::adopt(x.shape(), std::move(out));
  if (wants_record({&x})) {
    push(kind, {x}, y, [dydx](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      auto gy = r.output.grad_buffer();
      auto gx = in.grad_buffer();
      auto xv = in.values();
      auto yv = r.output.values();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dydx(xv[i], yv[i]);
    });
  }
  return y;
}

Scalar stable_sigmoid(Scalar v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (1.0 + e);
}

// Maps each output flat index to the input flat index it reads from.
Tensor gather_by_map(OpKind kind, const Tensor& x, Shape shape, std::shared_ptr<const std::vector<std::size_t>> map) {
  Buffer out(map->size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*map)[i]];
  Tensor y = Tensor::adopt(std::move(shape), std::move(out));
  if (wants_record({&x})) {
    push(kind, {x}, y, [map](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      auto gy = r.output.grad_buffer();
      auto gx = in.grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[(*map)[i]] += gy[i];
    });
  }
  return y;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

struct ConvGeometry {
  std::size_t channels, in_h, in_w, kh, kw, stride, pad_top, pad_left, out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols: (C*kh*kw, out_h*out_w)
void im2col(const Scalar* img, const ConvGeometry& g, Scalar* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        Scalar* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                ix < static_cast<std::ptrdiff_t>(g.in_w);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* img) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const Scalar* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

// Shared by conv2d and conv1d: x is (B, C, H, W) in memory, weight (O, C*kh*kw).
Tensor conv_generic(OpKind kind, const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
                    const ConvGeometry& g, std::size_t batch, std::size_t out_channels, Shape out_shape) {
  const std::size_t in_stride = g.channels * g.in_h * g.in_w;
  const std::size_t out_stride = out_channels * g.positions();
  Buffer out(batch * out_stride);
  Buffer cols(g.patch() * g.positions());
  auto w = cmat(weight.values().data(), out_channels, g.patch());
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.values().data() + b * in_stride, g, cols.data());
    auto o = mat(out.data() + b * out_stride, out_channels, g.positions());
    o.noalias() = w * cmat(cols.data(), g.patch(), g.positions());
    if (bias) {
      auto bv = bias->values();
      for (std::size_t oc = 0; oc < out_channels; ++oc) o.row(static_cast<Index>(oc)).array() += bv[oc];
    }
  }
  Tensor y = Tensor::adopt(std::move(out_shape), std::move(out));
  const Tensor bias_t = bias ? *bias : Tensor();
  if (wants_record({&x, &weight, &bias_t})) {
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    push(kind, std::move(inputs), y, [g, batch, out_channels, in_stride, out_stride](OpRecord& r) {
      auto& in = r.inputs[0];
      auto& wt = r.inputs[1];
      auto gy = r.output.grad_buffer();
      Buffer cols(g.patch() * g.positions());
      Buffer dcols(cols.size());
      auto w = cmat(wt.values().data(), out_channels, g.patch());
      for (std::size_t b = 0; b < batch; ++b) {
        auto go = cmat(gy.data() + b * out_stride, out_channels, g.positions());
        if (wt.requires_grad()) {
          im2col(in.values().data() + b * in_stride, g, cols.data());
          auto gw = mat(wt.grad_buffer().data(), out_channels, g.patch());
          gw.noalias() += go * cmat(cols.data(), g.patch(), g.positions()).transpose();
        }
        if (in.requires_grad()) {
          auto dc = mat(dcols.data(), g.patch(), g.positions());
          dc.noalias() = w.transpose() * go;
          col2im_add(dcols.data(), g, in.grad_buffer().data() + b * in_stride);
        }
        if (r.inputs.size() > 2 && r.inputs[2].requires_grad()) {
          auto gb = r.inputs[2].grad_buffer();
          // Plain loop: Eigen's vectorized sum peels by address alignment.
          const Scalar* row = gy.data() + b * out_stride;
          for (std::size_t oc = 0; oc < out_channels; ++oc, row += g.positions()) {
            Scalar s = 0;
            for (std::size_t k = 0; k < g.positions(); ++k) s += row[k];
            gb[oc] += s;
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad_total) {
  if (stride == 0 || kernel == 0) throw ShapeError("conv: stride and kernel must be positive");
  if (in + pad_total < kernel) {
    throw ShapeError("conv: input extent " + std::to_string(in) + " (+" + std::to_string(pad_total) +
                     " padding) smaller than kernel " + std::to_string(kernel));
  }
  return (in + pad_total - kernel) / stride + 1;
}

Shape conv2d_shape(const Shape& input, const Shape& weight, const Conv2dAttrs& attrs) {
  if (input.size() != 4 || weight.size() != 4) {
    throw ShapeError("conv2d: expected 4-D input and weight, got " + to_string(input) + " and " + to_string(weight));
  }
  if (input[1] != weight[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(input[1]) + " != weight channels " +
                     std::to_string(weight[1]));
  }
  return {input[0], weight[0], conv_out_extent(input[2], weight[2], attrs.stride, 2 * attrs.padding),
          conv_out_extent(input[3], weight[3], attrs.stride, 2 * attrs.padding)};
}

Shape maxpool2d_shape(const Shape& input, const Pool2dAttrs& attrs) {
  if (input.size() != 4) throw ShapeError("maxpool2d: expected 4-D input, got " + to_string(input));
  if (attrs.padding * 2 > attrs.kernel) throw ShapeError("maxpool2d: padding exceeds half the kernel");
  return {input[0], input[1], conv_out_extent(input[2], attrs.kernel, attrs.stride, 2 * attrs.padding),
          conv_out_extent(input[3], attrs.kernel, attrs.stride, 2 * attrs.padding)};
}

Shape conv1d_shape(const Shape& input, const Shape& weight, std::size_t pad_left, std::size_t pad_right) {
  if (input.size() != 3 || weight.size() != 3) {
    throw ShapeError("conv1d: expected 3-D input and weight, got " + to_string(input) + " and " + to_string(weight));
  }
  if (input[1] != weight[1]) {
    throw ShapeError("conv1d: input channels " + std::to_string(input[1]) + " != weight channels " +
                     std::to_string(weight[1]));
  }
  return {input[0], weight[0], conv_out_extent(input[2], weight[2], 1, pad_left + pad_right)};
}

// Records which linear piece each element of a piecewise op falls on.
template <class Piece>
void trace_pieces(const Tensor& x, Piece piece) {
  if (auto* trace = BranchTrace::active()) {
    for (auto v : x.values()) trace->note(piece(v));
  }
}

Tensor relu(const Tensor& x) {
  trace_pieces(x, [](Scalar v) { return v > 0 ? 1u : 0u; });
  return unary(
      OpKind::kRelu, x, [](Scalar v) { return v > 0 ? v : 0.0; },
      [](Scalar v, Scalar) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(OpKind::kSigmoid, x, stable_sigmoid, [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  for (auto v : x.values()) {
    if (!(v > 0)) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      OpKind::kLog, x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  trace_pieces(x, [](Scalar v) { return v > 0 ? 2u : (v < 0 ? 0u : 1u); });
  return unary(
      OpKind::kAbs, x, [](Scalar v) { return std::abs(v); },
      [](Scalar v, Scalar) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, Scalar lo, Scalar hi) {
  if (!(lo <= hi)) throw ShapeError("clamp: lo > hi");
  trace_pieces(x, [lo, hi](Scalar v) { return v < lo ? 0u : (v > hi ? 2u : 1u); });
  return unary(
      OpKind::kClamp, x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v, Scalar) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

namespace {
template <class F>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, Scalar da_sign, Scalar db_sign, bool product) {
  require_same_shape(kind, a, b);
  check_finite(kind, {&a, &b});
  Buffer out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  Tensor y = Tensor::adopt(a.shape(), std::move(out));
  if (wants_record({&a, &b})) {
    push(kind, {a, b}, y, [da_sign, db_sign, product](OpRecord& r) {
      auto gy = r.output.grad_buffer();
      auto& ta = r.inputs[0];
      auto& tb = r.inputs[1];
      if (ta.requires_grad()) {
        auto ga = ta.grad_buffer();
        auto bv = tb.values();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += product ? gy[i] * bv[i] : da_sign * gy[i];
      }
      if (tb.requires_grad()) {
        auto gb = tb.grad_buffer();
        auto av = ta.values();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += product ? gy[i] * av[i] : db_sign * gy[i];
      }
    });
  }
  return y;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(OpKind::kAdd, a, b, [](Scalar x, Scalar y) { return x + y; }, 1.0, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(OpKind::kSub, a, b, [](Scalar x, Scalar y) { return x - y; }, 1.0, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(OpKind::kMul, a, b, [](Scalar x, Scalar y) { return x * y; }, 0.0, 0.0, true);
}

Tensor add(const Tensor& a, Scalar s) {
  if (!std::isfinite(s)) throw NumericError("add_scalar: non-finite scalar");
  return unary(
      OpKind::kAddScalar, a, [s](Scalar v) { return v + s; }, [](Scalar, Scalar) { return 1.0; });
}

Tensor mul(const Tensor& a, Scalar s) {
  if (!std::isfinite(s)) throw NumericError("mul_scalar: non-finite scalar");
  return unary(
      OpKind::kMulScalar, a, [s](Scalar v) { return v * s; }, [s](Scalar, Scalar) { return s; });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  constexpr auto kind = OpKind::kLinear;
  require_ndim(kind, weight, 2, "weight");
  if (x.ndim() == 0) shape_error(kind, "input must have at least one axis");
  const std::size_t in = weight.dim(1);
  const std::size_t out_features = weight.dim(0);
  if (x.shape().back() != in) {
    shape_error(kind, "input last axis " + std::to_string(x.shape().back()) + " != weight in-features " +
                          std::to_string(in));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != out_features)) {
    shape_error(kind, "bias shape " + to_string(bias->shape()) + " != (" + std::to_string(out_features) + ")");
  }
  check_finite(kind, {&x, &weight});
  if (bias) check_finite(kind, *bias);
  const std::size_t rows = x.numel() / in;
  Buffer out(rows * out_features);
  auto ym = mat(out.data(), rows, out_features);
  ym.noalias() = cmat(x.values().data(), rows, in) * cmat(weight.values().data(), out_features, in).transpose();
  if (bias) {
    auto bv = bias->values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < out_features; ++c) out[r * out_features + c] += bv[c];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_features;
  Tensor y = Tensor::adopt(std::move(shape), std::move(out));
  const Tensor bias_t = bias ? *bias : Tensor();
  if (wants_record({&x, &weight, &bias_t})) {
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    push(kind, std::move(inputs), y, [rows, in, out_features](OpRecord& r) {
      auto gy = cmat(r.output.grad_buffer().data(), rows, out_features);
      auto& tx = r.inputs[0];
      auto& tw = r.inputs[1];
      if (tx.requires_grad()) {
        mat(tx.grad_buffer().data(), rows, in).noalias() += gy * cmat(tw.values().data(), out_features, in);
      }
      if (tw.requires_grad()) {
        mat(tw.grad_buffer().data(), out_features, in).noalias() += gy.transpose() * cmat(tx.values().data(), rows, in);
      }
      if (r.inputs.size() > 2 && r.inputs[2].requires_grad()) {
        auto gb = r.inputs[2].grad_buffer();
        for (std::size_t row = 0; row < rows; ++row) {
          for (std::size_t c = 0; c < out_features; ++c) gb[c] += gy(static_cast<Index>(row), static_cast<Index>(c));
        }
      }
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr auto kind = OpKind::kMatMul;
  if (a.ndim() != b.ndim() || (a.ndim() != 2 && a.ndim() != 3)) {
    shape_error(kind, "expected matching 2-D or 3-D operands, got " + to_string(a.shape()) + " and " +
                          to_string(b.shape()));
  }
  const bool batched = a.ndim() == 3;
  const std::size_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) shape_error(kind, "batch mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t m = a.shape()[a.ndim() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t n = b.shape().back();
  if (b.shape()[b.ndim() - 2] != k) {
    shape_error(kind, "inner dims differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  check_finite(kind, {&a, &b});
  Buffer out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    mat(out.data() + i * m * n, m, n).noalias() =
        cmat(a.values().data() + i * m * k, m, k) * cmat(b.values().data() + i * k * n, k, n);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor y = Tensor::adopt(std::move(shape), std::move(out));
  if (wants_record({&a, &b})) {
    push(kind, {a, b}, y, [batch, m, k, n](OpRecord& r) {
      auto gy = r.output.grad_buffer();
      auto& ta = r.inputs[0];
      auto& tb = r.inputs[1];
      for (std::size_t i = 0; i < batch; ++i) {
        auto go = cmat(gy.data() + i * m * n, m, n);
        if (ta.requires_grad()) {
          mat(ta.grad_buffer().data() + i * m * k, m, k).noalias() +=
              go * cmat(tb.values().data() + i * k * n, k, n).transpose();
        }
        if (tb.requires_grad()) {
          mat(tb.grad_buffer().data() + i * k * n, k, n).noalias() +=
              cmat(ta.values().data() + i * m * k, m, k).transpose() * go;
        }
      }
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias, const Conv2dAttrs& attrs) {
  constexpr auto kind = OpKind::kConv2d;
  if (attrs.stride == 0) shape_error(kind, "stride must be positive");
  Shape out_shape = conv2d_shape(x.shape(), weight.shape(), attrs);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != weight.dim(0))) shape_error(kind, "bias shape " + to_string(bias->shape()));
  check_finite(kind, {&x, &weight});
  if (bias) check_finite(kind, *bias);
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), attrs.stride, attrs.padding,
                 attrs.padding, out_shape[2], out_shape[3]};
  return conv_generic(kind, x, weight, bias, g, x.dim(0), weight.dim(0), std::move(out_shape));
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias, std::size_t pad_left,
              std::size_t pad_right) {
  constexpr auto kind = OpKind::kConv1d;
  Shape out_shape = conv1d_shape(x.shape(), weight.shape(), pad_left, pad_right);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != weight.dim(0))) shape_error(kind, "bias shape " + to_string(bias->shape()));
  check_finite(kind, {&x, &weight});
  if (bias) check_finite(kind, *bias);
  ConvGeometry g{x.dim(1), 1, x.dim(2), 1, weight.dim(2), 1, 0, pad_left, 1, out_shape[2]};
  return conv_generic(kind, x, weight, bias, g, x.dim(0), weight.dim(0), std::move(out_shape));
}

Tensor maxpool2d(const Tensor& x, const Pool2dAttrs& attrs) {
  constexpr auto kind = OpKind::kMaxPool2d;
  Shape out_shape = maxpool2d_shape(x.shape(), attrs);
  check_finite(kind, x);
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = out_shape[2], ow = out_shape[3];
  auto argmax = std::make_shared<std::vector<std::size_t>>(planes * oh * ow);
  Buffer out(argmax->size());
  auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        std::size_t best_index = kNoProducer;
        for (std::size_t ky = 0; ky < attrs.kernel; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * attrs.stride + ky) - static_cast<std::ptrdiff_t>(attrs.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < attrs.kernel; ++kx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * attrs.stride + kx) - static_cast<std::ptrdiff_t>(attrs.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t flat = (p * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
            if (best_index == kNoProducer || xv[flat] > best) {
              best = xv[flat];
              best_index = flat;
            }
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        (*argmax)[o] = best_index;
        out[o] = best;
        if (auto* trace = BranchTrace::active()) trace->note(best_index);
      }
    }
  }
  Tensor y = Tensor::adopt(std::move(out_shape), std::move(out));
  if (wants_record({&x})) {
    push(kind, {x}, y, [argmax](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      auto gy = r.output.grad_buffer();
      auto gx = in.grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    shape_error(OpKind::kReshape, "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor y = Tensor::adopt(std::move(shape), Buffer(x.values().begin(), x.values().end()));
  if (wants_record({&x})) {
    push(OpKind::kReshape, {x}, y, [](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      auto gy = r.output.grad_buffer();
      auto gx = in.grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  constexpr auto kind = OpKind::kPermute;
  const std::size_t n = x.ndim();
  if (perm.size() != n) shape_error(kind, "permutation rank " + std::to_string(perm.size()) + " != " + std::to_string(n));
  std::vector<bool> seen(n, false);
  for (auto p : perm) {
    if (p >= n || seen[p]) shape_error(kind, "invalid permutation for " + to_string(x.shape()));
    seen[p] = true;
  }
  Shape out_shape(n);
  for (std::size_t i = 0; i < n; ++i) out_shape[i] = x.dim(perm[i]);
  const auto in_strides = strides_of(x.shape());
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> counter(n, 0);
  for (std::size_t o = 0; o < map->size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) src += counter[i] * in_strides[perm[i]];
    (*map)[o] = src;
    for (std::size_t i = n; i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  return gather_by_map(kind, x, std::move(out_shape), std::move(map));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  constexpr auto kind = OpKind::kSlice;
  if (axis >= x.ndim()) shape_error(kind, "axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  if (length == 0 || start + length > x.dim(axis)) {
    shape_error(kind, "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") exceeds extent " +
                          std::to_string(x.dim(axis)));
  }
  const auto& s = x.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  Shape out_shape = s;
  out_shape[axis] = length;
  auto map = std::make_shared<std::vector<std::size_t>>();
  map->reserve(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t a = 0; a < length; ++a) {
      const std::size_t base = (o * s[axis] + start + a) * inner;
      for (std::size_t i = 0; i < inner; ++i) map->push_back(base + i);
    }
  }
  return gather_by_map(kind, x, std::move(out_shape), std::move(map));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  constexpr auto kind = OpKind::kConcat;
  if (parts.empty()) shape_error(kind, "no inputs");
  const auto& first = parts.front().shape();
  if (axis >= first.size()) shape_error(kind, "axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != first.size()) shape_error(kind, "rank mismatch " + to_string(p.shape()) + " vs " + to_string(first));
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) {
        shape_error(kind, "extent mismatch on axis " + std::to_string(d) + ": " + to_string(p.shape()) + " vs " +
                              to_string(first));
      }
    }
    check_finite(kind, p);
    out_shape[axis] += p.dim(axis);
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
  Buffer out;
  out.reserve(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t chunk = p.dim(axis) * inner;
      auto pv = p.values();
      out.insert(out.end(), pv.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                 pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk));
    }
  }
  Tensor y = Tensor::adopt(std::move(out_shape), std::move(out));
  if (wants_record(parts)) {
    push(kind, parts, y, [outer, inner, axis](OpRecord& r) {
      auto gy = r.output.grad_buffer();
      std::size_t offset = 0;
      for (std::size_t o = 0; o < outer; ++o) {
        for (auto& p : r.inputs) {
          const std::size_t chunk = p.dim(axis) * inner;
          if (p.requires_grad()) {
            auto gp = p.grad_buffer();
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += gy[offset + i];
          }
          offset += chunk;
        }
      }
    });
  }
  return y;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices) {
  constexpr auto kind = OpKind::kGather;
  if (x.ndim() == 0) shape_error(kind, "input must have a leading axis");
  if (indices.empty()) shape_error(kind, "empty index list");
  const std::size_t rows = x.dim(0);
  const std::size_t inner = x.numel() / rows;
  auto map = std::make_shared<std::vector<std::size_t>>();
  map->reserve(indices.size() * inner);
  for (auto idx : indices) {
    if (idx >= rows) shape_error(kind, "index " + std::to_string(idx) + " out of range " + std::to_string(rows));
    for (std::size_t i = 0; i < inner; ++i) map->push_back(idx * inner + i);
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  return gather_by_map(kind, x, std::move(out_shape), std::move(map));
}

Tensor expand(const Tensor& x, const Shape& shape) {
  constexpr auto kind = OpKind::kExpand;
  if (x.ndim() > shape.size()) shape_error(kind, "cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
  const std::size_t lead = shape.size() - x.ndim();
  for (std::size_t d = 0; d < x.ndim(); ++d) {
    if (x.dim(d) != 1 && x.dim(d) != shape[lead + d]) {
      shape_error(kind, "cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
    }
  }
  const auto in_strides = strides_of(x.shape());
  auto map = std::make_shared<std::vector<std::size_t>>(numel(shape));
  std::vector<std::size_t> counter(shape.size(), 0);
  for (std::size_t o = 0; o < map->size(); ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < x.ndim(); ++d) {
      if (x.dim(d) != 1) src += counter[lead + d] * in_strides[d];
    }
    (*map)[o] = src;
    for (std::size_t i = shape.size(); i-- > 0;) {
      if (++counter[i] < shape[i]) break;
      counter[i] = 0;
    }
  }
  return gather_by_map(kind, x, shape, std::move(map));
}

Tensor sum(const Tensor& x) {
  check_finite(OpKind::kSum, x);
  Scalar total = 0;
  for (auto v : x.values()) total += v;
  Tensor y = Tensor::scalar(total);
  if (wants_record({&x})) {
    push(OpKind::kSum, {x}, y, [](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      const Scalar g = r.output.grad_buffer()[0];
      for (auto& gx : in.grad_buffer()) gx += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  check_finite(OpKind::kMean, x);
  Scalar total = 0;
  for (auto v : x.values()) total += v;
  const auto n = static_cast<Scalar>(x.numel());
  Tensor y = Tensor::scalar(total / n);
  if (wants_record({&x})) {
    push(OpKind::kMean, {x}, y, [n](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      const Scalar g = r.output.grad_buffer()[0] / n;
      for (auto& gx : in.grad_buffer()) gx += g;
    });
  }
  return y;
}

Tensor max_last(const Tensor& x) {
  constexpr auto kind = OpKind::kMaxLast;
  if (x.ndim() == 0) shape_error(kind, "input must have at least one axis");
  check_finite(kind, x);
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto argmax = std::make_shared<std::vector<std::size_t>>(rows);
  Buffer out(rows);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = r * width;
    for (std::size_t c = 1; c < width; ++c) {
      if (xv[r * width + c] > xv[best]) best = r * width + c;
    }
    (*argmax)[r] = best;
    out[r] = xv[best];
    if (auto* trace = BranchTrace::active()) trace->note(best);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  Tensor y = Tensor::adopt(std::move(shape), std::move(out));
  if (wants_record({&x})) {
    push(kind, {x}, y, [argmax](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      auto gy = r.output.grad_buffer();
      auto gx = in.grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
    });
  }
  return y;
}

Tensor softmax(const Tensor& x) {
  constexpr auto kind = OpKind::kSoftmax;
  if (x.ndim() == 0) shape_error(kind, "input must have at least one axis");
  check_finite(kind, x);
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  Buffer out(x.numel());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data() + r * width;
    Scalar* o = out.data() + r * width;
    const Scalar peak = *std::max_element(in, in + width);
    Scalar total = 0;
    for (std::size_t c = 0; c < width; ++c) total += (o[c] = std::exp(in[c] - peak));
    for (std::size_t c = 0; c < width; ++c) o[c] /= total;
  }
  Tensor y = Tensor::adopt(x.shape(), std::move(out));
  if (wants_record({&x})) {
    push(kind, {x}, y, [rows, width](OpRecord& r) {
      auto& in = r.inputs[0];
      if (!in.requires_grad()) return;
      auto gy = r.output.grad_buffer();
      auto yv = r.output.values();
      auto gx = in.grad_buffer();
      for (std::size_t row = 0; row < rows; ++row) {
        const std::size_t base = row * width;
        Scalar dot = 0;
        for (std::size_t c = 0; c < width; ++c) dot += gy[base + c] * yv[base + c];
        for (std::size_t c = 0; c < width; ++c) gx[base + c] += yv[base + c] * (gy[base + c] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  constexpr auto kind = OpKind::kLayerNorm;
  if (x.ndim() == 0) shape_error(kind, "input must have at least one axis");
  const std::size_t width = x.shape().back();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    shape_error(kind, "gamma/beta must be (" + std::to_string(width) + "), got " + to_string(gamma.shape()) + " and " +
                          to_string(beta.shape()));
  }
  check_finite(kind, {&x, &gamma, &beta});
  const std::size_t rows = x.numel() / width;
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(rows);
  Buffer out(x.numel());
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * width;
    Scalar mu = 0;
    for (std::size_t c = 0; c < width; ++c) mu += xv[base + c];
    mu /= static_cast<Scalar>(width);
    Scalar var = 0;
    for (std::size_t c = 0; c < width; ++c) var += (xv[base + c] - mu) * (xv[base + c] - mu);
    var /= static_cast<Scalar>(width);
    const Scalar inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t c = 0; c < width; ++c) {
      const Scalar h = (xv[base + c] - mu) * inv;
      (*xhat)[base + c] = h;
      out[base + c] = h * gv[c] + bv[c];
    }
  }
  Tensor y = Tensor::adopt(x.shape(), std::move(out));
  if (wants_record({&x, &gamma, &beta})) {
    push(kind, {x, gamma, beta}, y, [rows, width, xhat, rstd](OpRecord& r) {
      auto gy = r.output.grad_buffer();
      auto& tx = r.inputs[0];
      auto& tg = r.inputs[1];
      auto& tb = r.inputs[2];
      auto gv = tg.values();
      if (tg.requires_grad()) {
        auto gg = tg.grad_buffer();
        for (std::size_t i = 0; i < gy.size(); ++i) gg[i % width] += gy[i] * (*xhat)[i];
      }
      if (tb.requires_grad()) {
        auto gb = tb.grad_buffer();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i % width] += gy[i];
      }
      if (tx.requires_grad()) {
        auto gx = tx.grad_buffer();
        const auto w = static_cast<Scalar>(width);
        for (std::size_t row = 0; row < rows; ++row) {
          const std::size_t base = row * width;
          Scalar mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < width; ++c) {
            const Scalar d = gy[base + c] * gv[c];
            mean_d += d;
            mean_dx += d * (*xhat)[base + c];
          }
          mean_d /= w;
          mean_dx /= w;
          for (std::size_t c = 0; c < width; ++c) {
            const Scalar d = gy[base + c] * gv[c];
            gx[base + c] += (*rstd)[row] * (d - mean_d - (*xhat)[base + c] * mean_dx);
          }
        }
      }
    });
  }
  return y;
}

}  // namespace stagecct::ops
