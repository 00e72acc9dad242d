#include "stagecct/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace stagecct {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMaxPool2d: return "maxpool2d";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kAbs: return "abs";
    case OpKind::kClamp: return "clamp";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMulScalar: return "mul_scalar";
    case OpKind::kLinear: return "linear";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPermute: return "permute";
    case OpKind::kSlice: return "slice";
    case OpKind::kConcat: return "concat";
    case OpKind::kGather: return "gather";
    case OpKind::kExpand: return "expand";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMaxLast: return "max_last";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
  }
  return "unknown";
}

Tensor::Tensor(Shape shape, const std::vector<Scalar>& values, bool requires_grad)
    : Tensor(adopt(std::move(shape), Buffer(values.begin(), values.end()), requires_grad)) {}

Tensor Tensor::adopt(Shape shape, Buffer values, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape));
  }
  if (values.size() != stagecct::numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  }
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const auto n = stagecct::numel(shape);
  return adopt(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(impl_->shape));
  }
  return impl_->shape[axis];
}

Scalar Tensor::item() const {
  if (impl_->values.size() != 1) throw ShapeError("item: tensor of shape " + to_string(impl_->shape) + " is not a scalar");
  return impl_->values[0];
}

std::vector<Scalar> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<Scalar>(impl_->values.size(), 0.0);
  return {impl_->grad.begin(), impl_->grad.end()};
}

std::span<Scalar> Tensor::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const { return adopt(impl_->shape, impl_->values, false); }

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local std::optional<OpKind> g_fault;
}  // namespace

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

namespace {
thread_local BranchTrace* g_branch_trace = nullptr;
}

BranchTrace::BranchTrace() : previous_(g_branch_trace) { g_branch_trace = this; }
BranchTrace::~BranchTrace() { g_branch_trace = previous_; }
BranchTrace* BranchTrace::active() { return g_branch_trace; }

namespace testing {
void inject_backward_fault(std::optional<OpKind> kind) { g_fault = kind; }
std::optional<OpKind> injected_backward_fault() { return g_fault; }
}  // namespace testing

void Tape::append(OpRecord record) {
  auto& out = record.output.impl();
  out.tape = this;
  out.producer = records_.size();
  out.requires_grad = true;
  records_.push_back(std::move(record));
}

void Tape::backward(const Tensor& loss) { run(loss, 0); }

bool Tape::owns(const Tensor& t) const {
  const auto& impl = t.impl();
  return impl.tape == this && impl.producer < records_.size() && records_[impl.producer].output.is_same(t);
}

void Tape::backward_until(const Tensor& loss, const Tensor& stop) {
  const auto& s = stop.impl();
  if (!owns(stop)) {
    throw TapeError("backward_until: stop tensor was not produced on this tape");
  }
  run(loss, s.producer + 1);
}

void Tape::run(const Tensor& loss, std::size_t first_record) {
  if (!loss.defined()) throw TapeError("backward: undefined loss");
  if (loss.numel() != 1) throw TapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  const auto& l = loss.impl();
  const bool leaf_loss = l.producer == kNoProducer && l.requires_grad;
  if (!leaf_loss && !owns(loss)) throw TapeError("backward: loss is not on this tape (detached)");
  if (backward_done_) throw TapeError("backward: gradients already populated; call zero_grad() first");
  backward_done_ = true;

  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  if (leaf_loss) return;

  const auto fault = testing::injected_backward_fault();
  for (std::size_t i = l.producer + 1; i-- > first_record;) {
    auto& rec = records_[i];
    if (!rec.output.has_grad()) continue;
    if (fault && *fault == rec.kind) {
      for (auto& g : rec.output.grad_buffer()) g *= 0.5;
    }
    rec.backward(rec);
  }
}

void Tape::zero_grad() {
  for (auto& rec : records_) {
    rec.output.clear_grad();
    for (auto& in : rec.inputs) in.clear_grad();
  }
  backward_done_ = false;
}

void Tape::clear() {
  zero_grad();
  for (auto& rec : records_) {
    rec.output.impl().tape = nullptr;
    rec.output.impl().producer = kNoProducer;
  }
  records_.clear();
}

}  // namespace stagecct
