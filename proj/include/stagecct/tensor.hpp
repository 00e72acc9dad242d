#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stagecct {

using Scalar = double;
using Shape = std::vector<std::size_t>;

// Every tensor buffer starts on a 64-byte boundary. Vectorized kernels choose
// their loop peeling from the start address, so equal alignment is what makes
// results independent of where the heap happens to place a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<Scalar, AlignedAllocator<Scalar>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind : std::uint8_t {
  kConv2d,
  kMaxPool2d,
  kConv1d,
  kRelu,
  kSigmoid,
  kLog,
  kAbs,
  kClamp,
  kAdd,
  kSub,
  kMul,
  kAddScalar,
  kMulScalar,
  kLinear,
  kMatMul,
  kReshape,
  kPermute,
  kSlice,
  kConcat,
  kGather,
  kExpand,
  kSum,
  kMean,
  kMaxLast,
  kSoftmax,
  kLayerNorm,
};

std::string_view op_name(OpKind kind);

inline constexpr std::size_t kNoProducer = std::numeric_limits<std::size_t>::max();

class Tape;

struct TensorImpl {
  Shape shape;
  Buffer values;
  Buffer grad;  // empty until a gradient reaches the tensor
  bool requires_grad = false;
  const Tape* tape = nullptr;
  std::size_t producer = kNoProducer;
};

// Shared handle onto a dense row-major array. Copies alias the same storage;
// detach() produces an independent value snapshot.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, const std::vector<Scalar>& values, bool requires_grad = false);
  // Takes ownership of an aligned buffer without copying.
  static Tensor adopt(Shape shape, Buffer values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->values.size(); }

  std::span<const Scalar> values() const { return impl_->values; }
  std::span<Scalar> mutable_values() { return impl_->values; }
  Scalar item() const;
  Scalar at(std::size_t flat_index) const { return impl_->values.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-filled view when no gradient has reached the tensor.
  std::vector<Scalar> grad() const;
  std::span<Scalar> grad_buffer();  // allocates on first use
  void clear_grad() { impl_->grad.clear(); }

  Tensor detach() const;
  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

  TensorImpl& impl() const { return *impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct OpRecord {
  OpKind kind;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void(OpRecord&)> backward;
};

// Records differentiable ops in creation order and replays them in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void append(OpRecord record);
  std::size_t size() const { return records_.size(); }
  const OpRecord& record(std::size_t i) const { return records_.at(i); }

  // Full reverse pass from a scalar loss.
  void backward(const Tensor& loss);
  // Reverse pass over only the records created after `stop` was produced;
  // leaves dLoss/dStop in stop's gradient buffer.
  void backward_until(const Tensor& loss, const Tensor& stop);

  // Clears every gradient buffer touched by this tape and re-arms backward.
  void zero_grad();
  void clear();

 private:
  void run(const Tensor& loss, std::size_t first_record);
  bool owns(const Tensor& t) const;

  std::vector<OpRecord> records_;
  bool backward_done_ = false;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// While a BranchTrace is alive on the current thread, piecewise ops (relu,
// abs, clamp, max-pool, max_last and the clip band) fold every branch
// decision they take into a running hash. Two evaluations with equal
// signatures took the same linear piece everywhere, which is what a
// finite-difference stencil needs to be meaningful.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  void note(std::uint64_t decision) {
    hash_ ^= decision + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
  }
  std::uint64_t signature() const { return hash_; }

  static BranchTrace* active();

 private:
  std::uint64_t hash_ = 0;
  BranchTrace* previous_;
};

namespace testing {
// Halves the upstream gradient seen by every record of `kind` during backward.
// Exists so gradient checks can be shown to catch a broken backward rule.
void inject_backward_fault(std::optional<OpKind> kind);
std::optional<OpKind> injected_backward_fault();
}  // namespace testing

}  // namespace stagecct
