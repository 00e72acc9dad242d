#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "stagecct/tensor.hpp"

namespace stagecct {

struct ParamError {
  std::string name;
  Scalar max_rel_error = 0;
};

// Relative error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
struct GradCheckReport {
  std::vector<ParamError> params;
  Scalar max_rel_error = 0;
  Scalar threshold = 1e-4;
  Scalar scale_floor = 1e-3;
  std::size_t coordinates = 0;
  // Coordinates whose +/-h stencil crossed a kink of a piecewise op and were
  // re-measured with a smaller step, and those that still crossed one at the
  // smallest step and were left out.
  std::size_t reduced_step = 0;
  std::size_t skipped_at_kink = 0;

  bool pass() const { return max_rel_error <= threshold; }
  std::string worst() const;
};

struct GradCheckOptions {
  Scalar step = 1e-5;
  Scalar threshold = 1e-4;
  Scalar scale_floor = 1e-3;
  // 0 checks every coordinate; otherwise an evenly strided subset of this size.
  std::size_t max_coords_per_param = 0;
  // When non-zero the subset is drawn at random from this seed instead of
  // being evenly strided.
  std::uint64_t coordinate_seed = 0;
  // How many times the step may be divided by 10 when the stencil straddles a
  // kink. 0 disables kink detection.
  std::size_t kink_retries = 3;
};

Scalar relative_error(Scalar analytic, Scalar numeric, Scalar scale_floor);

// Central differences (f(x+h) - f(x-h)) / 2h against reverse-mode gradients of a
// scalar function of one tensor.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           const GradCheckOptions& options = {});

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Same check over several parameter tensors that `f` closes over. The tensors'
// values are perturbed in place and restored.
GradCheckReport grad_check_params(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace stagecct
