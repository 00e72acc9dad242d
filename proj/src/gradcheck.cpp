#include "stagecct/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "stagecct/rng.hpp"

namespace stagecct {

std::string GradCheckReport::worst() const {
  if (params.empty()) return "none";
  const auto it = std::max_element(params.begin(), params.end(),
                                   [](const ParamError& a, const ParamError& b) { return a.max_rel_error < b.max_rel_error; });
  std::ostringstream os;
  os << it->name << " (max rel err " << it->max_rel_error << ")";
  return os.str();
}

Scalar relative_error(Scalar analytic, Scalar numeric, Scalar scale_floor) {
  const Scalar scale = std::max({std::abs(analytic), std::abs(numeric), scale_floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

struct Evaluation {
  Scalar value;
  std::uint64_t signature;
};

Evaluation evaluate(const std::function<Tensor()>& f) {
  BranchTrace trace;
  const Tensor out = f();
  if (out.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued, got " + to_string(out.shape()));
  return {out.item(), trace.signature()};
}

std::vector<std::size_t> coordinates_for(std::size_t n, std::size_t limit, Rng* rng) {
  std::vector<std::size_t> coords;
  if (limit == 0 || limit >= n) {
    coords.resize(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    return coords;
  }
  if (rng) {
    auto order = rng->permutation(n);
    order.resize(limit);
    std::sort(order.begin(), order.end());
    return order;
  }
  for (std::size_t i = 0; i < limit; ++i) coords.push_back(i * n / limit + (n / limit) / 2);
  return coords;
}

}  // namespace

GradCheckReport grad_check_params(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  GradCheckReport report;
  report.threshold = options.threshold;
  report.scale_floor = options.scale_floor;

  std::vector<bool> previous_flags;
  for (auto& p : params) {
    previous_flags.push_back(p.tensor.requires_grad());
    p.tensor.set_requires_grad(true);
    p.tensor.clear_grad();
  }
  std::vector<std::vector<Scalar>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = f();
    if (loss.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued, got " + to_string(loss.shape()));
    tape.backward(loss);
    for (auto& p : params) analytic.push_back(p.tensor.grad());
    tape.zero_grad();
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.set_requires_grad(previous_flags[i]);
  const std::uint64_t base_signature = evaluate(f).signature;
  std::optional<Rng> picker;
  if (options.coordinate_seed != 0) picker.emplace(options.coordinate_seed);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto values = p.tensor.mutable_values();
    ParamError err{p.name, 0};
    for (auto c : coordinates_for(values.size(), options.max_coords_per_param, picker ? &*picker : nullptr)) {
      const Scalar original = values[c];
      Scalar step = options.step;
      Scalar numeric = 0;
      bool smooth = false;
      for (std::size_t attempt = 0; attempt <= options.kink_retries; ++attempt, step /= 10) {
        const Scalar up = original + step;
        const Scalar down = original - step;
        values[c] = up;
        const Evaluation plus = evaluate(f);
        values[c] = down;
        const Evaluation minus = evaluate(f);
        values[c] = original;
        // Divide by the realized spacing, which absorbs the rounding of x +/- h.
        numeric = (plus.value - minus.value) / (up - down);
        smooth = options.kink_retries == 0 ||
                 (plus.signature == base_signature && minus.signature == base_signature);
        if (smooth) {
          if (attempt > 0) ++report.reduced_step;
          break;
        }
      }
      if (!smooth) {
        ++report.skipped_at_kink;
        continue;
      }
      err.max_rel_error = std::max(err.max_rel_error, relative_error(analytic[pi][c], numeric, options.scale_floor));
      ++report.coordinates;
    }
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    report.params.push_back(std::move(err));
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           const GradCheckOptions& options) {
  Tensor x = point.detach();
  return grad_check_params([&] { return f(x); }, {NamedTensor{"x", x}}, options);
}

}  // namespace stagecct
