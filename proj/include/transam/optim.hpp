#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "transam/tensor.hpp"

namespace transam {

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update using each parameter's accumulated
/// gradient (absent gradients count as zero). Moment buffers are sized on
/// first use. Throws NumericError before touching anything if a gradient
/// holds NaN.
void adam_step(std::span<Tensor> params, AdamState& state, double rate);
void adam_step(std::span<NamedTensor> params, AdamState& state, double rate);

void zero_grads(std::span<NamedTensor> params);

/// Linear warmup to `peak_rate`, then linear decay to 0 at `total_steps`.
struct LrSchedule {
  double peak_rate = 5e-5;
  std::int64_t warmup_steps = 10000;
  std::int64_t total_steps = 100000;

  void validate() const;
  /// Correctly rounded value of the piecewise-linear rate.
  double rate(std::int64_t step) const;
};

double lr_at(const LrSchedule& schedule, std::int64_t step);

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates checked per parameter; every coordinate when the
  /// parameter is no larger than this.
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 0;
  /// Runs after backward() and before comparison. Test hook.
  std::function<void(std::span<NamedTensor>)> after_backward;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  /// Worst coordinate of each parameter, in parameter order.
  std::vector<GradCheckEntry> worst_per_param;
  std::size_t coordinates_checked = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences,
/// |analytic - numeric| / max(1, |analytic|). `loss_fn` must rebuild its
/// forward pass from the current parameter values on each call.
GradCheckReport gradient_check(const std::function<Tensor()>& loss_fn, std::span<NamedTensor> params,
                               const GradCheckOptions& options = {});

double gradient_check(const std::function<Tensor()>& loss_fn, std::span<NamedTensor> params, double h);

}  // namespace transam
