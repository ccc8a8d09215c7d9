#include "transam/optim.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace transam {

void adam_step(std::span<Tensor> params, AdamState& state, double rate) {
  if (rate < 0.0) throw std::invalid_argument("adam_step: negative learning rate");
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.node()->grad) {
      if (std::isnan(g)) throw NumericError("adam_step: NaN gradient");
    }
  }
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first_moment[k].size() != params[k].numel()) {
      throw DimensionError("adam_step: moment buffer " + std::to_string(k) + " does not match parameter shape " +
                           shape_to_string(params[k].shape()));
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    auto data = p.mutable_data();
    const std::vector<double>& grad = p.node()->grad;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      data[i] -= rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

void adam_step(std::span<NamedTensor> params, AdamState& state, double rate) {
  std::vector<Tensor> tensors;
  tensors.reserve(params.size());
  for (const auto& p : params) tensors.push_back(p.tensor);
  adam_step(std::span<Tensor>(tensors), state, rate);
}

void zero_grads(std::span<NamedTensor> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

namespace {

/// Nearest double to value * num / den for 0 <= num <= den, ties to even.
double scaled_fraction(double value, std::int64_t num, std::int64_t den) {
  if (num == 0 || value == 0.0) return 0.0;
  using u128 = unsigned __int128;
  int exponent = 0;
  const double frac = std::frexp(std::abs(value), &exponent);
  const u128 top = static_cast<u128>(std::ldexp(frac, 53)) * static_cast<u128>(num);
  const u128 bottom = static_cast<u128>(den);
  int shift = 0;
  while ((top << shift) < (bottom << 54)) ++shift;
  u128 q = (top << shift) / bottom;
  const bool inexact = (top << shift) % bottom != 0;
  // q has 55 significant bits; keep 53.
  const unsigned low = static_cast<unsigned>(q & 3);
  q >>= 2;
  if (low == 3 || (low == 2 && (inexact || (q & 1)))) ++q;
  return std::copysign(std::ldexp(static_cast<double>(q), exponent - 53 - shift + 2), value);
}

}  // namespace

void LrSchedule::validate() const {
  if (!(peak_rate > 0.0)) throw std::invalid_argument("schedule: peak_rate must be positive");
  if (warmup_steps < 1) throw std::invalid_argument("schedule: warmup_steps must be at least 1");
  if (total_steps < warmup_steps) throw std::invalid_argument("schedule: total_steps must be >= warmup_steps");
}

double LrSchedule::rate(std::int64_t step) const {
  if (step < 0) throw std::invalid_argument("schedule: negative step");
  if (step > total_steps) {
    std::cerr << "warning: learning-rate step " << step << " is past total_steps " << total_steps
              << "; using 0\n";
    return 0.0;
  }
  if (step <= warmup_steps) return scaled_fraction(peak_rate, step, warmup_steps);
  return scaled_fraction(peak_rate, total_steps - step, total_steps - warmup_steps);
}

double lr_at(const LrSchedule& schedule, std::int64_t step) { return schedule.rate(step); }

GradCheckReport gradient_check(const std::function<Tensor()>& loss_fn, std::span<NamedTensor> params,
                               const GradCheckOptions& options) {
  if (!(options.h > 0.0)) throw std::invalid_argument("gradient_check: h must be positive");

  const double baseline = loss_fn().item();
  if (loss_fn().item() != baseline) {
    throw std::runtime_error("gradient_check: loss function is not deterministic");
  }

  zero_grads(params);
  Tensor loss = loss_fn();
  loss.backward();
  if (options.after_backward) options.after_backward(params);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.tensor.grad());

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].tensor.mutable_data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    GradCheckEntry worst{params[k].name, 0, 0.0, 0.0, -1.0};
    for (std::size_t i : coords) {
      const double saved = data[i];
      data[i] = saved + options.h;
      const double up = loss_fn().item();
      data[i] = saved - options.h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.coordinates_checked;
      if (err > worst.relative_error) worst = {params[k].name, i, a, numeric, err};
    }
    report.max_relative_error = std::max(report.max_relative_error, worst.relative_error);
    report.worst_per_param.push_back(worst);
  }
  return report;
}

double gradient_check(const std::function<Tensor()>& loss_fn, std::span<NamedTensor> params, double h) {
  GradCheckOptions options;
  options.h = h;
  return gradient_check(loss_fn, params, options).max_relative_error;
}

}  // namespace transam
