// Differentiable operations over Tensor. Matrix operations read rank-1
// tensors as a single row and always return rank-2 results.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "transam/tensor.hpp"

namespace transam {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Elementwise sum. `b` may also be a single row broadcast over the rows of
/// `a`, or a one-element tensor broadcast everywhere.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);

/// Row-wise softmax with max subtraction. -inf entries act as a mask and
/// come out exactly 0; a row with no finite entry is an error.
Tensor softmax_rows(const Tensor& a);

/// Normalises each row over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Rotates feature pairs (2j, 2j+1) of row i by roles[i] * base^(-2j/d).
Tensor rotary_rows(const Tensor& x, std::span<const int> roles, double theta_base);

/// Plain-value rotary rotation of a single vector.
std::vector<double> rotary_apply(std::span<const double> v, int m, double theta_base);

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor row(const Tensor& a, std::size_t index);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Inverted dropout; identity when `rate` is 0.
Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng);

/// Sum over rows of -((1-y) log p0 + y log p1) for an n x 2 probability
/// matrix. Probabilities are clamped to [1e-12, 1 - 1e-12] before the log.
Tensor binary_cross_entropy(const Tensor& probs, std::span<const int> labels);

}  // namespace transam
