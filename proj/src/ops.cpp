#include "transam/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace transam {

namespace {

using BackwardFn = std::function<void(const TensorNode&)>;

Tensor record(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  TensorNode* node = out.node();
  node->requires_grad = true;
  for (const Tensor& in : inputs) node->parents.push_back(in.node_ptr());
  node->backward_fn = std::move(fn);
  return out;
}

Tensor record_many(Shape shape, std::vector<double> data, std::span<const Tensor> inputs, BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  TensorNode* node = out.node();
  node->requires_grad = true;
  for (const Tensor& in : inputs) node->parents.push_back(in.node_ptr());
  node->backward_fn = std::move(fn);
  return out;
}

// Gradient buffer of an input, or nullptr when it does not track gradients.
std::vector<double>* grad_of(const TensorNode& out, std::size_t index) {
  TensorNode* parent = out.parents[index].get();
  return parent->requires_grad ? &parent->grad_buffer() : nullptr;
}

void check_matrix(const Tensor& t, const char* what) {
  if (t.rank() > 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_to_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  }
  return record({m, n}, std::move(out), {a, b}, [m, k, n](const TensorNode& node) {
    const auto& G = node.grad;
    const auto& A = node.parents[0]->data;
    const auto& B = node.parents[1]->data;
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (auto* gb = grad_of(node, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  check_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return record({n, m}, std::move(out), {a}, [m, n](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += node.grad[j * m + i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  enum class Mode { Same, Row, Scalar } mode;
  if (a.shape() == b.shape()) {
    mode = Mode::Same;
  } else if (b.numel() == 1) {
    mode = Mode::Scalar;
  } else if (a.rank() <= 2 && b.rank() <= 2 && b.rows() == 1 && b.cols() == a.cols()) {
    mode = Mode::Row;
  } else {
    throw DimensionError("add: cannot combine " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t width = mode == Mode::Row ? b.numel() : 1;
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] += mode == Mode::Same ? B[i] : mode == Mode::Scalar ? B[0] : B[i % width];
  }
  return record(a.shape(), std::move(out), {a, b}, [mode, n, width](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += node.grad[i];
    }
    if (auto* gb = grad_of(node, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = mode == Mode::Same ? i : mode == Mode::Scalar ? 0 : i % width;
        (*gb)[j] += node.grad[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  return record(a.shape(), std::move(out), {a, b}, [n](const TensorNode& node) {
    const auto& A = node.parents[0]->data;
    const auto& B = node.parents[1]->data;
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += node.grad[i] * B[i];
    }
    if (auto* gb = grad_of(node, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[i] += node.grad[i] * A[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return record(a.shape(), std::move(out), {a}, [factor](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < node.grad.size(); ++i) (*ga)[i] += factor * node.grad[i];
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return record(a.shape(), std::move(out), {a}, [](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        if (node.data[i] > 0.0) (*ga)[i] += node.grad[i];
      }
    }
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::tanh(v);
  return record(a.shape(), std::move(out), {a}, [](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        const double y = node.data[i];
        (*ga)[i] += node.grad[i] * (1.0 - y * y);
      }
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  check_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const double v = A[i * n + j];
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
        throw NumericError("softmax_rows: NaN or +inf input in row " + std::to_string(i));
      }
      peak = std::max(peak, v);
    }
    if (std::isinf(peak)) throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = A[i * n + j];
      const double e = std::isinf(v) ? 0.0 : std::exp(v - peak);
      out[i * n + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return record({m, n}, std::move(out), {a}, [m, n](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += node.grad[i * n + j] * node.data[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          (*ga)[i * n + j] += node.data[i * n + j] * (node.grad[i * n + j] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: feature width must be at least 2");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                         shape_to_string(bias.shape()) + " do not match width " + std::to_string(d));
  }
  std::vector<double> normalized(m * d);
  std::vector<double> inv_std(m);
  std::vector<double> out(m * d);
  auto X = x.data();
  auto G = gain.data();
  auto B = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += X[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = X[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normalized[i * d + j] = (X[i * d + j] - mu) * inv_std[i];
      out[i * d + j] = G[j] * normalized[i * d + j] + B[j];
    }
  }
  return record({m, d}, std::move(out), {x, gain, bias},
                [m, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](const TensorNode& node) {
                  const auto& G = node.parents[1]->data;
                  auto* gx = grad_of(node, 0);
                  auto* gg = grad_of(node, 1);
                  auto* gb = grad_of(node, 2);
                  for (std::size_t i = 0; i < m; ++i) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double g = node.grad[i * d + j];
                      const double gh = g * G[j];
                      mean_g += gh;
                      mean_gx += gh * normalized[i * d + j];
                      if (gg) (*gg)[j] += g * normalized[i * d + j];
                      if (gb) (*gb)[j] += g;
                    }
                    if (!gx) continue;
                    mean_g /= static_cast<double>(d);
                    mean_gx /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      const double gh = node.grad[i * d + j] * G[j];
                      (*gx)[i * d + j] += inv_std[i] * (gh - mean_g - normalized[i * d + j] * mean_gx);
                    }
                  }
                });
}

std::vector<double> rotary_apply(std::span<const double> v, int m, double theta_base) {
  const std::size_t d = v.size();
  if (d % 2 != 0) throw DimensionError("rotary_apply: odd width " + std::to_string(d));
  std::vector<double> out(d);
  for (std::size_t j = 0; j < d / 2; ++j) {
    const double theta = std::pow(theta_base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    const double angle = static_cast<double>(m) * theta;
    const double c = std::cos(angle), s = std::sin(angle);
    out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s;
    out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c;
  }
  return out;
}

Tensor rotary_rows(const Tensor& x, std::span<const int> roles, double theta_base) {
  check_matrix(x, "rotary_rows");
  const std::size_t m = x.rows(), d = x.cols();
  if (roles.size() != m) {
    throw DimensionError("rotary_rows: " + std::to_string(roles.size()) + " roles for " + std::to_string(m) + " rows");
  }
  std::vector<double> out(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    auto rotated = rotary_apply(x.data().subspan(i * d, d), roles[i], theta_base);
    std::copy(rotated.begin(), rotated.end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> role_copy(roles.begin(), roles.end());
  return record({m, d}, std::move(out), {x}, [m, d, theta_base, role_copy](const TensorNode& node) {
    if (auto* gx = grad_of(node, 0)) {
      // The adjoint of a rotation is the rotation by the opposite angle.
      for (std::size_t i = 0; i < m; ++i) {
        auto back = rotary_apply(std::span<const double>(node.grad).subspan(i * d, d), -role_copy[i], theta_base);
        for (std::size_t j = 0; j < d; ++j) (*gx)[i * d + j] += back[j];
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  check_matrix(table, "gather_rows");
  const std::size_t rows = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  std::vector<double> out(ids.size() * d);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || static_cast<std::size_t>(ids[k]) >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[k]) + " outside table of " + std::to_string(rows) +
                           " rows");
    }
    auto src = table.data().subspan(static_cast<std::size_t>(ids[k]) * d, d);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(k * d));
  }
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return record({ids.size(), d}, std::move(out), {table}, [d, id_copy](const TensorNode& node) {
    if (auto* gt = grad_of(node, 0)) {
      for (std::size_t k = 0; k < id_copy.size(); ++k) {
        const std::size_t base = static_cast<std::size_t>(id_copy[k]) * d;
        for (std::size_t j = 0; j < d; ++j) (*gt)[base + j] += node.grad[k * d + j];
      }
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    check_matrix(p, "concat_rows");
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width " + std::to_string(p.cols()) + " differs from " + std::to_string(d));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    total += p.rows();
  }
  return record_many({total, d}, std::move(out), parts, [offsets](const TensorNode& node) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      if (auto* gp = grad_of(node, k)) {
        for (std::size_t j = 0; j < gp->size(); ++j) (*gp)[j] += node.grad[offsets[k] + j];
      }
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    check_matrix(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: " + std::to_string(p.rows()) + " rows differ from " + std::to_string(m));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = src[i * widths[k] + j];
    offset += widths[k];
  }
  return record_many({m, total}, std::move(out), parts, [m, total, widths](const TensorNode& node) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* gp = grad_of(node, k)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*gp)[i * widths[k] + j] += node.grad[i * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

Tensor row(const Tensor& a, std::size_t index) {
  check_matrix(a, "row");
  const std::size_t d = a.cols();
  if (index >= a.rows()) {
    throw DimensionError("row: index " + std::to_string(index) + " outside " + shape_to_string(a.shape()));
  }
  auto src = a.data().subspan(index * d, d);
  return record({1, d}, std::vector<double>(src.begin(), src.end()), {a}, [index, d](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (std::size_t j = 0; j < d; ++j) (*ga)[index * d + j] += node.grad[j];
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return record({1}, {total}, {a}, [](const TensorNode& node) {
    if (auto* ga = grad_of(node, 0)) {
      for (double& g : *ga) g += node.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(a.numel());
  for (double& v : mask) v = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(a, Tensor::from(a.shape(), std::move(mask)));
}

Tensor binary_cross_entropy(const Tensor& probs, std::span<const int> labels) {
  check_matrix(probs, "binary_cross_entropy");
  if (probs.cols() != 2) throw DimensionError("binary_cross_entropy: expected n x 2 probabilities");
  if (probs.rows() != labels.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(probs.rows()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  constexpr double kLow = 1e-12, kHigh = 1.0 - 1e-12;
  const std::size_t n = labels.size();
  std::vector<int> label_copy(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (label_copy[i] != 0 && label_copy[i] != 1) throw std::invalid_argument("labels must be 0 or 1");
    const double p = probs.data()[i * 2 + static_cast<std::size_t>(label_copy[i])];
    total -= std::log(std::clamp(p, kLow, kHigh));
  }
  return record({1}, {total}, {probs}, [n, label_copy](const TensorNode& node) {
    if (auto* gp = grad_of(node, 0)) {
      const auto& P = node.parents[0]->data;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = i * 2 + static_cast<std::size_t>(label_copy[i]);
        const double p = P[k];
        if (p > kLow && p < kHigh) (*gp)[k] -= node.grad[0] / p;
      }
    }
  });
}

}  // namespace transam
