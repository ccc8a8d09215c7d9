#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "oracles.hpp"
#include "transam/tensor.hpp"

namespace testing {

inline transam::Tensor to_tensor(const oracle::Matrix& m, bool requires_grad = false) {
  std::vector<double> flat;
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return transam::Tensor::matrix(m.size(), m.empty() ? 0 : m[0].size(), flat, requires_grad);
}

inline oracle::Matrix to_matrix(const transam::Tensor& t) {
  oracle::Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline double max_abs_diff(const oracle::Matrix& a, const oracle::Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("transam_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
