#pragma once

// Row-major flattening of Eigen matrices for the JSON checkpoint formats.

#include <string>
#include <vector>

#include <json.hpp>

#include "krff/types.hpp"

namespace krff::detail {

inline nlohmann::json mat_rows(const Mat& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
  return flat;
}

inline Mat mat_from_rows(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                         const char* what) {
  const auto flat = j.get<std::vector<double>>();
  require(static_cast<Eigen::Index>(flat.size()) == rows * cols,
          std::string(what) + ": matrix has " + std::to_string(flat.size()) +
              " entries, expected " + std::to_string(rows * cols));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k)
      m(i, k) = flat[static_cast<std::size_t>(i * cols + k)];
  return m;
}

// Complex matrices are stored as row-major [re, im] pairs.
inline nlohmann::json cmat_rows(const CMat& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      out.push_back({m(i, j).real(), m(i, j).imag()});
  return out;
}

inline CMat cmat_from_rows(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                           const char* what) {
  require(j.is_array() && static_cast<Eigen::Index>(j.size()) == rows * cols,
          std::string(what) + ": complex matrix has wrong entry count");
  CMat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) {
      const auto& e = j[static_cast<std::size_t>(i * cols + k)];
      m(i, k) = cplx(e.at(0).get<double>(), e.at(1).get<double>());
    }
  return m;
}

inline std::vector<double> vec_list(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace krff::detail
