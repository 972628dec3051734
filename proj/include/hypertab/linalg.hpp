#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hypertab {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Matf = Mat<float>;

// Round every entry through IEEE-754 binary32. Applied to any tensor that is
// persisted, so in-memory values and file round-trips agree bit for bit.
template <class T>
inline void quantize_f32(Mat<T>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      m(i, j) = static_cast<T>(static_cast<float>(m(i, j)));
}

template <class T>
inline bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

template <class T>
inline void require_finite(const Mat<T>& m, const std::string& what) {
  if (!m.allFinite()) throw std::runtime_error(what + ": non-finite values");
}

// Column sum with the addends accumulated in ascending value order, making the
// result invariant to row permutations of the input.
template <class T>
inline Mat<T> sorted_colwise_mean(const Mat<T>& m) {
  Mat<T> out(1, m.cols());
  std::vector<T> col(static_cast<size_t>(m.rows()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) col[static_cast<size_t>(i)] = m(i, j);
    std::sort(col.begin(), col.end());
    T s = T(0);
    for (T v : col) s += v;
    out(0, j) = s / static_cast<T>(m.rows());
  }
  return out;
}

}  // namespace hypertab
