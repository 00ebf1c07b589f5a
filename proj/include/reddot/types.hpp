#pragma once

#include <Eigen/Dense>

namespace reddot {

// Feature rows are stored row-major: one record per row, `dim` columns.
// Row-major keeps the in-memory layout identical to the on-disk layout.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = Vector<float>;
using VectorD = Vector<double>;

}  // namespace reddot
