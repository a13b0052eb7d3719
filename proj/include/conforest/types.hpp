#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace conforest {

// Dense double-precision types used across the library. Regression at the
// scales handled here is memory-light, so everything is dynamic-size.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Array = Eigen::ArrayXd;
using Index = Eigen::Index;

using ConstMatrixRef = Eigen::Ref<const Matrix>;
using ConstVectorRef = Eigen::Ref<const Vector>;

}  // namespace conforest
