#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace sdlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Points are stored one per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Earliest time any integrator or ε-conversion is allowed to reach.
inline constexpr double kTMin = 1e-3;

/// Largest supported data dimension.
inline constexpr int kMaxDim = 16;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sdlab
