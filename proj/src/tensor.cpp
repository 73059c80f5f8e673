#include <algorithm>
#include <cmath>

#include "step/tensor.hpp"

namespace step {

bool Matrix::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const Matrix& m) {
  return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

}  // namespace step
