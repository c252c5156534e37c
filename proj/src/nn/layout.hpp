#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace xnn::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

enum class InitKind { Zeros, Ones, ScaledNormal, SmallNormal };

struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  InitKind init = InitKind::Zeros;
  double init_scale = 0.0;
};

// All parameters of a network live in one flat double vector; the layout maps
// named tensors to offsets. Keeps the optimizer, checkpointing and the
// finite-difference oracle trivial.
class ParamLayout {
 public:
  size_t add(const std::string& name, int rows, int cols, InitKind init,
             double scale = 0.0);
  size_t size() const { return total_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec& find(const std::string& name) const;

 private:
  std::vector<TensorSpec> tensors_;
  size_t total_ = 0;
};

inline MatMap view(double* base, const TensorSpec& t) {
  return MatMap(base + t.offset, t.rows, t.cols);
}
inline CMatMap view(const double* base, const TensorSpec& t) {
  return CMatMap(base + t.offset, t.rows, t.cols);
}

// Seed-deterministic initialization; draw order follows registration order,
// column-major within a tensor.
void init_params(const ParamLayout& layout, std::span<double> params,
                 uint64_t seed);

}  // namespace xnn::nn
