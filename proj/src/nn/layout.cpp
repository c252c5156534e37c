#include "nn/layout.hpp"

#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::nn {

size_t ParamLayout::add(const std::string& name, int rows, int cols,
                        InitKind init, double scale) {
  if (rows < 1 || cols < 1)
    throw InvalidArgumentError("ParamLayout: tensor " + name +
                               " has non-positive shape");
  for (const auto& t : tensors_)
    if (t.name == name)
      throw InvalidArgumentError("ParamLayout: duplicate tensor " + name);
  TensorSpec t{name, rows, cols, total_, init, scale};
  tensors_.push_back(t);
  total_ += static_cast<size_t>(rows) * cols;
  return t.offset;
}

const TensorSpec& ParamLayout::find(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw InvalidArgumentError("ParamLayout: no tensor named " + name);
}

void init_params(const ParamLayout& layout, std::span<double> params,
                 uint64_t seed) {
  if (params.size() != layout.size())
    throw ShapeError("init_params: buffer size mismatch");
  Rng rng(seed);
  for (const auto& t : layout.tensors()) {
    MatMap m(params.data() + t.offset, t.rows, t.cols);
    switch (t.init) {
      case InitKind::Zeros:
        m.setZero();
        break;
      case InitKind::Ones:
        m.setOnes();
        break;
      case InitKind::ScaledNormal:
      case InitKind::SmallNormal: {
        const double s = t.init_scale;
        for (int c = 0; c < t.cols; ++c)
          for (int r = 0; r < t.rows; ++r) m(r, c) = s * rng.normal();
        break;
      }
    }
  }
}

}  // namespace xnn::nn
