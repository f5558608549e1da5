#include "ipl/tensor.hpp"

namespace ipl::nn {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 1) throw ShapeMismatch("shape_numel: every dimension must be >= 1");
    n *= d;
  }
  return n;
}

}  // namespace ipl::nn
