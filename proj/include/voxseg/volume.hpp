#pragma once

#include <array>
#include <string>

#include "voxseg/tensor.hpp"

namespace voxseg {

/// A scalar image volume: rank-3 [D,H,W] float data plus voxel spacing in
/// millimetres (D,H,W order) and a case id.
struct Volume {
  Tensor data;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;
};

/// A segmentation map paired with a Volume: values are exactly 0 (background),
/// 1 (head) or 2 (body), stored as floats for uniformity with Tensor.
struct LabelMap {
  Tensor labels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;
};

}  // namespace voxseg
