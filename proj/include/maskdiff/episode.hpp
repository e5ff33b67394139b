#pragma once

#include <cstdint>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

/// One conditioning instance: region image, background-removed supports of the
/// same class, class id, and the binary ground-truth mask.
struct Episode {
  Tensor<float> x;   // [C,H,W]
  Tensor<float> k;   // [K*C,H,W]
  Tensor<float> y0;  // [1,H,W], values in {0,1}
  int cls = 0;
  std::uint64_t instance_id = 0;
  std::vector<std::uint64_t> support_ids;
};

}  // namespace maskdiff
