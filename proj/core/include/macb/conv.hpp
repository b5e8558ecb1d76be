#pragma once

#include <cstddef>
#include <vector>

#include "macb/autodiff.hpp"

namespace macb::ad {

// Stride-1 direct convolution over 1, 2 or 3 spatial axes.
//   input  [C_in, S1, ..., Sr]
//   weight [C_out, C_in / groups, K1, ..., Kr]
// Per-axis dilation and zero padding; empty vectors mean 1 and 0. Output
// extent along axis i is S_i + pad_lo_i + pad_hi_i - dilation_i * (K_i - 1).
struct ConvSpec {
  std::size_t groups = 1;
  std::vector<std::size_t> dilation;
  std::vector<std::size_t> pad_lo;
  std::vector<std::size_t> pad_hi;
};

// "Same" padding for the given kernel extents. Even effective extents pad one
// more on the high side.
ConvSpec same_padding(const std::vector<std::size_t>& kernel, const std::vector<std::size_t>& dilation,
                      std::size_t groups = 1);

Var conv(Var input, Var weight, const ConvSpec& spec);
Var conv1d(Var input, Var weight, const ConvSpec& spec);
Var conv2d(Var input, Var weight, const ConvSpec& spec);
Var conv3d(Var input, Var weight, const ConvSpec& spec);

}  // namespace macb::ad
