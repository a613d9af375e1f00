#pragma once

#include <string>
#include <vector>

#include "btdm/tensor.hpp"

namespace btdm {

// Tiles [C,H,W] frames (values in [-1,1]) into one RGB PNG, `cols` per row.
void write_png_grid(const std::string& path, const std::vector<Tensor>& frames, int cols);

}  // namespace btdm
