#pragma once

// Checkpoint container for named parameter tensors.
//
// Layout (little-endian): magic "BOCK", version u32, then one record per
// parameter in ascending name order: name length u32, utf-8 name, rank u32,
// extents u64 each, values f64 each (row-major). No trailing index; readers
// consume records until end of file.

#include <map>
#include <string>

#include "cliporder/tensor.hpp"

namespace cliporder {

using ParamMap = std::map<std::string, Tensor>;

void save_checkpoint(const std::string& path, const ParamMap& params);
ParamMap load_checkpoint(const std::string& path);

}  // namespace cliporder
