#pragma once

#include <string>
#include <vector>

#include "dadapt/autodiff.hpp"

namespace dadapt {

// Checkpoints hold the named parameter list of one store, values
// row-major, entries in store order, plus a checksum over the raw
// 64-bit payload. Rewriting the same store yields identical bytes.

void save_params(const ad::ParamStore& store, const std::string& path);

// Populates an existing store; names, shapes and order must match the
// file exactly. Throws IntegrityError on checksum/version/layout
// mismatch, IoError when the file cannot be read.
void load_params(ad::ParamStore& store, const std::string& path);

std::vector<std::string> checkpoint_param_names(const std::string& path);

}  // namespace dadapt
