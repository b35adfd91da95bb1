#pragma once

#include <map>
#include <string>

#include "inrseg/tensor.hpp"

namespace inrseg {

// Single-file checkpoint: magic, manifest (names, shapes, offsets, string
// metadata) as JSON, then little-endian float64 payloads. Meta carries
// non-tensor state (step counts, config hash) as strings.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace inrseg
