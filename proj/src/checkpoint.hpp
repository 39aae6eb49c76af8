#pragma once

#include "model.hpp"

namespace unext {

// Binary checkpoint, bit-exact and CRC-validated:
//   magic "UNXT"
//   u32 LE  format version (1)
//   u32 LE  config block length, then that many bytes of key=value lines
//   u32 LE  tensor count (parameters then buffers, model order)
//   per tensor:
//     u32 LE  name length, then the UTF-8 name
//     u32 LE  rank
//     u64 LE  extents[rank]
//     f32 LE  payload (row-major)
//   u32 LE  CRC-32 of all preceding bytes
void save_checkpoint(const Model<float>& model, const std::string& path);

// Rebuilds the architecture from the embedded config, then verifies CRC and
// per-tensor shapes before accepting the payload.
Model<float> load_checkpoint(const std::string& path);

}  // namespace unext
