#pragma once

#include <string>

#include "fmkit/model.hpp"

namespace fmkit {

// Versioned binary container: magic "FMCK" | version u16 LE | body | CRC32(body) u32 LE.
// Body = config text blob + named parameter blobs (name, shape, f64 LE payload).
// Round-trips bit-exactly.
void save_checkpoint(Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace fmkit
