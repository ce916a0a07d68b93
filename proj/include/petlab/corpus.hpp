#pragma once

#include <string>

#include "petlab/datasets.hpp"

namespace petlab {

// PIMG1 corpus layout (little-endian):
//   magic "PIMG1", u32 count, u16 height, u16 width, u8 channels,
//   per record: u16 label, f32 pixels [C*H*W],
//   trailing u64 FNV-1a checksum over everything before it.
void save_corpus(const std::string& path, const Dataset& dataset);
Dataset load_corpus(const std::string& path);

}  // namespace petlab
