#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "core/tensor.hpp"

namespace colidr {

// "CLDR" tensor container: magic, u32 format version (1), u32 tensor count,
// then per tensor u32 name length, UTF-8 name, u32 ndim, u32 dims,
// little-endian f64 payload. All integers little-endian. Entries round-trip
// byte-exactly.
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_tensor_container(const std::string& path);

// Parallel bitmap container for masks ("CLDB"): same framing, payload is
// LSB-first packed bits, ceil(n/8) bytes per record.
struct NamedBitmap {
  std::string name;
  Shape shape;
  std::vector<bool> bits;  // row-major
};

void write_bitmap_container(const std::string& path, const std::vector<NamedBitmap>& entries);
std::vector<NamedBitmap> read_bitmap_container(const std::string& path);

}  // namespace colidr
