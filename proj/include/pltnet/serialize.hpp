#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "pltnet/tensor.hpp"

namespace pltnet {

// Flat tensor binary format: magic "PLTN", format version u16, rank u16,
// extents u64 little-endian, then the data as little-endian float32,
// row-major.
inline constexpr uint16_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

std::string read_text_file(const std::string& path);

// Write-temp-then-rename so readers never observe partial files.
void atomic_write_bytes(const std::string& path, const std::string& bytes);
inline void atomic_write_text(const std::string& path, const std::string& text) {
  atomic_write_bytes(path, text);
}

}  // namespace pltnet
