#pragma once

#include "protoprp/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace protoprp {

// PTNS tensor container:
//   bytes 0..3  magic "PTNS"
//   byte  4     rank (u8, 1..4)
//   then rank * u32 little-endian dims
//   then prod(dims) * f32 little-endian values, row-major
std::vector<std::uint8_t> ptns_encode(const Tensor& t);
Tensor ptns_decode(const std::vector<std::uint8_t>& bytes, const std::string& origin);

void write_ptns(const std::string& path, const Tensor& t);
Tensor read_ptns(const std::string& path);

// small helpers shared by the file formats
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_file_text(const std::string& path, const std::string& text);
std::string read_file_text(const std::string& path);

} // namespace protoprp
