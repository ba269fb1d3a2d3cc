#pragma once

#include "it3d/diffmath/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace it3d {

/// Binary tensor record: u32 rank, rank x u32 extents, then the f32 payload,
/// all little-endian.
void write_tensor(std::ostream& os, const Tensorf& t);
Tensorf read_tensor(std::istream& is);

/// Size in bytes of the record write_tensor emits for `shape`.
std::uint64_t tensor_record_bytes(const Shape& shape);

void append_f32_le(std::vector<std::uint8_t>& out, std::span<const float> values);
std::vector<float> decode_f32_le(std::span<const std::uint8_t> bytes);

void save_tensor_file(const std::string& path, const Tensorf& t);
Tensorf load_tensor_file(const std::string& path);

}  // namespace it3d
