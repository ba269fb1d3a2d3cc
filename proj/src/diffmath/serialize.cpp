#include "it3d/diffmath/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace it3d {

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::uint32_t le = to_le(v);
  os.write(reinterpret_cast<const char*>(&le), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t le = 0;
  if (!is.read(reinterpret_cast<char*>(&le), 4)) throw std::runtime_error("read_tensor: truncated header");
  return to_le(le);
}

}  // namespace

std::uint64_t tensor_record_bytes(const Shape& shape) {
  return 4u * (1u + shape.size()) + 4u * static_cast<std::uint64_t>(shape_numel(shape));
}

void append_f32_le(std::vector<std::uint8_t>& out, std::span<const float> values) {
  const std::size_t base = out.size();
  out.resize(base + 4 * values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(out.data() + base + 4 * i, &le, 4);
  }
}

std::vector<float> decode_f32_le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4 != 0) throw std::runtime_error("decode_f32_le: byte count not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t le;
    std::memcpy(&le, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_le(le));
  }
  return out;
}

void write_tensor(std::ostream& os, const Tensorf& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
  std::vector<std::uint8_t> payload;
  payload.reserve(static_cast<std::size_t>(4 * t.size()));
  append_f32_le(payload, std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("write_tensor: stream failure");
}

Tensorf read_tensor(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw std::runtime_error("read_tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = get_u32(is);
    if (e == 0) throw std::runtime_error("read_tensor: zero extent");
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<std::uint8_t> bytes(4 * n);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw std::runtime_error("read_tensor: truncated payload");
  }
  const std::vector<float> values = decode_f32_le(bytes);
  Tensorf t(shape);
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

void save_tensor_file(const std::string& path, const Tensorf& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_tensor(os, t);
}

Tensorf load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_tensor(is);
}

}  // namespace it3d
