#pragma once

// Little-endian framing shared by checkpoints and training-state files:
// magic, u32 version, u64 header length, JSON header, then named blocks
// {u32 name length, name, u32 rank, u64 dims..., values}.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tet/autodiff.h"

namespace tet::binio {

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw DataError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(buf[i]) << (8 * i);
  return v;
}

inline void write_preamble(std::ostream& out, const char (&magic)[9], std::uint32_t version,
                           const nlohmann::json& header) {
  out.write(magic, 8);
  put_le<std::uint32_t>(out, version);
  const std::string text = header.dump();
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), std::streamsize(text.size()));
}

inline nlohmann::json read_preamble(std::istream& in, const char (&magic)[9],
                                    std::uint32_t version) {
  char m[8];
  if (!in.read(m, 8) || std::memcmp(m, magic, 8) != 0)
    throw DataError(std::string("bad magic, expected ") + std::string(magic, 8));
  const auto v = get_le<std::uint32_t>(in);
  if (v != version)
    throw DataError("unsupported format version " + std::to_string(v));
  const auto len = get_le<std::uint64_t>(in);
  if (len > (1u << 30)) throw DataError("header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), std::streamsize(len))) throw DataError("truncated header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed header: ") + e.what());
  }
}

// Stored element type: float32 for checkpoints, float64 for exact state.
template <typename Stored>
void write_block(std::ostream& out, const std::string& name, const ad::Shape& shape,
                 std::span<const Real> values) {
  put_le<std::uint32_t>(out, std::uint32_t(name.size()));
  out.write(name.data(), std::streamsize(name.size()));
  put_le<std::uint32_t>(out, std::uint32_t(shape.size()));
  for (auto d : shape) put_le<std::uint64_t>(out, d);
  using Bits = std::conditional_t<sizeof(Stored) == 4, std::uint32_t, std::uint64_t>;
  for (Real v : values) put_le<Bits>(out, std::bit_cast<Bits>(static_cast<Stored>(v)));
}

struct Block {
  std::string name;
  ad::Shape shape;
  std::vector<Real> values;
};

template <typename Stored>
Block read_block(std::istream& in) {
  Block b;
  const auto name_len = get_le<std::uint32_t>(in);
  if (name_len > 4096) throw DataError("block name too long");
  b.name.resize(name_len);
  if (!in.read(b.name.data(), name_len)) throw DataError("truncated block name");
  const auto rank = get_le<std::uint32_t>(in);
  if (rank > 8) throw DataError("block " + b.name + " has implausible rank");
  for (std::uint32_t i = 0; i < rank; ++i) b.shape.push_back(get_le<std::uint64_t>(in));
  const std::size_t n = ad::numel(b.shape);
  if (n > (std::size_t{1} << 32)) throw DataError("block " + b.name + " too large");
  b.values.resize(n);
  using Bits = std::conditional_t<sizeof(Stored) == 4, std::uint32_t, std::uint64_t>;
  for (auto& v : b.values) v = static_cast<Real>(std::bit_cast<Stored>(get_le<Bits>(in)));
  return b;
}

}  // namespace tet::binio
