#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pepo/errors.hpp"
#include "pepo/policy.hpp"

// Flat little-endian binary container:
//
//   "PEPO" | version u32 | vocab u32 | model_dim u32 | layers u32 | heads u32 |
//   ffn_dim u32 | max_positions u32 | vision_dim u32 | seed u64 |
//   freeze_vision u8 | block_count u32 |
//   block_count x { name_len u16 | name | rank u8 | dims u32 x rank | f64 data }
//
// The same container carries policy checkpoints and hidden-state dumps; the
// config header always describes the policy the blocks belong to.
namespace pepo::checkpoint {

inline constexpr std::array<char, 4> kMagic = {'P', 'E', 'P', 'O'};
inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw std::runtime_error("checkpoint: unexpected end of data");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline std::uint32_t narrow32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFULL) throw std::invalid_argument(std::string("checkpoint: ") + what + " too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

struct Container {
  PolicyConfig config;
  std::vector<NamedTensor> blocks;
};

inline void write(std::ostream& os, const Container& c) {
  os.write(kMagic.data(), kMagic.size());
  detail::put<std::uint32_t>(os, kFormatVersion);
  const auto& p = c.config;
  detail::put<std::uint32_t>(os, detail::narrow32(p.vocab_size, "vocab_size"));
  detail::put<std::uint32_t>(os, detail::narrow32(p.model_dim, "model_dim"));
  detail::put<std::uint32_t>(os, detail::narrow32(p.num_layers, "num_layers"));
  detail::put<std::uint32_t>(os, detail::narrow32(p.num_heads, "num_heads"));
  detail::put<std::uint32_t>(os, detail::narrow32(p.ffn_dim, "ffn_dim"));
  detail::put<std::uint32_t>(os, detail::narrow32(p.max_positions, "max_positions"));
  detail::put<std::uint32_t>(os, detail::narrow32(p.vision_dim, "vision_dim"));
  detail::put<std::uint64_t>(os, p.seed);
  detail::put<std::uint8_t>(os, p.freeze_vision ? 1 : 0);
  detail::put<std::uint32_t>(os, detail::narrow32(c.blocks.size(), "block count"));
  for (const auto& b : c.blocks) {
    if (b.name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: block name too long");
    if (b.value.rank() > 0xFF) throw std::invalid_argument("checkpoint: rank too large");
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(b.name.size()));
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(b.value.rank()));
    for (std::size_t d : b.value.shape()) detail::put<std::uint32_t>(os, detail::narrow32(d, "dimension"));
    for (double v : b.value.data()) detail::put<double>(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline Container read(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("checkpoint: bad magic bytes");
  }
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Container c;
  auto& p = c.config;
  p.vocab_size = detail::get<std::uint32_t>(is);
  p.model_dim = detail::get<std::uint32_t>(is);
  p.num_layers = detail::get<std::uint32_t>(is);
  p.num_heads = detail::get<std::uint32_t>(is);
  p.ffn_dim = detail::get<std::uint32_t>(is);
  p.max_positions = detail::get<std::uint32_t>(is);
  p.vision_dim = detail::get<std::uint32_t>(is);
  p.seed = detail::get<std::uint64_t>(is);
  p.freeze_vision = detail::get<std::uint8_t>(is) != 0;
  const auto count = detail::get<std::uint32_t>(is);
  c.blocks.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get<std::uint16_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated block name");
    const auto rank = detail::get<std::uint8_t>(is);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = detail::get<std::uint32_t>(is);
    std::vector<double> data(Tensor::element_count(shape));
    for (double& v : data) v = detail::get<double>(is);
    c.blocks.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return c;
}

inline void write_file(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write(os, c);
}

inline Container read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingInputError("checkpoint: cannot open " + path);
  return read(is);
}

inline void save_policy(const std::string& path, const PolicyState& state) {
  write_file(path, Container{state.config(), state.params()});
}

inline PolicyState load_policy(const std::string& path) {
  Container c = read_file(path);
  c.config.validate();
  return PolicyState(c.config, std::move(c.blocks));
}

}  // namespace pepo::checkpoint
