#pragma once

#include <cstdint>
#include <random>

namespace raymap::detail {

/// Independent generator for one purpose (`id`) under a user seed.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace raymap::detail
