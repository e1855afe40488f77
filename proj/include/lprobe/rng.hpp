#pragma once

#include <cstdint>
#include <random>

#include "lprobe/tensor.hpp"

namespace lprobe {

/// Engine for stream `stream` of a seed; streams are independent of each other
/// and of how work is split across threads.
inline std::mt19937_64 derived_engine(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline Tensor standard_normal(Shape shape, std::mt19937_64& engine) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : t.data()) v = dist(engine);
  return t;
}

}  // namespace lprobe
