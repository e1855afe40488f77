#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "lprobe/network.hpp"

namespace lprobe {

/// Weight archive layout:
///
///   8 bytes   magic "LPROBE01"
///   8 bytes   little-endian uint64 header length L
///   L bytes   UTF-8 JSON header: format_version, network spec, tensor directory
///             entries {name, shape, offset} with offsets relative to the payload
///   payload   raw little-endian float32 tensors in directory order
///
/// A calibrated sigma profile is stored as extra tensors "sigma.0", "sigma.1", …
/// (indexed by injection slot) plus a "sigma" header object.
inline constexpr char kArchiveMagic[8] = {'L', 'P', 'R', 'O', 'B', 'E', '0', '1'};
inline constexpr int kArchiveFormatVersion = 1;

struct Archive {
  Network network;
  std::optional<SigmaProfile> sigma;
};

void save_archive(const std::filesystem::path& path, const Network& network,
                  const std::optional<SigmaProfile>& sigma = std::nullopt);
Archive load_archive(const std::filesystem::path& path);

std::string serialize_archive(const Network& network, const std::optional<SigmaProfile>& sigma = std::nullopt);
Archive deserialize_archive(const std::string& bytes);

}  // namespace lprobe
