#pragma once

#include "gtm/model.hpp"
#include "gtm/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gtm {

inline constexpr char kSceneMagic[4] = {'G', 'T', 'M', 'S'};
inline constexpr char kCheckpointMagic[4] = {'G', 'T', 'M', 'C'};
inline constexpr std::uint16_t kSceneVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Serialized `.gtms` bytes. All integers and floats little-endian; floats
/// are 32-bit, so models held in double precision lose precision.
std::vector<std::uint8_t> encode_scene(const SceneModel<float>& model);
SceneModel<float> decode_scene(std::span<const std::uint8_t> bytes);

void save_scene(const SceneModel<float>& model, const std::filesystem::path& path);
SceneModel<float> load_scene(const std::filesystem::path& path);

/// Scene plus optimizer moments, adaptation statistics and iteration count.
void save_checkpoint(const TrainerState<float>& state, const std::filesystem::path& path);
TrainerState<float> load_checkpoint(const std::filesystem::path& path);

/// Reads a whole file; throws ConfigError if it cannot be opened.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace gtm
