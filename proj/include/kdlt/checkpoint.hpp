#pragma once

// Binary recognizer checkpoints.
//
//   "KDLT" | u16 version | config: 9 x i32 | u32 entry count
//   per entry: u16 name length, name bytes, u8 rank, rank x i32 dims, f32 payload
//   u64 FNV-1a over every preceding byte
//
// All integers and floats are little-endian regardless of host.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kdlt/recognizer.hpp"

namespace kdlt::io {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    rec::RecognizerConfig config;
    std::vector<rec::NamedTensor> weights;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError (magic, version) or CorruptionError (checksum, truncation, bad layout).
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const rec::Recognizer& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);
rec::Recognizer load_recognizer(const std::filesystem::path& path);

}  // namespace kdlt::io
