#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gradtrace/toy_lm.hpp"

namespace gradtrace {

// Dataset files: one JSON object per line,
//   {"id": 7, "prompt_tokens": [3, 9], "generation_tokens": [4, 4, 1]}
// Blank lines are ignored. Ids must be unique non-negative integers.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset parse_dataset(const std::string& text);
std::string format_dataset(const Dataset& data);

// Model checkpoint, little-endian:
//   "GTLM" | u32 version | u64 vocab | u64 window | u64 embed | u64 hidden
//   | u64 parameter count | f64 x count (LayerMap order) | u64 epochs | f64 eta
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ToyLM& model);
ToyLM load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const ToyLM& model);
ToyLM decode_checkpoint(std::span<const std::uint8_t> bytes);

// Little-endian byte helpers shared by the binary formats.
namespace le {
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
std::uint16_t get_u16(const std::uint8_t* p);
std::uint32_t get_u32(const std::uint8_t* p);
std::uint64_t get_u64(const std::uint8_t* p);
double get_f64(const std::uint8_t* p);
}  // namespace le

// FNV-1a, 64-bit.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);
// FNV-1a steps over 64-bit little-endian words, then over the trailing
// bytes. About eight times faster than fnv1a64 on long records.
std::uint64_t fnv1a64_words(std::span<const std::uint8_t> bytes,
                            std::uint64_t basis = 0xcbf29ce484222325ULL);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace gradtrace
