#pragma once

// "LBNZ v1" container:
//
//   offset 0   magic            4C 42 4E 5A ("LBNZ")
//   offset 4   version          u32 LE (= 1)
//   offset 8   manifest length  u64 LE
//   offset 16  manifest         UTF-8 JSON
//   ...        payloads         raw little-endian tensors, manifest order,
//                               offsets relative to the first payload byte
//   end - 4    crc32            u32 LE, over every preceding byte
//
// Writers always emit f64 tensors; readers accept f32 and widen.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lbyl/network.hpp"

namespace lbyl {

inline constexpr std::uint32_t kContainerVersion = 1;

std::vector<std::uint8_t> serialize(const NetworkModel& model);
NetworkModel deserialize(std::span<const std::uint8_t> bytes);

/// Labelled probe or evaluation samples, all of one shape.
struct Dataset {
  Shape3 sample_shape;
  std::vector<Tensor3> inputs;
  std::vector<std::int32_t> labels;

  std::size_t size() const noexcept { return inputs.size(); }
  bool operator==(const Dataset&) const = default;
};

std::vector<std::uint8_t> serialize_dataset(const Dataset& data);
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

NetworkModel load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const NetworkModel& model);
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const Dataset& data);

}  // namespace lbyl
