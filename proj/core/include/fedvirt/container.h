#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "fedvirt/tensor.h"

// Named-tensor container used for model checkpoints, virtual datasets, labeled
// datasets and client reports. Layout (docs/container.md):
//
//   8 bytes   magic "FEDVIRT1"
//   4 bytes   header length L, unsigned little-endian
//   L bytes   UTF-8 JSON {"format_version", "kind", "meta", "tensors": [{"name", "shape"}]}
//   payloads  each tensor's values as little-endian float64, row-major, in header order
namespace fedvirt {

inline constexpr int kContainerVersion = 1;

struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;

  const Tensor& tensor(std::string_view name) const;
};

std::string encode_container(const Container& c);
// Throws ParseError with the byte offset of the first problem.
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace fedvirt
