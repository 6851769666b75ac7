#pragma once

// Binary container for parameter snapshots and checkpoints:
//   magic (8 bytes) | u64 header length | JSON header | f64 payload | u64 FNV-1a of all preceding bytes
// The header lists every array's name and shape; the payload holds the
// values in that order. Readers verify the trailing hash before decoding.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "duco/nn.hpp"

namespace duco {

struct ArchiveArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Archive {
  nlohmann::json header = nlohmann::json::object();
  std::vector<ArchiveArray> arrays;

  void add_parameters(const std::string& prefix, const std::vector<NamedTensor>& params);
  // Copies "<prefix>.<name>" arrays into params; all names and shapes must
  // match and no parameter may be frozen.
  void restore_parameters(const std::string& prefix, const std::vector<NamedTensor>& params) const;
  const ArchiveArray& find(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const std::string& magic, const Archive& archive);
// Throws std::runtime_error on a missing, truncated or corrupted file.
Archive read_archive(const std::filesystem::path& path, const std::string& magic);

std::uint64_t fnv1a(const std::string& bytes);

}  // namespace duco
