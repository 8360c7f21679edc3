#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "onestage/tensor.hpp"

namespace onestage {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
  bool decay = true;
};

/// A deployable child stored alongside the tensors. Its tensors live in the
/// main manifest under `prefix`.
struct ChildSection {
  std::string config;
  std::string prefix;
  std::map<std::string, std::string> meta;
};

/// Binary container: header, tensor manifest (name, shape, byte offset),
/// child sections, then one contiguous little-endian float32 payload.
/// Layout is in docs/formats.md.
struct Checkpoint {
  std::uint64_t space_hash = 0;
  std::int64_t step = 0;
  std::uint64_t global_seed = 0;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;
  std::vector<ChildSection> children;

  const NamedTensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
/// Throws IoError on malformed input, naming the byte offset reached.
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

/// Writes through a temporary file and rename, so readers never see a
/// partial checkpoint.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace onestage
