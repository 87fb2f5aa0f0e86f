#pragma once

// Checkpoint layout:
//   "MESA1"
//   u64 manifest byte length, then UTF-8 lines "name<TAB>d0xd1<TAB>offset\n"
//   parameter data as little-endian float32, offsets counted in elements

#include <filesystem>

#include "mesanet/model.hpp"
#include "mesanet/params.hpp"

namespace mesanet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);

// Reads every tensor in file order; decay flags are not stored.
ParameterSet read_checkpoint(const std::filesystem::path& path);

// Reads and checks names and shapes against a freshly initialized model.
ParameterSet load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace mesanet
