#pragma once

#include <cstdint>
#include <string>

#include "smelt/metaopt.hpp"

namespace smelt {

// On-disk container: magic "SMLT", format version, RunConfig echo (JSON),
// payload, trailing CRC32 of everything before it. Numeric payloads are
// little-endian 64-bit reals with explicit shape headers.
enum class PayloadKind : uint8_t {
  kParamsOnly = 0,  // a single ParamSet (theta_pre or a dense-tuned model)
  kTrainState = 1,  // full pool + router + optimizer state + step counter
  kMask = 2,        // a single hard-concrete mask
};

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PayloadKind kind = PayloadKind::kParamsOnly;
  std::string config_json;  // RunConfig echo, verbatim
  ParamSet params;          // kParamsOnly
  TrainState state;         // kTrainState
  HardConcreteMask mask;    // kMask

  const ParamSet& require_params() const;
  const TrainState& require_state() const;
};

std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

}  // namespace smelt
