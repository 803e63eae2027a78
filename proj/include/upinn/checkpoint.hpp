#pragma once

// Checkpoint container:
//   "UPINNCK\0" | u32 version | u64 config hash | u64 header bytes |
//   JSON header | f64 parameter arrays (little-endian)
// Arrays follow the header's network order: for each group, the body and
// then its heads. Files are written to a temporary name and renamed.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "upinn/nn.hpp"

namespace upinn::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
  std::string kind = "body";  // "body" or "transfer"
  nlohmann::json config;      // resolved experiment document
  std::uint64_t config_hash = 0;
  nn::MultiHeadModel model;
  std::size_t epoch = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

void save(const std::string& path, const Checkpoint& ck);
Checkpoint load(const std::string& path);

// Serialized bytes, exposed for byte-level comparisons in tests.
std::string serialize(const Checkpoint& ck);
Checkpoint deserialize(const std::string& bytes);

nlohmann::json spec_to_json(const nn::MLPSpec& s);
nn::MLPSpec spec_from_json(const nlohmann::json& j);

}  // namespace upinn::checkpoint
