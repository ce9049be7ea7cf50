#pragma once

#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "avf/diffcore/adam.hpp"
#include "avf/diffcore/param_store.hpp"

namespace avf::diff {

// Container layout:
//   8 bytes  magic "AVFCKPT1"
//   8 bytes  little-endian u64 header length
//   header   JSON {version, names, shapes, trainable, dtype:"f64",
//                  adam:{beta1, beta2, eps, step, moments}, rng_seed, meta}
//   payload  raw little-endian f64 values: parameters in name order, then
//            for each name in adam.moments its first and second moment.

struct Checkpoint {
  ParamStore params;
  std::optional<AdamState> adam;
  nlohmann::json meta = nlohmann::json::object();
};

/// Writes atomically (temporary file then rename).
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const AdamState* adam,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Throws std::runtime_error on bad magic, malformed header or truncated payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace avf::diff
