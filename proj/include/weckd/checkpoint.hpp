#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "weckd/backbone.hpp"

namespace weckd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Hex SHA-256 over every parameter's name, dims and f64 bytes, in name order.
std::string parameter_digest(const ParameterSet& params);

// Little-endian "WCKD" container: version, JSON backbone config, then each
// tensor as name, rank, dims and f32 row-major data.
std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace weckd
