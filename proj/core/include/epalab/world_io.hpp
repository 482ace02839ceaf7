#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "epalab/core.hpp"

namespace epalab {

inline constexpr int kWorldFormatVersion = 1;

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

std::string hex64(std::uint64_t v);

/// World document without the "hash" member, serialized compactly with
/// sorted keys. This byte string is what world_hash digests.
std::string canonical_world_json(const World& world);

std::uint64_t world_hash(const World& world);

/// {version, seed, P, V, lengths, rewards, reference_logits[, on_topic], hash}.
/// -inf rewards are written as the string "-inf".
nlohmann::json world_to_json(const World& world);

/// Parses a world document. A present "hash" member must match the content,
/// otherwise Error(Integrity) is thrown. Malformed documents raise Error(Data).
World world_from_json(const nlohmann::json& doc);

void save_world(const std::filesystem::path& path, const World& world);
World load_world(const std::filesystem::path& path);

}  // namespace epalab
