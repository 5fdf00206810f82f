#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "vfamc/volume.hpp"

namespace vfamc {

using Json = nlohmann::json;

// Volumes live on disk as a pair <name>.json (geometry + metadata) and
// <name>.raw (little-endian float32, x fastest). Either path may be given.
std::filesystem::path sidecar_path(const std::filesystem::path& p);
std::filesystem::path raw_path(const std::filesystem::path& p);

// `extra` keys (e.g. "acquisition") are merged into the sidecar.
void write_volume(const std::filesystem::path& path, const Volume& v, const Json& extra = Json::object());

// Reads a volume; the full sidecar is returned through `sidecar` when non-null.
Volume read_volume(const std::filesystem::path& path, Json* sidecar = nullptr);

Json grid_to_json(const Grid& g);
Grid grid_from_json(const Json& j);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);
void write_text(const std::filesystem::path& path, const std::string& text);

// Hex SHA-256 of a file's bytes or of a string.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_string(const std::string& bytes);

}  // namespace vfamc
