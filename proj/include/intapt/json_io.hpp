#pragma once

#include <json.hpp>

#include <filesystem>

namespace intapt {

/// Pretty-printed JSON; throws StageError when the file cannot be written.
void write_json(const std::filesystem::path &path, const nlohmann::json &j);
/// Throws StageError when the file is missing or malformed.
nlohmann::json read_json(const std::filesystem::path &path);

}  // namespace intapt
