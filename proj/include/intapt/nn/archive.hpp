#pragma once

// Binary parameter archives and parameter fingerprints.
//
// Layout: "INTAPTCK" | u32 version | u64 header length | JSON header |
// column-major float64 payload. The header records tensor names/shapes, the
// archive kind, free-form metadata and the SHA-256 of the payload.

#include "intapt/nn/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace intapt::nn {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  std::string kind;
  nlohmann::json meta;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

/// SHA-256 over names, shapes and raw bytes of every parameter, in order.
std::string fingerprint(const ConstParameterList &params);

void write_archive(const std::filesystem::path &path, const std::string &kind,
                   const nlohmann::json &meta, const ConstParameterList &params);
Archive read_archive(const std::filesystem::path &path, const std::string &expected_kind);
/// Copies archived tensors into params by name; shapes must match exactly.
void assign(const Archive &archive, const ParameterList &params);

}  // namespace intapt::nn
