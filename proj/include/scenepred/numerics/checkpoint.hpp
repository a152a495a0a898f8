#pragma once

#include "scenepred/numerics/graph.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace scenepred::nn {

inline constexpr const char* kTensorFormat = "scenepred.tensors";
inline constexpr int kTensorFormatVersion = 1;

// {"format": "scenepred.tensors", "version": 1,
//  "tensors": {"<name>": {"shape": [r, c], "values": [...]}, ...}}
// Names are emitted in sorted order; values use shortest round-trip decimal form.
nlohmann::json tensors_to_json(const ParameterSet& tensors);
ParameterSet tensors_from_json(const nlohmann::json& doc);

void save_tensors(const std::filesystem::path& path, const ParameterSet& tensors);
ParameterSet load_tensors(const std::filesystem::path& path);

}  // namespace scenepred::nn

namespace scenepred::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes to a sibling temp file then renames over `path`.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace scenepred::io
