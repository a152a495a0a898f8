#include "scenepred/numerics/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace scenepred::nn {

nlohmann::json tensors_to_json(const ParameterSet& tensors) {
  nlohmann::json out;
  out["format"] = kTensorFormat;
  out["version"] = kTensorFormatVersion;
  nlohmann::json body = nlohmann::json::object();
  for (const auto& [name, t] : tensors) {
    body[name] = {{"shape", t.shape()}, {"values", t.storage()}};
  }
  out["tensors"] = std::move(body);
  return out;
}

ParameterSet tensors_from_json(const nlohmann::json& doc) {
  if (doc.value("format", std::string{}) != kTensorFormat) {
    throw std::invalid_argument("not a scenepred tensor container");
  }
  const int version = doc.value("version", 0);
  if (version != kTensorFormatVersion) {
    throw std::invalid_argument("unsupported tensor container version " + std::to_string(version));
  }
  ParameterSet out;
  for (const auto& [name, entry] : doc.at("tensors").items()) {
    try {
      out.emplace(name, Tensor::from_external(entry.at("shape").get<std::vector<std::size_t>>(),
                                              entry.at("values").get<std::vector<double>>()));
    } catch (const std::exception& e) {
      throw std::invalid_argument("tensor '" + name + "': " + e.what());
    }
  }
  return out;
}

void save_tensors(const std::filesystem::path& path, const ParameterSet& tensors) {
  io::write_text_atomic(path, tensors_to_json(tensors).dump() + "\n");
}

ParameterSet load_tensors(const std::filesystem::path& path) { return tensors_from_json(io::read_json(path)); }

}  // namespace scenepred::nn

namespace scenepred::io {

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << content;
    if (!os.flush()) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace scenepred::io
