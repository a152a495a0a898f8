#include "scenepred/datagen.hpp"
#include "scenepred/numerics/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace scenepred::datagen {

using nlohmann::json;

Split split(std::vector<Episode> episodes, double ratio, std::mt19937_64& rng) {
  if (episodes.empty()) throw std::invalid_argument("split: no episodes");
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split: ratio must lie in (0, 1)");
  std::shuffle(episodes.begin(), episodes.end(), rng);
  const auto cut = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(episodes.size())));
  Split out;
  out.train.assign(std::make_move_iterator(episodes.begin()),
                   std::make_move_iterator(episodes.begin() + static_cast<std::ptrdiff_t>(cut)));
  out.test.assign(std::make_move_iterator(episodes.begin() + static_cast<std::ptrdiff_t>(cut)),
                  std::make_move_iterator(episodes.end()));
  return out;
}

json snapshot_to_json(const scene::SceneSnapshot& s) {
  json vehicles = json::array();
  for (const auto& v : s.vehicles)
    vehicles.push_back({{"id", v.id}, {"x", v.x}, {"y", v.y}, {"v", v.v}, {"length", v.length}, {"width", v.width}, {"lane", v.lane}});
  return {{"timestamp", s.timestamp},
          {"predicted_id", s.predicted_id},
          {"lanes", {{"count", s.lanes.lane_count}, {"width", s.lanes.lane_width}}},
          {"vehicles", vehicles}};
}

scene::SceneSnapshot snapshot_from_json(const json& j) {
  scene::SceneSnapshot s;
  try {
    s.timestamp = j.value("timestamp", 0.0);
    s.predicted_id = j.at("predicted_id").get<int>();
    if (j.contains("lanes")) {
      s.lanes.lane_count = j.at("lanes").value("count", s.lanes.lane_count);
      s.lanes.lane_width = j.at("lanes").value("width", s.lanes.lane_width);
    }
    for (const auto& v : j.at("vehicles")) {
      scene::VehicleState st;
      st.id = v.at("id").get<int>();
      st.x = v.at("x").get<double>();
      st.y = v.at("y").get<double>();
      st.v = v.at("v").get<double>();
      st.length = v.value("length", st.length);
      st.width = v.value("width", st.width);
      st.lane = v.at("lane").get<int>();
      s.vehicles.push_back(st);
    }
  } catch (const json::exception& e) {
    throw scene::SceneError(std::string("malformed snapshot: ") + e.what());
  }
  return s;
}

// Episodes store frames compactly: one [id, x, y, v, length, width, lane] array per vehicle.
json episode_to_json(const Episode& e) {
  json frames = json::array();
  for (const auto& f : e.frames) {
    json vs = json::array();
    for (const auto& v : f.vehicles) vs.push_back({v.id, v.x, v.y, v.v, v.length, v.width, v.lane});
    frames.push_back({{"t", f.timestamp}, {"vehicles", vs}});
  }
  const auto& lanes = e.frames.empty() ? scene::LaneGeometry{} : e.frames.front().lanes;
  const int predicted = e.frames.empty() ? 0 : e.frames.front().predicted_id;
  return {{"version", kDatasetVersion},
          {"id", e.id},
          {"seed", e.seed},
          {"source", e.source},
          {"behavior", std::string(scene::to_string(e.behavior))},
          {"label_area", e.label_area},
          {"reference_id", e.reference_id ? json(*e.reference_id) : json(nullptr)},
          {"sample_rate", e.sample_rate},
          {"lanes", {{"count", lanes.lane_count}, {"width", lanes.lane_width}}},
          {"predicted_id", predicted},
          {"ttlc", e.ttlc},
          {"insertion_lateral", e.insertion_lateral},
          {"frames", frames}};
}

Episode episode_from_json(const json& j) {
  Episode e;
  try {
    const int version = j.at("version").get<int>();
    if (version != kDatasetVersion) throw io::IoError("unsupported dataset record version " + std::to_string(version));
    e.id = j.at("id").get<std::uint64_t>();
    e.seed = j.value("seed", std::uint64_t{0});
    e.source = j.value("source", std::string("synthetic"));
    e.behavior = scene::parse_motion_kind(j.at("behavior").get<std::string>());
    e.label_area = j.at("label_area").get<int>();
    if (!j.at("reference_id").is_null()) e.reference_id = j.at("reference_id").get<int>();
    e.sample_rate = j.value("sample_rate", kSampleRate);
    scene::LaneGeometry lanes{j.at("lanes").at("count").get<int>(), j.at("lanes").at("width").get<double>()};
    const int predicted = j.at("predicted_id").get<int>();
    e.ttlc = j.at("ttlc").get<std::vector<double>>();
    e.insertion_lateral = j.at("insertion_lateral").get<double>();
    for (const auto& f : j.at("frames")) {
      scene::SceneSnapshot s;
      s.timestamp = f.at("t").get<double>();
      s.predicted_id = predicted;
      s.lanes = lanes;
      for (const auto& v : f.at("vehicles")) {
        if (!v.is_array() || v.size() != 7) throw io::IoError("vehicle entry must have 7 fields");
        s.vehicles.push_back({v[0].get<int>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>(),
                              v[4].get<double>(), v[5].get<double>(), v[6].get<int>()});
      }
      e.frames.push_back(std::move(s));
    }
  } catch (const json::exception& ex) {
    throw io::IoError(std::string("malformed episode record: ") + ex.what());
  }
  if (e.ttlc.size() != e.frames.size()) throw io::IoError("episode ttlc length does not match frame count");
  if (e.label_area < 1 || e.label_area > scene::kNumAreas) throw io::IoError("episode label area out of range");
  return e;
}

std::string dataset_to_jsonl(std::span<const Episode> episodes) {
  std::string out;
  for (const auto& e : episodes) {
    out += episode_to_json(e).dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const Episode> episodes) {
  io::write_text_atomic(path, dataset_to_jsonl(episodes));
}

std::vector<Episode> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io::IoError("cannot open dataset " + path.string());
  std::vector<Episode> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(episode_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw io::IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const io::IoError& e) {
      throw io::IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace scenepred::datagen
