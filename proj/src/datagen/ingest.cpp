#include "scenepred/datagen.hpp"
#include "scenepred/numerics/checkpoint.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace scenepred::datagen {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r\"");
    const auto e = cell.find_last_not_of(" \t\r\"");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s, std::size_t line, const std::string& column) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end || !std::isfinite(v))
    throw io::IoError("line " + std::to_string(line) + ": column " + column + " is not a number: '" + s + "'");
  return v;
}

struct Row {
  long frame = 0;
  double x = 0.0, y = 0.0;
  int lane = 0;
  double length = 4.5, width = 1.8;
};

struct Track {
  int id = 0;
  std::vector<Row> rows;
  std::vector<SmoothedSample> smooth;
};

}  // namespace

ColumnMapping ColumnMapping::from_json(const nlohmann::json& j) {
  ColumnMapping m;
  m.vehicle_id = j.value("vehicle_id", m.vehicle_id);
  m.frame = j.value("frame", m.frame);
  m.longitudinal = j.value("longitudinal", m.longitudinal);
  m.lateral = j.value("lateral", m.lateral);
  m.lane = j.value("lane", m.lane);
  m.length = j.value("length", m.length);
  m.width = j.value("width", m.width);
  m.unit_scale = j.value("unit_scale", m.unit_scale);
  m.lateral_sign = j.value("lateral_sign", m.lateral_sign);
  m.lanes_left_to_right = j.value("lanes_left_to_right", m.lanes_left_to_right);
  m.lane_count = j.value("lane_count", m.lane_count);
  m.lane_width = j.value("lane_width", m.lane_width);
  m.sample_rate = j.value("sample_rate", m.sample_rate);
  if (j.contains("smoother")) {
    const auto& s = j.at("smoother");
    m.smoother.jerk_noise = s.value("jerk_noise", m.smoother.jerk_noise);
    m.smoother.lateral_accel_noise = s.value("lateral_accel_noise", m.smoother.lateral_accel_noise);
    m.smoother.measurement_noise_x = s.value("measurement_noise_x", m.smoother.measurement_noise_x);
    m.smoother.measurement_noise_y = s.value("measurement_noise_y", m.smoother.measurement_noise_y);
  }
  if (m.lane_count < 1 || !(m.lane_width > 0.0) || !(m.unit_scale > 0.0) || !(m.sample_rate > 0.0))
    throw std::invalid_argument("column mapping: lane_count, lane_width, unit_scale and sample_rate must be positive");
  return m;
}

nlohmann::json ColumnMapping::to_json() const {
  return {{"vehicle_id", vehicle_id},
          {"frame", frame},
          {"longitudinal", longitudinal},
          {"lateral", lateral},
          {"lane", lane},
          {"length", length},
          {"width", width},
          {"unit_scale", unit_scale},
          {"lateral_sign", lateral_sign},
          {"lanes_left_to_right", lanes_left_to_right},
          {"lane_count", lane_count},
          {"lane_width", lane_width},
          {"sample_rate", sample_rate},
          {"smoother",
           {{"jerk_noise", smoother.jerk_noise},
            {"lateral_accel_noise", smoother.lateral_accel_noise},
            {"measurement_noise_x", smoother.measurement_noise_x},
            {"measurement_noise_y", smoother.measurement_noise_y}}}};
}

IngestResult ingest_csv(const std::filesystem::path& path, const ColumnMapping& m) {
  std::ifstream in(path);
  if (!in) throw io::IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw io::IoError(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    if (name.empty() && !required) return std::nullopt;
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw io::IoError(path.string() + ": missing column '" + name + "'");
      return std::nullopt;
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_id = *column(m.vehicle_id, true);
  const std::size_t c_frame = *column(m.frame, true);
  const std::size_t c_x = *column(m.longitudinal, true);
  const std::size_t c_y = *column(m.lateral, true);
  const std::size_t c_lane = *column(m.lane, true);
  const auto c_len = column(m.length, !m.length.empty());
  const auto c_wid = column(m.width, !m.width.empty());

  IngestResult result;
  std::map<int, Track> tracks;
  std::map<int, std::string> broken;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    auto cell = [&](std::size_t c) -> const std::string& {
      if (c >= cells.size()) throw io::IoError("line " + std::to_string(line_no) + ": too few columns");
      return cells[c];
    };
    const int id = static_cast<int>(to_double(cell(c_id), line_no, m.vehicle_id));
    Row r;
    r.frame = static_cast<long>(to_double(cell(c_frame), line_no, m.frame));
    r.x = to_double(cell(c_x), line_no, m.longitudinal) * m.unit_scale;
    r.y = m.lateral_sign * to_double(cell(c_y), line_no, m.lateral) * m.unit_scale;
    if (m.lateral_sign < 0.0) r.y += m.lane_count * m.lane_width;
    const int raw_lane = static_cast<int>(to_double(cell(c_lane), line_no, m.lane));
    r.lane = m.lanes_left_to_right ? m.lane_count - raw_lane : raw_lane - 1;
    if (c_len) r.length = to_double(cell(*c_len), line_no, m.length) * m.unit_scale;
    if (c_wid) r.width = to_double(cell(*c_wid), line_no, m.width) * m.unit_scale;

    Track& t = tracks[id];
    t.id = id;
    if (broken.count(id)) continue;
    if (!t.rows.empty()) {
      const long prev = t.rows.back().frame;
      if (r.frame <= prev) {
        broken[id] = "non-monotone frames at frame " + std::to_string(r.frame);
        continue;
      }
      if (r.frame != prev + 1) {
        broken[id] = "frame gap between " + std::to_string(prev) + " and " + std::to_string(r.frame);
        continue;
      }
    }
    if (r.lane < 0 || r.lane >= m.lane_count) {
      broken[id] = "lane " + std::to_string(raw_lane) + " outside the mapped lane count";
      continue;
    }
    t.rows.push_back(r);
  }
  for (const auto& [id, msg] : broken) {
    result.errors.push_back({id, msg});
    tracks.erase(id);
  }

  const double dt = 1.0 / m.sample_rate;
  for (auto& [id, t] : tracks) {
    if (t.rows.size() < 3) continue;
    std::vector<TrackSample> samples;
    for (const auto& r : t.rows) samples.push_back({static_cast<double>(r.frame) * dt, r.x, r.y});
    t.smooth = smooth_track(samples, m.smoother).states;
  }

  scene::LaneGeometry lanes{m.lane_count, m.lane_width};
  // Smoothed vehicle states per frame; the predicted vehicle's lane is overridden per window.
  auto snapshot_at = [&](long frame, int predicted_id, int predicted_lane) {
    scene::SceneSnapshot s;
    s.timestamp = static_cast<double>(frame) * dt;
    s.predicted_id = predicted_id;
    s.lanes = lanes;
    for (const auto& [id, t] : tracks) {
      if (t.smooth.empty() || frame < t.rows.front().frame || frame > t.rows.back().frame) continue;
      const std::size_t k = static_cast<std::size_t>(frame - t.rows.front().frame);
      const auto& r = t.rows[k];
      const auto& sm = t.smooth[k];
      s.vehicles.push_back({id, sm.x, sm.y, std::max(0.0, sm.vx), r.length, r.width, id == predicted_id ? predicted_lane : r.lane});
    }
    return s;
  };

  std::uint64_t next_id = 0;
  for (const auto& [id, t] : tracks) {
    const auto& rows = t.rows;
    if (rows.size() < static_cast<std::size_t>(kWindowSteps + 1)) {
      result.warnings.push_back({id, "track has " + std::to_string(rows.size()) + " frames, fewer than a window"});
      continue;
    }
    std::size_t change = 0;
    for (std::size_t k = 1; k < rows.size() && change == 0; ++k)
      if (rows[k].lane != rows[k - 1].lane) change = k;

    Episode ep;
    ep.source = "csv";
    ep.sample_rate = m.sample_rate;
    std::size_t first = 0;
    int origin = rows.front().lane;
    if (change != 0) {
      if (change < static_cast<std::size_t>(kWindowSteps)) {
        result.warnings.push_back({id, "lane change after " + std::to_string(change) + " frames, fewer than a window"});
        continue;
      }
      first = change - kWindowSteps;
      origin = rows[change - 1].lane;
    }
    for (int j = 0; j <= kWindowSteps; ++j) ep.frames.push_back(snapshot_at(rows[first + j].frame, id, origin));

    try {
      for (const auto& f : ep.frames) f.validate(m.sample_rate);
      if (change != 0) {
        const scene::Side side = rows[change].lane > origin ? scene::Side::left : scene::Side::right;
        const auto& last = ep.frames.back();
        const auto dias0 = scene::extract_dias(ep.frames.front());
        const int yield_area = side == scene::Side::left ? 1 : 3;
        const auto& any = dias0.live(yield_area) ? dias0.at(yield_area) : dias0.at(yield_area + 1);
        const scene::VehicleState* ref = last.find(*any.reference_id);
        if (!ref) throw scene::SceneError("reference vehicle leaves the scene");
        const bool pass = last.predicted().x > ref->x;
        ep.behavior = pass ? scene::MotionKind::pass : scene::MotionKind::yield;
        ep.label_area = yield_area + (pass ? 1 : 0);
        ep.reference_id = ref->id;
        for (int j = 0; j <= kWindowSteps; ++j) ep.ttlc.push_back((kWindowSteps - j) * dt);
      } else {
        ep.behavior = scene::MotionKind::keep;
        ep.label_area = 5;
        const auto dias0 = scene::extract_dias(ep.frames.front());
        ep.reference_id = dias0.at(5).reference_id;
        ep.ttlc.assign(kWindowSteps + 1, kKeepHorizon);
      }
      for (const auto& f : ep.frames) {
        const auto d = scene::extract_dias(f);
        if (!d.live(ep.label_area) || d.at(ep.label_area).reference_id != ep.reference_id)
          throw scene::SceneError("labeled area not present with the same reference in every frame");
      }
    } catch (const std::exception& e) {
      result.warnings.push_back({id, std::string("window skipped: ") + e.what()});
      continue;
    }
    ep.insertion_lateral = ep.frames.back().predicted().y;
    ep.id = next_id++;
    result.episodes.push_back(std::move(ep));
  }
  return result;
}

}  // namespace scenepred::datagen
