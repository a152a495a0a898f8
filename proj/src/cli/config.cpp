#include "scenepred/cli.hpp"

#include "scenepred/numerics/checkpoint.hpp"

namespace scenepred::cli {

using nlohmann::json;

json generator_to_json(const datagen::GeneratorConfig& c) {
  return {{"lane_count", c.lane_count},     {"lane_width", c.lane_width},     {"speed_min", c.speed_min},
          {"speed_max", c.speed_max},       {"headway_min", c.headway_min},   {"headway_max", c.headway_max},
          {"maneuver_min", c.maneuver_min}, {"maneuver_max", c.maneuver_max}, {"accel_limit", c.accel_limit},
          {"max_attempts", c.max_attempts}};
}

datagen::GeneratorConfig generator_from_json(const json& j) {
  datagen::GeneratorConfig c;
  c.lane_count = j.value("lane_count", c.lane_count);
  c.lane_width = j.value("lane_width", c.lane_width);
  c.speed_min = j.value("speed_min", c.speed_min);
  c.speed_max = j.value("speed_max", c.speed_max);
  c.headway_min = j.value("headway_min", c.headway_min);
  c.headway_max = j.value("headway_max", c.headway_max);
  c.maneuver_min = j.value("maneuver_min", c.maneuver_min);
  c.maneuver_max = j.value("maneuver_max", c.maneuver_max);
  c.accel_limit = j.value("accel_limit", c.accel_limit);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  if (c.lane_count < 2) throw UserError("generator.lane_count must be at least 2");
  if (!(c.lane_width > 0.0) || !(c.speed_min > 0.0) || !(c.speed_max >= c.speed_min) || !(c.headway_min > 0.0) ||
      !(c.headway_max >= c.headway_min) || !(c.maneuver_min > 0.0) || !(c.maneuver_max >= c.maneuver_min) ||
      !(c.accel_limit > 0.0) || c.max_attempts < 1)
    throw UserError("generator: ranges must be positive and ordered");
  return c;
}

namespace {

json without_rate(json j) {
  j.erase("sample_rate");
  if (j.contains("sampler")) j["sampler"].erase("sample_rate");
  return j;
}

void check_keys(const json& user, const json& defaults, const std::string& where) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!defaults.contains(it.key())) throw UserError("unknown config key '" + path + "'");
    const auto& d = defaults.at(it.key());
    if (d.is_object()) {
      if (!it.value().is_object()) throw UserError("config key '" + path + "' must be an object");
      check_keys(it.value(), d, path);
    }
  }
}

}  // namespace

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"sample_rate", sample_rate},
          {"paths", {{"data", paths.data.string()}, {"checkpoints", paths.checkpoints.string()}, {"reports", paths.reports.string()}}},
          {"generate", {{"episodes", episodes}, {"train_ratio", train_ratio}, {"generator", generator_to_json(generator)}}},
          {"ingest", without_rate(ingest.to_json())},
          {"train", {{"upper", upper.to_json()}, {"lower", lower.to_json()}}},
          {"predict", {{"sampler", without_rate(sampler.to_json())}, {"pass_model", pass_model}}},
          {"evaluate", without_rate(eval.to_json())},
          {"robustness", without_rate(robustness.to_json())}};
}

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, RunConfig{}.to_json(), "");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    if (!(c.sample_rate > 0.0)) throw UserError("sample_rate must be positive");
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      c.paths.data = p.value("data", c.paths.data.string());
      c.paths.checkpoints = p.value("checkpoints", c.paths.checkpoints.string());
      c.paths.reports = p.value("reports", c.paths.reports.string());
    }
    if (j.contains("generate")) {
      const auto& g = j.at("generate");
      c.episodes = g.value("episodes", c.episodes);
      c.train_ratio = g.value("train_ratio", c.train_ratio);
      if (g.contains("generator")) c.generator = generator_from_json(g.at("generator"));
    }
    if (c.episodes < 2) throw UserError("generate.episodes must be at least 2");
    if (!(c.train_ratio > 0.0 && c.train_ratio < 1.0)) throw UserError("generate.train_ratio must lie in (0, 1)");

    json ingest = c.ingest.to_json();
    if (j.contains("ingest")) ingest.merge_patch(j.at("ingest"));
    ingest["sample_rate"] = c.sample_rate;
    c.ingest = datagen::ColumnMapping::from_json(ingest);

    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("upper")) c.upper = upper::UpperTrainConfig::from_json(t.at("upper"));
      if (t.contains("lower")) c.lower = lower::LowerTrainConfig::from_json(t.at("lower"));
    }

    json sampler = c.sampler.to_json();
    if (j.contains("predict")) {
      const auto& p = j.at("predict");
      if (p.contains("sampler")) sampler.merge_patch(p.at("sampler"));
      c.pass_model = p.value("pass_model", c.pass_model);
    }
    sampler["sample_rate"] = c.sample_rate;
    c.sampler = sampler::SamplerConfig::from_json(sampler);
    if (c.pass_model != "pass" && c.pass_model != "pass_notime")
      throw UserError("predict.pass_model must be 'pass' or 'pass_notime'");

    json ev = c.eval.to_json();
    if (j.contains("evaluate")) ev.merge_patch(j.at("evaluate"));
    ev["sampler"]["sample_rate"] = c.sample_rate;
    c.eval = eval::EvalConfig::from_json(ev);

    json rb = c.robustness.to_json();
    if (j.contains("robustness")) rb.merge_patch(j.at("robustness"));
    rb["sampler"]["sample_rate"] = c.sample_rate;
    c.robustness = eval::RobustnessConfig::from_json(rb);
  } catch (const UserError&) {
    throw;
  } catch (const json::exception& e) {
    throw UserError(std::string("invalid config: ") + e.what());
  } catch (const std::exception& e) {
    throw UserError(std::string("invalid config: ") + e.what());
  }
  return c;
}

json merge_config(const std::filesystem::path* file, const std::vector<std::string>& overrides) {
  json merged = RunConfig{}.to_json();
  if (file) {
    json user;
    try {
      user = io::read_json(*file);
    } catch (const std::exception& e) {
      throw UserError(std::string("cannot read config: ") + e.what());
    }
    if (!user.is_object()) throw UserError("config file must hold a JSON object");
    check_keys(user, merged, "");
    merged.merge_patch(user);
  }
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw UserError("--set expects key.path=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::string text = item.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &merged;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw UserError("--set: empty path component in '" + key + "'");
      if (!node->is_object() || !node->contains(part)) throw UserError("unknown config key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  return merged;
}

std::filesystem::path checkpoint_stem(const RunConfig& config, std::string_view which) {
  return config.paths.checkpoints / std::string(which);
}

}  // namespace scenepred::cli
