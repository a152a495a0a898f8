#include "scenepred/eval.hpp"

#include "scenepred/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>

namespace scenepred::eval {

std::string_view to_string(Role role) { return role == Role::pred ? "pred" : "ref"; }

RmseValue rmse(const Track& truth, std::span<const Track> predictions, std::size_t steps) {
  if (predictions.empty()) throw EvalError("rmse: need at least one predicted trajectory");
  if (steps == 0) throw EvalError("rmse: horizon must cover at least one step");
  if (truth.lateral.size() < steps || truth.velocity.size() < steps)
    throw EvalError("rmse: horizon of " + std::to_string(steps) + " steps exceeds the truth length " +
                    std::to_string(std::min(truth.lateral.size(), truth.velocity.size())));
  double lat = 0.0, vel = 0.0;
  for (const auto& p : predictions) {
    if (p.lateral.size() < steps || p.velocity.size() < steps) throw EvalError("rmse: predicted trajectory too short");
    for (std::size_t j = 0; j < steps; ++j) {
      lat += (truth.lateral[j] - p.lateral[j]) * (truth.lateral[j] - p.lateral[j]);
      vel += (truth.velocity[j] - p.velocity[j]) * (truth.velocity[j] - p.velocity[j]);
    }
  }
  const double n = static_cast<double>(predictions.size() * steps);
  return {std::sqrt(lat / n), std::sqrt(vel / n)};
}

Track truth_track(const datagen::Episode& episode, Role role) {
  if (episode.frames.empty()) throw EvalError("episode " + std::to_string(episode.id) + " has no frames");
  int id = episode.frames.front().predicted_id;
  if (role == Role::ref) {
    if (!episode.reference_id) throw EvalError("episode " + std::to_string(episode.id) + " has no reference vehicle");
    id = *episode.reference_id;
  }
  Track t;
  for (std::size_t j = 1; j < episode.frames.size(); ++j) {
    const auto* v = episode.frames[j].find(id);
    if (!v) throw EvalError("episode " + std::to_string(episode.id) + ": vehicle " + std::to_string(id) + " missing in frame " + std::to_string(j));
    t.lateral.push_back(v->y);
    t.velocity.push_back(v->v);
  }
  return t;
}

Track trajectory_track(const sampler::Trajectory& trajectory, Role role) {
  Track t;
  for (std::size_t j = 1; j < trajectory.poses.size(); ++j) {
    const auto& p = role == Role::pred ? trajectory.poses[j].pred : trajectory.poses[j].ref;
    t.lateral.push_back(p.y);
    t.velocity.push_back(p.v);
  }
  return t;
}

sampler::SamplerConfig EvalConfig::default_sampler() {
  sampler::SamplerConfig c;
  c.gate = false;
  return c;
}

void EvalConfig::validate() const {
  if (samples < 1) throw EvalError("eval: samples must be at least 1");
  if (horizons.empty()) throw EvalError("eval: horizons must not be empty");
  for (double h : horizons)
    if (!(h > 0.0)) throw EvalError("eval: horizons must be positive");
  if (!std::is_sorted(horizons.begin(), horizons.end())) throw EvalError("eval: horizons must be increasing");
  if (!(keep_horizon > 0.0)) throw EvalError("eval: keep_horizon must be positive");
  sampler.validate();
}

nlohmann::json EvalConfig::to_json() const {
  return {{"samples", samples},       {"horizons", horizons}, {"keep_horizon", keep_horizon},
          {"max_episodes", max_episodes}, {"threads", threads},   {"sampler", sampler.to_json()}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  c.samples = j.value("samples", c.samples);
  c.horizons = j.value("horizons", c.horizons);
  c.keep_horizon = j.value("keep_horizon", c.keep_horizon);
  c.max_episodes = j.value("max_episodes", c.max_episodes);
  c.threads = j.value("threads", c.threads);
  if (j.contains("sampler")) {
    nlohmann::json s = default_sampler().to_json();
    s.merge_patch(j.at("sampler"));
    c.sampler = sampler::SamplerConfig::from_json(s);
  }
  c.validate();
  return c;
}

const RmseCell* RmseReport::find(lower::ModelType model, Role role, double horizon) const {
  for (const auto& c : cells)
    if (c.model == model && c.role == role && std::abs(c.horizon - horizon) < 1e-9) return &c;
  return nullptr;
}

std::string RmseReport::to_csv() const {
  std::string out = "model,role,horizon,lateral_rmse,velocity_rmse,episodes,trajectories,steps,lateral_episode_std,velocity_episode_std\n";
  char buf[256];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.1f,%.6f,%.6f,%zu,%zu,%zu,%.6f,%.6f\n", std::string(lower::to_string(c.model)).c_str(),
                  std::string(to_string(c.role)).c_str(), c.horizon, c.lateral, c.velocity, c.episodes, c.trajectories,
                  c.steps, c.lateral_episode_std, c.velocity_episode_std);
    out += buf;
  }
  return out;
}

std::string RmseReport::to_table() const {
  std::vector<double> horizons;
  for (const auto& c : cells)
    if (std::find_if(horizons.begin(), horizons.end(), [&](double h) { return std::abs(h - c.horizon) < 1e-9; }) ==
        horizons.end())
      horizons.push_back(c.horizon);
  std::sort(horizons.begin(), horizons.end());
  std::string out;
  char buf[64];
  for (int q = 0; q < 2; ++q) {
    out += q == 0 ? "Lateral position RMSE [m]\n" : "Longitudinal velocity RMSE [m/s]\n";
    std::snprintf(buf, sizeof buf, "%-12s %-5s", "model", "role");
    out += buf;
    for (double h : horizons) {
      std::snprintf(buf, sizeof buf, " %7.1fs", h);
      out += buf;
    }
    out += '\n';
    for (auto type : {lower::ModelType::yield, lower::ModelType::pass, lower::ModelType::keep, lower::ModelType::pass_notime}) {
      for (auto role : {Role::pred, Role::ref}) {
        bool any = false;
        std::string row;
        std::snprintf(buf, sizeof buf, "%-12s %-5s", std::string(lower::to_string(type)).c_str(),
                      std::string(to_string(role)).c_str());
        row += buf;
        for (double h : horizons) {
          const auto* c = find(type, role, h);
          if (c) {
            any = true;
            std::snprintf(buf, sizeof buf, " %8.3f", q == 0 ? c->lateral : c->velocity);
          } else {
            std::snprintf(buf, sizeof buf, " %8s", "-");
          }
          row += buf;
        }
        if (any) out += row + '\n';
      }
    }
    if (q == 0) out += '\n';
  }
  return out;
}

const lower::CvaeModel* EvalModels::get(lower::ModelType type) const {
  switch (type) {
    case lower::ModelType::yield: return yield;
    case lower::ModelType::pass: return pass;
    case lower::ModelType::keep: return keep;
    case lower::ModelType::pass_notime: return pass_notime;
  }
  return nullptr;
}

namespace {

constexpr std::array<lower::ModelType, 4> kTypes{lower::ModelType::yield, lower::ModelType::pass, lower::ModelType::keep,
                                                 lower::ModelType::pass_notime};

lower::ModelType primary_type(scene::MotionKind kind) {
  switch (kind) {
    case scene::MotionKind::yield: return lower::ModelType::yield;
    case scene::MotionKind::pass: return lower::ModelType::pass;
    case scene::MotionKind::keep: return lower::ModelType::keep;
  }
  return lower::ModelType::keep;
}

struct Accum {
  double lat = 0.0, vel = 0.0;
  std::size_t steps = 0, trajectories = 0;
  bool present = false;
  RmseValue episode_rmse;
};

// [model][role][horizon]
using EpisodeResult = std::vector<Accum>;

std::size_t cell_index(std::size_t model, std::size_t role, std::size_t horizon, std::size_t horizons) {
  return (model * 2 + role) * horizons + horizon;
}

}  // namespace

RmseReport table_protocol(std::span<const datagen::Episode> test, const EvalModels& models, const upper::UpperModel& upper,
                          const EvalConfig& config, std::uint64_t seed) {
  config.validate();
  if (test.empty()) throw EvalError("table_protocol: empty test set");
  const std::size_t n_episodes = config.max_episodes > 0 ? std::min(config.max_episodes, test.size()) : test.size();
  const std::size_t nh = config.horizons.size();
  std::vector<EpisodeResult> results(n_episodes, EpisodeResult(kTypes.size() * 2 * nh));
  std::vector<std::size_t> skipped(n_episodes, 0);

  parallel_for(n_episodes, config.threads, [&](std::size_t e) {
    const auto& ep = test[e];
    if (ep.frames.size() < 2 || ep.ttlc.empty()) throw EvalError("episode " + std::to_string(ep.id) + " is too short to evaluate");
    const auto& snapshot = ep.frames.front();
    const auto kind = scene::kind_of_area(ep.label_area);
    std::vector<lower::ModelType> types{primary_type(kind)};
    if (kind == scene::MotionKind::pass) types.push_back(lower::ModelType::pass_notime);
    const auto up = upper::predict_upper(upper, upper::featurize(snapshot, upper.features));
    const double f_s = config.sampler.sample_rate;
    for (auto type : types) {
      const auto* model = models.get(type);
      if (!model) continue;
      const std::size_t m = static_cast<std::size_t>(std::find(kTypes.begin(), kTypes.end(), type) - kTypes.begin());
      sampler::SamplerConfig sc = config.sampler;
      sc.fixed_horizon = ep.ttlc.front();
      std::vector<std::size_t> steps_for(nh, 0);
      std::size_t needed = 0;
      for (std::size_t h = 0; h < nh; ++h) {
        const double horizon = config.horizons[h];
        if (type == lower::ModelType::keep && std::abs(horizon - config.keep_horizon) > 1e-9) continue;
        const auto steps = static_cast<std::size_t>(std::llround(horizon * f_s));
        if (steps > ep.frames.size() - 1) continue;
        steps_for[h] = steps;
        needed = std::max(needed, steps);
      }
      if (needed == 0) continue;
      std::mt19937_64 rng(datagen::derive_seed(datagen::derive_seed(seed, e), m));
      std::vector<Track> pred_tracks, ref_tracks;
      for (std::size_t s = 0; s < config.samples; ++s) {
        const auto tr = sampler::rollout(snapshot, ep.label_area, *model, up, sc, rng);
        if (tr.status != sampler::Status::completed || tr.steps() < needed) {
          ++skipped[e];
          continue;
        }
        pred_tracks.push_back(trajectory_track(tr, Role::pred));
        if (ep.reference_id) ref_tracks.push_back(trajectory_track(tr, Role::ref));
      }
      if (pred_tracks.empty()) continue;
      for (std::size_t r = 0; r < 2; ++r) {
        const Role role = r == 0 ? Role::pred : Role::ref;
        if (role == Role::ref && !ep.reference_id) continue;
        const Track truth = truth_track(ep, role);
        const auto& tracks = role == Role::pred ? pred_tracks : ref_tracks;
        for (std::size_t h = 0; h < nh; ++h) {
          if (steps_for[h] == 0) continue;
          auto& a = results[e][cell_index(m, r, h, nh)];
          const auto value = rmse(truth, tracks, steps_for[h]);
          const double n = static_cast<double>(tracks.size() * steps_for[h]);
          a.present = true;
          a.lat = value.lateral * value.lateral * n;
          a.vel = value.velocity * value.velocity * n;
          a.steps = tracks.size() * steps_for[h];
          a.trajectories = tracks.size();
          a.episode_rmse = value;
        }
      }
    }
  });

  RmseReport report;
  for (std::size_t e = 0; e < n_episodes; ++e) report.skipped_trajectories += skipped[e];
  for (std::size_t m = 0; m < kTypes.size(); ++m) {
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t h = 0; h < nh; ++h) {
        RmseCell cell{kTypes[m], r == 0 ? Role::pred : Role::ref, config.horizons[h]};
        double lat = 0.0, vel = 0.0;
        std::vector<RmseValue> per_episode;
        for (std::size_t e = 0; e < n_episodes; ++e) {
          const auto& a = results[e][cell_index(m, r, h, nh)];
          if (!a.present) continue;
          lat += a.lat;
          vel += a.vel;
          cell.steps += a.steps;
          cell.trajectories += a.trajectories;
          ++cell.episodes;
          per_episode.push_back(a.episode_rmse);
        }
        if (cell.episodes == 0) continue;
        cell.lateral = std::sqrt(lat / static_cast<double>(cell.steps));
        cell.velocity = std::sqrt(vel / static_cast<double>(cell.steps));
        if (per_episode.size() > 1) {
          double ml = 0.0, mv = 0.0;
          for (const auto& v : per_episode) {
            ml += v.lateral;
            mv += v.velocity;
          }
          ml /= static_cast<double>(per_episode.size());
          mv /= static_cast<double>(per_episode.size());
          double sl = 0.0, sv = 0.0;
          for (const auto& v : per_episode) {
            sl += (v.lateral - ml) * (v.lateral - ml);
            sv += (v.velocity - mv) * (v.velocity - mv);
          }
          cell.lateral_episode_std = std::sqrt(sl / static_cast<double>(per_episode.size() - 1));
          cell.velocity_episode_std = std::sqrt(sv / static_cast<double>(per_episode.size() - 1));
        }
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

void RobustnessConfig::validate() const {
  if (samples < 1) throw EvalError("robustness: samples must be at least 1");
  if (!(lateral_threshold > 0.0)) throw EvalError("robustness: lateral_threshold must be positive");
  for (double t : ttlc_values)
    if (!(t > 0.0)) throw EvalError("robustness: TTLC values must be positive");
  sampler.validate();
}

nlohmann::json RobustnessConfig::to_json() const {
  return {{"samples", samples},
          {"lateral_threshold", lateral_threshold},
          {"ttlc_values", ttlc_values},
          {"sampler", sampler.to_json()}};
}

RobustnessConfig RobustnessConfig::from_json(const nlohmann::json& j) {
  RobustnessConfig c;
  c.samples = j.value("samples", c.samples);
  c.lateral_threshold = j.value("lateral_threshold", c.lateral_threshold);
  c.ttlc_values = j.value("ttlc_values", c.ttlc_values);
  if (j.contains("sampler")) {
    nlohmann::json s = EvalConfig::default_sampler().to_json();
    s.merge_patch(j.at("sampler"));
    c.sampler = sampler::SamplerConfig::from_json(s);
  }
  c.validate();
  return c;
}

namespace {

Profile build_profile(std::string variant, const std::vector<sampler::Trajectory>& runs, scene::Side side, double dt,
                      double threshold) {
  Profile p;
  p.variant = std::move(variant);
  p.attempted = runs.size();
  const double sign = scene::side_sign(side);
  double speed_change = 0.0, ref_speed = 0.0, accel = 0.0;
  std::size_t accel_n = 0;
  for (const auto& t : runs) {
    if (t.status != sampler::Status::completed) continue;
    ++p.completed;
    const auto& q = t.poses;
    if (q.size() > p.time.size()) {
      const std::size_t old = p.time.size();
      p.time.resize(q.size());
      for (std::size_t j = old; j < q.size(); ++j) p.time[j] = static_cast<double>(j) * dt;
      p.pred_lateral.resize(q.size(), 0.0);
      p.pred_speed.resize(q.size(), 0.0);
      p.ref_lateral.resize(q.size(), 0.0);
      p.ref_speed.resize(q.size(), 0.0);
      p.count.resize(q.size(), 0);
    }
    double rs = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      p.pred_lateral[j] += sign * (q[j].pred.y - q[0].pred.y);
      p.pred_speed[j] += q[j].pred.v;
      p.ref_lateral[j] += sign * (q[j].ref.y - q[0].ref.y);
      p.ref_speed[j] += q[j].ref.v;
      ++p.count[j];
      if (j > 0) rs += q[j].ref.v;
    }
    speed_change += q.back().pred.v - q.front().pred.v;
    if (q.size() > 1) ref_speed += rs / static_cast<double>(q.size() - 1);
    for (const auto& a : t.actions) {
      accel += std::abs(a.dv_pred) / dt;
      ++accel_n;
    }
  }
  for (std::size_t j = 0; j < p.time.size(); ++j) {
    const double c = static_cast<double>(p.count[j]);
    p.pred_lateral[j] /= c;
    p.pred_speed[j] /= c;
    p.ref_lateral[j] /= c;
    p.ref_speed[j] /= c;
  }
  if (p.completed > 0) {
    p.mean_pred_speed_change = speed_change / static_cast<double>(p.completed);
    p.mean_ref_speed = ref_speed / static_cast<double>(p.completed);
  }
  if (accel_n > 0) p.mean_abs_pred_accel = accel / static_cast<double>(accel_n);
  for (std::size_t j = 1; j < p.time.size(); ++j) {
    if (p.pred_lateral[j] >= threshold) {
      const double a = p.pred_lateral[j - 1], b = p.pred_lateral[j];
      const double frac = b > a ? (threshold - a) / (b - a) : 1.0;
      p.time_to_lateral = p.time[j - 1] + std::clamp(frac, 0.0, 1.0) * dt;
      break;
    }
  }
  return p;
}

scene::Side area_side(const scene::SceneSnapshot& snapshot, int area) {
  const auto dias = scene::extract_dias(snapshot);
  if (!dias.live(area)) throw EvalError("area " + std::to_string(area) + " is not live in the snapshot");
  return dias.at(area).side;
}

}  // namespace

RobustnessReport robustness_model_swap(const scene::SceneSnapshot& snapshot, int area, const lower::CvaeModel& pass,
                                       const lower::CvaeModel& yield, const upper::UpperModel& upper,
                                       const RobustnessConfig& config, std::uint64_t seed) {
  config.validate();
  if (scene::kind_of_area(area) == scene::MotionKind::keep) throw EvalError("model swap needs a lane-change area");
  if (lower::kind_of(pass.type) != scene::MotionKind::pass || lower::kind_of(yield.type) != scene::MotionKind::yield)
    throw EvalError("model swap needs a pass and a yield model");
  const auto side = area_side(snapshot, area);
  const auto up = upper::predict_upper(upper, upper::featurize(snapshot, upper.features));
  RobustnessReport report{"model-swap", area, {}};
  for (const auto* model : {&pass, &yield}) {
    std::vector<sampler::Trajectory> runs;
    for (std::size_t i = 0; i < config.samples; ++i) {
      std::mt19937_64 rng(datagen::derive_seed(seed, i));
      runs.push_back(sampler::rollout_as(snapshot, area, *model, up, config.sampler, rng));
    }
    report.variants.push_back(build_profile(std::string(lower::to_string(model->type)), runs, side,
                                            1.0 / config.sampler.sample_rate, config.lateral_threshold));
  }
  return report;
}

RobustnessReport robustness_ttlc(const scene::SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                                 const upper::UpperModel& upper, const RobustnessConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.ttlc_values.empty()) throw EvalError("TTLC sweep needs at least one value");
  const auto side = area_side(snapshot, area);
  const auto up = upper::predict_upper(upper, upper::featurize(snapshot, upper.features));
  RobustnessReport report{"ttlc-shift", area, {}};
  for (double ttlc : config.ttlc_values) {
    sampler::SamplerConfig sc = config.sampler;
    sc.fixed_horizon = ttlc;
    sc.t_max = std::max(sc.t_max, ttlc);
    sc.t_min = std::min(sc.t_min, ttlc);
    std::vector<sampler::Trajectory> runs;
    for (std::size_t i = 0; i < config.samples; ++i) {
      std::mt19937_64 rng(datagen::derive_seed(seed, i));
      runs.push_back(sampler::rollout(snapshot, area, model, up, sc, rng));
    }
    char name[32];
    std::snprintf(name, sizeof name, "ttlc=%.2f", ttlc);
    report.variants.push_back(build_profile(name, runs, side, 1.0 / sc.sample_rate, config.lateral_threshold));
  }
  return report;
}

std::string RobustnessReport::to_csv() const {
  std::string out = "kind,variant,step,t,count,pred_lateral,pred_speed,ref_lateral,ref_speed\n";
  char buf[256];
  for (const auto& p : variants) {
    for (std::size_t j = 0; j < p.time.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.2f,%zu,%.6f,%.6f,%.6f,%.6f\n", kind.c_str(), p.variant.c_str(), j, p.time[j],
                    p.count[j], p.pred_lateral[j], p.pred_speed[j], p.ref_lateral[j], p.ref_speed[j]);
      out += buf;
    }
  }
  return out;
}

std::string RobustnessReport::summary() const {
  std::string out = kind + " (area " + std::to_string(area) + ")\n";
  char buf[256];
  for (const auto& p : variants) {
    char ttl[32] = "never";
    if (p.time_to_lateral) std::snprintf(ttl, sizeof ttl, "%.2fs", *p.time_to_lateral);
    std::snprintf(buf, sizeof buf,
                  "  %-10s completed %zu/%zu  pred dv %+.3f m/s  ref mean v %.3f m/s  |a_pred| %.3f m/s^2  lateral threshold %s\n",
                  p.variant.c_str(), p.completed, p.attempted, p.mean_pred_speed_change, p.mean_ref_speed,
                  p.mean_abs_pred_accel, ttl);
    out += buf;
  }
  return out;
}

nlohmann::json RobustnessReport::to_json() const {
  nlohmann::json vs = nlohmann::json::array();
  for (const auto& p : variants) {
    vs.push_back({{"variant", p.variant},
                  {"completed", p.completed},
                  {"attempted", p.attempted},
                  {"mean_pred_speed_change", p.mean_pred_speed_change},
                  {"mean_ref_speed", p.mean_ref_speed},
                  {"mean_abs_pred_accel", p.mean_abs_pred_accel},
                  {"time_to_lateral", p.time_to_lateral ? nlohmann::json(*p.time_to_lateral) : nlohmann::json(nullptr)}});
  }
  return {{"kind", kind}, {"area", area}, {"variants", vs}};
}

}  // namespace scenepred::eval
