#include "scenepred/sampler.hpp"

#include "scenepred/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace scenepred::sampler {

using scene::Action;
using scene::JointPose;
using scene::Pose;
using scene::SceneSnapshot;

void SamplerConfig::validate() const {
  if (samples < 1) throw SamplerError("sampler: samples must be at least 1");
  if (!(w_min >= 0.0 && w_min < 1.0)) throw SamplerError("sampler: w_min must lie in [0, 1)");
  if (!(epsilon >= 0.0)) throw SamplerError("sampler: epsilon must be non-negative");
  if (!(t_min > 0.0) || !(t_max >= t_min)) throw SamplerError("sampler: need 0 < t_min <= t_max");
  if (!(sample_rate > 0.0)) throw SamplerError("sampler: sample_rate must be positive");
  if (step_retries < 1 || sample_retries < 1) throw SamplerError("sampler: retry budgets must be at least 1");
  if (!(observation_noise >= 0.0)) throw SamplerError("sampler: observation_noise must be non-negative");
  if (fixed_horizon && !(*fixed_horizon > 0.0)) throw SamplerError("sampler: fixed horizon must be positive");
}

nlohmann::json SamplerConfig::to_json() const {
  nlohmann::json j = {{"samples", samples},
                      {"w_min", w_min},
                      {"gate_mode", gate_mode == GateMode::relative ? "relative" : "absolute"},
                      {"epsilon", epsilon},
                      {"gate", gate},
                      {"step_retries", step_retries},
                      {"sample_retries", sample_retries},
                      {"t_min", t_min},
                      {"t_max", t_max},
                      {"sample_rate", sample_rate},
                      {"check_feasibility", check_feasibility},
                      {"observation_noise", observation_noise},
                      {"threads", threads},
                      {"limits",
                       {{"max_lateral_step", limits.max_lateral_step},
                        {"max_speed_step", limits.max_speed_step},
                        {"v_max", limits.v_max},
                        {"min_gap", limits.min_gap}}}};
  j["fixed_horizon"] = fixed_horizon ? nlohmann::json(*fixed_horizon) : nlohmann::json(nullptr);
  return j;
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.samples = j.value("samples", c.samples);
  c.w_min = j.value("w_min", c.w_min);
  const std::string mode = j.value("gate_mode", std::string("relative"));
  if (mode != "relative" && mode != "absolute") throw SamplerError("sampler: gate_mode must be relative or absolute");
  c.gate_mode = mode == "relative" ? GateMode::relative : GateMode::absolute;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.gate = j.value("gate", c.gate);
  c.step_retries = j.value("step_retries", c.step_retries);
  c.sample_retries = j.value("sample_retries", c.sample_retries);
  c.t_min = j.value("t_min", c.t_min);
  c.t_max = j.value("t_max", c.t_max);
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.check_feasibility = j.value("check_feasibility", c.check_feasibility);
  c.observation_noise = j.value("observation_noise", c.observation_noise);
  c.threads = j.value("threads", c.threads);
  if (j.contains("limits")) {
    const auto& l = j.at("limits");
    c.limits.max_lateral_step = l.value("max_lateral_step", c.limits.max_lateral_step);
    c.limits.max_speed_step = l.value("max_speed_step", c.limits.max_speed_step);
    c.limits.v_max = l.value("v_max", c.limits.v_max);
    c.limits.min_gap = l.value("min_gap", c.limits.min_gap);
  }
  if (j.contains("fixed_horizon") && !j.at("fixed_horizon").is_null()) c.fixed_horizon = j.at("fixed_horizon").get<double>();
  c.validate();
  return c;
}

std::string_view to_string(Status status) {
  switch (status) {
    case Status::completed: return "completed";
    case Status::rejected_destination: return "rejected-destination";
    case Status::exhausted_retries: return "exhausted-retries";
  }
  return "?";
}

nlohmann::json Diagnostics::to_json() const {
  return {{"completed", completed},
          {"rejected_destination", rejected_destination},
          {"exhausted_retries", exhausted_retries},
          {"step_resamples", step_resamples},
          {"sample_redos", sample_redos},
          {"infeasible_by_reason", infeasible_by_reason}};
}

const lower::CvaeModel* MotionModels::for_kind(scene::MotionKind kind) const {
  switch (kind) {
    case scene::MotionKind::yield: return yield;
    case scene::MotionKind::pass: return pass;
    case scene::MotionKind::keep: return keep;
  }
  return nullptr;
}

std::array<std::size_t, scene::kNumAreas> allocate(const std::array<double, scene::kNumAreas>& w, const SamplerConfig& config) {
  config.validate();
  double total = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw SamplerError("allocate: weights must be finite and non-negative");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-6) throw SamplerError("allocate: weights must sum to 1");
  std::array<std::size_t, scene::kNumAreas> n{};
  std::array<double, scene::kNumAreas> excess{};
  std::size_t sum = 0;
  const double ns = static_cast<double>(config.samples);
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k] <= config.w_min) continue;
    n[k] = static_cast<std::size_t>(std::llround(ns * w[k]));
    excess[k] = static_cast<double>(n[k]) - ns * w[k];
    sum += n[k];
  }
  while (sum > config.samples) {
    std::size_t worst = w.size();
    for (std::size_t k = 0; k < w.size(); ++k)
      if (n[k] > 0 && (worst == w.size() || excess[k] > excess[worst])) worst = k;
    --n[worst];
    excess[worst] -= 1.0;
    --sum;
  }
  return n;
}

namespace {

struct Neighbour {
  Pose start;
  double length = 4.5, width = 1.8;
  Pose at(double t) const { return {start.x + start.v * t, start.y, start.v}; }
};

struct RolloutSetup {
  scene::Dia dia;
  scene::Interaction inter;
  std::vector<Neighbour> others;
  std::optional<Neighbour> pred_leader, ref_leader;
};

RolloutSetup setup_for(const SceneSnapshot& snapshot, int area) {
  const auto dias = scene::extract_dias(snapshot);
  if (!dias.live(area)) throw SamplerError("area " + std::to_string(area) + " is not live in the snapshot");
  RolloutSetup s{dias.at(area), {}, {}, {}, {}};
  s.inter = scene::interaction_state(snapshot, s.dia);
  for (const auto& v : snapshot.vehicles) {
    if (v.id == snapshot.predicted_id || (s.dia.reference_id && v.id == *s.dia.reference_id)) continue;
    Neighbour n{{v.x, v.y, v.v}, v.length, v.width};
    s.others.push_back(n);
    if (s.inter.pred_leader_id && v.id == *s.inter.pred_leader_id) s.pred_leader = n;
    if (s.inter.ref_leader_id && v.id == *s.inter.ref_leader_id) s.ref_leader = n;
  }
  return s;
}

scene::FeasibilityContext feasibility_context(const RolloutSetup& s, double t_after) {
  scene::FeasibilityContext ctx{s.inter.pred_length, s.inter.pred_width, s.inter.ref_length, s.inter.ref_width,
                                s.inter.virtual_reference, {}};
  ctx.others.reserve(s.others.size());
  for (const auto& o : s.others) ctx.others.push_back({o.at(t_after), o.length, o.width});
  return ctx;
}

std::vector<double> observe(const RolloutSetup& s, scene::MotionKind kind, const JointPose& pose, double t) {
  scene::ObservationSources src;
  if (s.pred_leader) src.pred_leader = s.pred_leader->at(t);
  if (s.ref_leader) src.ref_leader = s.ref_leader->at(t);
  return scene::make_observation(kind, pose, src);
}

double sample_horizon(const gmm::Gmm1D& marginal, const SamplerConfig& config, std::mt19937_64& rng) {
  if (config.fixed_horizon) return std::clamp(*config.fixed_horizon, config.t_min, config.t_max);
  for (int i = 0; i < 1000; ++i) {
    const double t = marginal.sample(rng);
    if (t >= config.t_min && t <= config.t_max) return t;
  }
  return std::clamp(marginal.mean(), config.t_min, config.t_max);
}

}  // namespace

namespace {

Trajectory rollout_impl(const SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                        const upper::UpperPrediction& upper, const SamplerConfig& config, std::mt19937_64& rng) {
  config.validate();
  const RolloutSetup setup = setup_for(snapshot, area);
  const scene::MotionKind kind = lower::kind_of(model.type);
  const gmm::Gmm2D& dist = upper.area(area);
  const gmm::Gmm1D location = dist.marginal(gmm::Axis::location);
  const gmm::Gmm1D timing = dist.marginal(gmm::Axis::time);
  const double dt = 1.0 / config.sample_rate;

  Trajectory tr;
  tr.area = area;
  tr.model = model.type;
  tr.horizon = sample_horizon(timing, config, rng);
  tr.planned_steps = static_cast<std::size_t>(std::max<long long>(1, std::llround(tr.horizon * config.sample_rate)));
  tr.virtual_reference = setup.inter.virtual_reference;
  tr.gate_threshold = !config.gate ? 0.0
                      : config.gate_mode == GateMode::relative ? config.epsilon * location.peak_density()
                                                               : config.epsilon;
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int attempt = 1; attempt <= config.sample_retries; ++attempt) {
    tr.attempts = attempt;
    tr.poses.assign(1, setup.inter.pose);
    tr.contexts.clear();
    tr.actions.clear();
    JointPose pose = setup.inter.pose;
    scene::InteractionState state = setup.inter.state;
    bool exhausted = false;
    for (std::size_t j = 1; j <= tr.planned_steps; ++j) {
      const double t = static_cast<double>(j - 1) * dt;
      lower::Context ctx{state, observe(setup, kind, pose, t), tr.horizon - t, setup.dia.side};
      if (config.observation_noise > 0.0)
        for (double& o : ctx.observation) o += config.observation_noise * noise(rng);
      const auto fctx = feasibility_context(setup, t + dt);
      std::optional<Action> accepted;
      for (int r = 0; r < config.step_retries; ++r) {
        const Action a = lower::sample_action(model, ctx, rng);
        if (!config.check_feasibility) {
          accepted = a;
          break;
        }
        const auto ok = scene::check_feasible(a, pose, config.limits, fctx, dt);
        if (ok) {
          accepted = a;
          break;
        }
        ++tr.step_resamples;
        ++tr.infeasible_by_reason[std::string(scene::to_string(ok.reason))];
      }
      if (!accepted) {
        exhausted = true;
        break;
      }
      tr.contexts.push_back(std::move(ctx));
      tr.actions.push_back(*accepted);
      pose = scene::step_pose(pose, *accepted, dt);
      state = scene::step_state(state, *accepted, dt);
      tr.poses.push_back(pose);
    }
    if (exhausted) {
      tr.status = Status::exhausted_retries;
      return tr;
    }
    tr.final_density = location.density(pose.pred.y);
    if (!config.gate || tr.final_density >= tr.gate_threshold) {
      tr.status = Status::completed;
      return tr;
    }
  }
  tr.status = Status::rejected_destination;
  return tr;
}

}  // namespace

Trajectory rollout(const SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                   const upper::UpperPrediction& upper, const SamplerConfig& config, std::mt19937_64& rng) {
  const auto kind = scene::kind_of_area(area);
  if (lower::kind_of(model.type) != kind)
    throw SamplerError("area " + std::to_string(area) + " needs a " + std::string(scene::to_string(kind)) + " model, got " +
                       std::string(lower::to_string(model.type)));
  return rollout_impl(snapshot, area, model, upper, config, rng);
}

Trajectory rollout_as(const SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                      const upper::UpperPrediction& upper, const SamplerConfig& config, std::mt19937_64& rng) {
  const auto area_kind = scene::kind_of_area(area);
  const auto model_kind = lower::kind_of(model.type);
  if ((area_kind == scene::MotionKind::keep) != (model_kind == scene::MotionKind::keep))
    throw SamplerError("rollout_as: only yield and pass models can be swapped");
  return rollout_impl(snapshot, area, model, upper, config, rng);
}

ScenePrediction predict_scene(const SceneSnapshot& snapshot, const upper::UpperModel& upper, const MotionModels& models,
                              const SamplerConfig& config, std::mt19937_64& rng) {
  return predict_scene(snapshot, upper::predict_upper(upper, upper::featurize(snapshot, upper.features)), models, config, rng);
}

ScenePrediction predict_scene(const SceneSnapshot& snapshot, const upper::UpperPrediction& up, const MotionModels& models,
                              const SamplerConfig& config, std::mt19937_64& rng) {
  config.validate();
  for (std::size_t k = 0; k < scene::kNumAreas; ++k) {
    if (!up.mask[k]) continue;
    const auto kind = scene::kind_of_area(static_cast<int>(k) + 1);
    if (!models.for_kind(kind))
      throw SamplerError("no " + std::string(scene::to_string(kind)) + " motion model for live area " + std::to_string(k + 1));
  }
  ScenePrediction out;
  out.upper = up;
  out.allocation = allocate(up.weights, config);

  struct Job {
    int area;
    std::size_t index;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < scene::kNumAreas; ++k)
    for (std::size_t i = 0; i < out.allocation[k]; ++i) jobs.push_back({static_cast<int>(k) + 1, i});
  const std::uint64_t base = rng();
  std::vector<Trajectory> results(jobs.size());
  auto run = [&](std::size_t n) {
    const Job& job = jobs[n];
    std::mt19937_64 local(datagen::derive_seed(datagen::derive_seed(base, static_cast<std::uint64_t>(job.area)), job.index));
    const auto* model = models.for_kind(scene::kind_of_area(job.area));
    results[n] = rollout(snapshot, job.area, *model, up, config, local);
    results[n].index = job.index;
  };
  parallel_for(jobs.size(), config.threads, run);
  out.trajectories = std::move(results);
  for (const auto& t : out.trajectories) {
    auto& d = out.diagnostics;
    if (t.status == Status::completed) ++d.completed;
    if (t.status == Status::rejected_destination) ++d.rejected_destination;
    if (t.status == Status::exhausted_retries) ++d.exhausted_retries;
    d.step_resamples += t.step_resamples;
    d.sample_redos += static_cast<std::size_t>(t.attempts - 1);
    for (const auto& [k, v] : t.infeasible_by_reason) d.infeasible_by_reason[k] += v;
  }
  return out;
}

StepDensity gaussian_step_density(const lower::CvaeModel& model, std::size_t k, std::uint64_t seed, double min_std) {
  if (k < 2) throw SamplerError("step density needs at least two decoder samples");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  nn::RowMatrix z(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(model.arch.latent));
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n01(rng);
  return [&model, z, min_std](const lower::Context& ctx, const Action& a) {
    const auto draws = lower::decode_actions(model, ctx, z);
    const auto target = a.as_array();
    double lp = 0.0;
    for (std::size_t d = 0; d < 4; ++d) {
      double mean = 0.0;
      for (const auto& s : draws) mean += s.as_array()[d];
      mean /= static_cast<double>(draws.size());
      double var = 0.0;
      for (const auto& s : draws) var += (s.as_array()[d] - mean) * (s.as_array()[d] - mean);
      var /= static_cast<double>(draws.size() - 1);
      const double sd = std::max(std::sqrt(var), min_std);
      const double u = (target[d] - mean) / sd;
      lp += -0.5 * u * u - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    return lp;
  };
}

double segment_log_prob(const Trajectory& t, const StepDensity& density, std::size_t begin, std::size_t end) {
  if (begin > end || end > t.actions.size() || t.contexts.size() != t.actions.size())
    throw SamplerError("segment_log_prob: step range outside the trajectory");
  double total = 0.0;
  for (std::size_t j = begin; j < end; ++j) total += density(t.contexts[j], t.actions[j]);
  return total;
}

double rollout_log_prob(const Trajectory& t, const StepDensity& density) {
  if (t.status != Status::completed || t.actions.size() != t.planned_steps)
    throw SamplerError("rollout_log_prob: trajectory is not complete");
  return segment_log_prob(t, density, 0, t.actions.size());
}

bool trajectory_feasible(const Trajectory& t, const SceneSnapshot& snapshot, const SamplerConfig& config) {
  const RolloutSetup setup = setup_for(snapshot, t.area);
  const double dt = 1.0 / config.sample_rate;
  if (t.poses.size() != t.actions.size() + 1) return false;
  for (std::size_t j = 0; j < t.actions.size(); ++j) {
    const auto ctx = feasibility_context(setup, static_cast<double>(j + 1) * dt);
    if (!scene::check_feasible(t.actions[j], t.poses[j], config.limits, ctx, dt)) return false;
  }
  return true;
}

std::string to_jsonl(const ScenePrediction& p) {
  std::string out;
  for (const auto& t : p.trajectories) {
    nlohmann::json steps = nlohmann::json::array();
    for (std::size_t j = 0; j < t.poses.size(); ++j) {
      nlohmann::json s = {{"step", j},
                          {"pred", {t.poses[j].pred.x, t.poses[j].pred.y, t.poses[j].pred.v}},
                          {"ref", {t.poses[j].ref.x, t.poses[j].ref.y, t.poses[j].ref.v}}};
      if (j < t.actions.size()) {
        const auto a = t.actions[j].as_array();
        s["action"] = a;
        s["remaining_time"] = t.contexts[j].remaining_time;
      }
      steps.push_back(std::move(s));
    }
    nlohmann::json line = {{"area", t.area},
                           {"model", std::string(lower::to_string(t.model))},
                           {"index", t.index},
                           {"horizon", t.horizon},
                           {"planned_steps", t.planned_steps},
                           {"status", std::string(to_string(t.status))},
                           {"attempts", t.attempts},
                           {"final_density", t.final_density},
                           {"gate_threshold", t.gate_threshold},
                           {"virtual_reference", t.virtual_reference},
                           {"steps", steps}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::string to_csv(const ScenePrediction& p) {
  std::string out = "area,model,index,status,step,t,pred_x,pred_y,pred_v,ref_x,ref_y,ref_v\n";
  char buf[512];
  for (const auto& t : p.trajectories) {
    const double dt = t.planned_steps > 0 ? t.horizon / static_cast<double>(t.planned_steps) : 0.0;
    for (std::size_t j = 0; j < t.poses.size(); ++j) {
      const auto& q = t.poses[j];
      std::snprintf(buf, sizeof buf, "%d,%s,%zu,%s,%zu,%.4f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", t.area,
                    std::string(lower::to_string(t.model)).c_str(), t.index, std::string(to_string(t.status)).c_str(), j,
                    static_cast<double>(j) * dt, q.pred.x, q.pred.y, q.pred.v, q.ref.x, q.ref.y, q.ref.v);
      out += buf;
    }
  }
  return out;
}

}  // namespace scenepred::sampler
