#include "scenepred/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace scenepred::datagen {

using scene::LaneGeometry;
using scene::MotionKind;
using scene::SceneSnapshot;
using scene::Side;
using scene::VehicleState;

double idm_acceleration(const IdmParams& p, double v, std::optional<double> gap, double lead_v) {
  double a = p.max_accel * (1.0 - std::pow(std::max(v, 0.0) / p.desired_speed, 4));
  if (gap) {
    const double s = std::max(*gap, 0.1);
    const double desired =
        p.min_spacing + std::max(0.0, v * p.time_headway + v * (v - lead_v) / (2.0 * std::sqrt(p.max_accel * p.comfort_decel)));
    a -= p.max_accel * (desired / s) * (desired / s);
  }
  return a;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over a combined word.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

constexpr double kDt = 1.0 / kSampleRate;
constexpr double kSteepness = 3.2;  // sigmoid slope numerator: k = kSteepness / maneuver_time
constexpr double kAccelLag = 0.35;  // first-order response of applied to commanded acceleration

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

// Lateral profile of a lane change: monotone from y0 at t = 0 towards y1, crossing `mark` at t_c.
struct LateralProfile {
  double y0 = 0.0, y1 = 0.0, k = 1.0, t_mid = 0.0, s0 = 0.0;

  LateralProfile(double y0_, double y1_, double mark, double maneuver_time, double t_c) : y0(y0_), y1(y1_) {
    k = kSteepness / maneuver_time;
    const double p = (mark - y0) / (y1 - y0);
    if (!(p > 0.0 && p < 1.0)) throw GenerationError("lane mark is not between start and target lateral positions");
    // Progress at t_c decreases monotonically in t_mid; bisect for the crossing.
    double lo = 0.0, hi = t_c + 40.0;
    for (int it = 0; it < 200; ++it) {
      t_mid = 0.5 * (lo + hi);
      if (progress(t_c) > p) lo = t_mid; else hi = t_mid;
    }
    t_mid = 0.5 * (lo + hi);
  }

  double progress(double t) {
    s0 = sigmoid(-k * t_mid);
    return (sigmoid(k * (t - t_mid)) - s0) / (1.0 - s0);
  }
  double at(double t) { return y0 + (y1 - y0) * progress(t); }
};

struct Body {
  VehicleState state;
  double accel = 0.0;
};

double lane_mark(const LaneGeometry& lanes, int origin, Side side) {
  return side == Side::left ? lanes.left_mark(origin) : lanes.left_mark(origin - 1);
}

const Body* leader_of(const std::vector<Body>& bodies, const Body& me, int lane, int exclude = -1) {
  const Body* best = nullptr;
  for (const auto& b : bodies) {
    if (b.state.lane != lane || b.state.id == me.state.id || b.state.id == exclude || b.state.x <= me.state.x) continue;
    if (!best || b.state.x < best->state.x) best = &b;
  }
  return best;
}

double follow(const IdmParams& idm, const Body& me, const Body* lead) {
  if (!lead) return idm_acceleration(idm, me.state.v, std::nullopt, 0.0);
  const double gap = lead->state.rear() - me.state.front();
  return idm_acceleration(idm, me.state.v, gap, lead->state.v);
}

VehicleState make_vehicle(std::mt19937_64& rng, int lane, double x, double v, const LaneGeometry& lanes) {
  VehicleState s;
  s.lane = lane;
  s.x = x;
  s.v = v;
  s.length = uniform(rng, 4.0, 5.0);
  s.width = uniform(rng, 1.7, 2.0);
  s.y = lanes.center(lane) + uniform(rng, -0.15, 0.15);
  return s;
}

IdmParams cruise_idm(std::mt19937_64& rng, double v) {
  IdmParams p;
  p.desired_speed = std::max(v + uniform(rng, -1.0, 1.0), 5.0);
  p.max_accel = uniform(rng, 0.8, 1.4);
  p.comfort_decel = uniform(rng, 1.5, 2.5);
  p.time_headway = uniform(rng, 1.0, 1.8);
  return p;
}

void add_wander(std::mt19937_64& rng, VehicleSpec& spec, double amp_lo, double amp_hi) {
  spec.lateral_amplitude = uniform(rng, amp_lo, amp_hi);
  spec.lateral_period = uniform(rng, 4.0, 10.0);
  spec.lateral_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
}

// Places a vehicle ahead of (`sign` = +1) or behind (-1) `anchor` with the given bumper gap.
VehicleSpec neighbour(std::mt19937_64& rng, const VehicleState& anchor, int lane, int sign, double gap, double v,
                      const LaneGeometry& lanes) {
  VehicleSpec spec;
  spec.initial = make_vehicle(rng, lane, 0.0, v, lanes);
  spec.initial.x = anchor.x + sign * (0.5 * anchor.length + gap + 0.5 * spec.initial.length);
  spec.idm = cruise_idm(rng, v);
  add_wander(rng, spec, 0.0, 0.04);
  return spec;
}

double wander(const VehicleSpec& s, double t) {
  if (s.lateral_amplitude == 0.0) return s.initial.y;
  const double w = 2.0 * std::numbers::pi / s.lateral_period;
  return s.initial.y + s.lateral_amplitude * (std::sin(w * t + s.lateral_phase) - std::sin(s.lateral_phase));
}

}  // namespace

Scenario sample_scenario(MotionKind behavior, std::mt19937_64& rng, const GeneratorConfig& config) {
  Scenario sc;
  sc.behavior = behavior;
  sc.lanes = {config.lane_count, config.lane_width};
  const LaneGeometry& lanes = sc.lanes;
  const double v_lo = config.speed_min, v_hi = config.speed_max;
  auto clamp_v = [&](double v) { return std::clamp(v, v_lo, v_hi); };

  VehicleSpec pred;
  const double vp = uniform(rng, v_lo + 2.0, v_hi - 2.0);
  int lane = 0;
  if (behavior == MotionKind::keep) {
    lane = std::uniform_int_distribution<int>(0, lanes.lane_count - 1)(rng);
  } else {
    std::vector<std::pair<int, Side>> options;
    for (int l = 0; l < lanes.lane_count; ++l) {
      if (lanes.has_lane(l + 1)) options.emplace_back(l, Side::left);
      if (lanes.has_lane(l - 1)) options.emplace_back(l, Side::right);
    }
    if (options.empty()) throw GenerationError("a lane change needs at least two lanes");
    const auto pick = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
    lane = pick.first;
    sc.side = pick.second;
  }
  pred.initial = make_vehicle(rng, lane, uniform(rng, 0.0, 50.0), vp, lanes);
  pred.idm = cruise_idm(rng, vp);
  std::vector<VehicleSpec> others;

  if (behavior == MotionKind::keep) {
    add_wander(rng, pred, 0.03, 0.08);
    pred.idm.desired_speed = vp + uniform(rng, 0.0, 2.0);
    const double gap = uniform(rng, config.headway_min, config.headway_max);
    others.push_back(neighbour(rng, pred.initial, lane, +1, gap, clamp_v(vp + uniform(rng, -0.5, 2.0)), lanes));
    if (coin(rng, 0.5))
      others.push_back(neighbour(rng, pred.initial, lane, -1, uniform(rng, 15.0, 50.0), clamp_v(vp + uniform(rng, -1.0, 1.0)), lanes));
    for (int adj : {lane - 1, lane + 1}) {
      if (!lanes.has_lane(adj) || !coin(rng, 0.8)) continue;
      VehicleSpec n = neighbour(rng, pred.initial, adj, +1, 0.0, clamp_v(vp + uniform(rng, -2.0, 0.5)), lanes);
      n.initial.x = pred.initial.x + uniform(rng, -20.0, 20.0);
      others.push_back(n);
      if (coin(rng, 0.5))
        others.push_back(neighbour(rng, n.initial, adj, +1, uniform(rng, 20.0, 60.0), clamp_v(n.initial.v + uniform(rng, -1.0, 1.0)), lanes));
    }
  } else {
    const bool pass = behavior == MotionKind::pass;
    const int target = lane + (sc.side == Side::left ? 1 : -1);
    sc.maneuver_time = uniform(rng, config.maneuver_min, config.maneuver_max);
    sc.crossing_time = kWindowSteps * kDt - kDt * uniform(rng, 0.05, 0.95);
    sc.target_margin = uniform(rng, 1.0, 5.0);
    sc.cooperation = uniform(rng, 0.3, 1.0);
    sc.target_lateral_bias = uniform(rng, -0.15, 0.15);

    // Reference vehicle in the target lane; its initial offset is the main pass/yield cue.
    const double ref_v = pass ? vp + uniform(rng, -1.5, 1.0) : vp + uniform(rng, -0.5, 2.0);
    VehicleSpec ref = neighbour(rng, pred.initial, target, +1, 0.0, clamp_v(ref_v), lanes);
    ref.initial.x = pred.initial.x + (pass ? uniform(rng, -14.0, 4.0) : uniform(rng, -4.0, 14.0));
    ref.idm.desired_speed = pass ? ref.initial.v + uniform(rng, -0.5, 0.5) : ref.initial.v + uniform(rng, 1.0, 3.0);
    VehicleSpec ref_lead =
        neighbour(rng, ref.initial, target, +1, uniform(rng, 35.0, 60.0), clamp_v(ref.initial.v + uniform(rng, -1.0, 1.0)), lanes);
    others.push_back(ref);
    others.push_back(ref_lead);
    if (coin(rng, 0.6))
      others.push_back(neighbour(rng, ref.initial, target, -1, uniform(rng, 30.0, 60.0), clamp_v(ref.initial.v + uniform(rng, -1.0, 1.0)), lanes));

    // A slow own-lane leader motivates the change.
    others.push_back(neighbour(rng, pred.initial, lane, +1, uniform(rng, 25.0, 55.0), clamp_v(vp - uniform(rng, 0.5, 3.0)), lanes));
    if (coin(rng, 0.5))
      others.push_back(neighbour(rng, pred.initial, lane, -1, uniform(rng, 15.0, 40.0), clamp_v(vp + uniform(rng, -1.0, 1.0)), lanes));
    // The lane on the other side, if any, is slower than the target lane.
    const int away = lane + (sc.side == Side::left ? -1 : 1);
    if (lanes.has_lane(away) && coin(rng, 0.8)) {
      VehicleSpec n = neighbour(rng, pred.initial, away, +1, 0.0, clamp_v(vp - uniform(rng, 0.5, 3.0)), lanes);
      n.initial.x = pred.initial.x + uniform(rng, -20.0, 20.0);
      others.push_back(n);
    }
  }

  // Ids: the predicted vehicle is 0, the rest are shuffled so that ids carry no role information.
  std::vector<int> ids(others.size());
  std::iota(ids.begin(), ids.end(), 1);
  std::shuffle(ids.begin(), ids.end(), rng);
  pred.initial.id = 0;
  sc.predicted_id = 0;
  for (std::size_t i = 0; i < others.size(); ++i) others[i].initial.id = ids[i];
  // The first neighbour is the reference: the target-lane vehicle, or the own-lane leader for keep.
  sc.reference_id = others.front().initial.id;
  sc.vehicles.push_back(pred);
  for (auto& o : others) sc.vehicles.push_back(o);
  return sc;
}

Episode simulate(const Scenario& sc, const GeneratorConfig& config) {
  const LaneGeometry& lanes = sc.lanes;
  const bool lane_change = sc.behavior != MotionKind::keep;
  auto spec_index = [&](int id) {
    for (std::size_t i = 0; i < sc.vehicles.size(); ++i)
      if (sc.vehicles[i].initial.id == id) return i;
    throw GenerationError("scenario has no vehicle " + std::to_string(id));
  };
  const std::size_t ip = spec_index(sc.predicted_id);
  const std::size_t ir = spec_index(sc.reference_id);

  std::vector<Body> bodies;
  for (const auto& v : sc.vehicles) bodies.push_back({v.initial, 0.0});

  SceneSnapshot first{0.0, sc.predicted_id, {}, lanes};
  for (const auto& b : bodies) first.vehicles.push_back(b.state);
  try {
    first.validate(kSampleRate);
  } catch (const scene::SceneError& e) {
    throw GenerationError(std::string("infeasible initial layout: ") + e.what());
  }

  const VehicleSpec& pspec = sc.vehicles[ip];
  const double t_c = sc.crossing_time;
  std::optional<LateralProfile> profile;
  double mark = 0.0;
  if (lane_change) {
    if (!(t_c > (kWindowSteps - 1) * kDt && t_c < kWindowSteps * kDt))
      throw GenerationError("crossing time must fall inside the last step of the window");
    const int target = pspec.initial.lane + (sc.side == Side::left ? 1 : -1);
    if (!lanes.has_lane(target)) throw GenerationError("lane change leaves the road");
    mark = lane_mark(lanes, pspec.initial.lane, sc.side);
    profile.emplace(pspec.initial.y, lanes.center(target) + sc.target_lateral_bias, mark, sc.maneuver_time, t_c);
  }
  const double ref_len = sc.vehicles[ir].initial.length;
  const double desired_offset = (sc.behavior == MotionKind::pass ? 1.0 : -1.0) *
                                (0.5 * ref_len + scene::kInsertionMargin * pspec.initial.length + sc.target_margin);

  Episode ep;
  ep.behavior = sc.behavior;
  ep.frames.push_back(first);
  for (int step = 0; step < kWindowSteps; ++step) {
    const double t = step * kDt;
    const double t_next = t + kDt;
    std::vector<double> cmd(bodies.size());
    for (std::size_t i = 0; i < bodies.size(); ++i) {
      const Body& me = bodies[i];
      const IdmParams& idm = sc.vehicles[i].idm;
      double a = follow(idm, me, leader_of(bodies, me, me.state.lane, i == ir ? sc.predicted_id : -1));
      if (lane_change && i == ip) {
        const Body& ref = bodies[ir];
        const double remaining = std::max(t_c - t, 0.8);
        const double d = me.state.x - ref.state.x;
        double plan = 2.0 * (desired_offset - d - (me.state.v - ref.state.v) * remaining) / (remaining * remaining);
        plan = sc.behavior == MotionKind::pass ? std::clamp(plan, 0.0, 3.0) : std::clamp(plan, -3.5, 0.0);
        // The own-lane leader only matters while close and still mostly in the origin lane.
        const Body* lead = leader_of(bodies, me, me.state.lane);
        const bool close = lead && lead->state.rear() - me.state.front() < 12.0;
        a = close && profile->progress(t) < 0.5 ? std::min(plan, a) : plan;
      } else if (lane_change && i == ir && sc.behavior == MotionKind::pass) {
        const Body& p = bodies[ip];
        if (p.state.x > me.state.x && profile->progress(t) > 0.3) a = std::min(a, -sc.cooperation);
      }
      cmd[i] = a;
    }
    for (std::size_t i = 0; i < bodies.size(); ++i) {
      Body& b = bodies[i];
      b.accel += kAccelLag * (cmd[i] - b.accel);
      b.accel = std::clamp(b.accel, -config.accel_limit, config.accel_limit);
      b.state.v = std::max(0.0, b.state.v + b.accel * kDt);
      b.state.x += b.state.v * kDt;
      b.state.y = (lane_change && i == ip) ? profile->at(t_next) : wander(sc.vehicles[i], t_next);
    }
    SceneSnapshot snap{std::round(t_next * kSampleRate) / kSampleRate, sc.predicted_id, {}, lanes};
    for (const auto& b : bodies) snap.vehicles.push_back(b.state);
    ep.frames.push_back(std::move(snap));
  }

  // ---- labels and invariants ----
  const int side_base = sc.side == Side::left ? 1 : 3;
  ep.label_area = lane_change ? side_base + (sc.behavior == MotionKind::pass ? 1 : 0) : 5;
  ep.reference_id = sc.reference_id;
  ep.insertion_lateral = ep.frames.back().predicted().y;
  for (int j = 0; j <= kWindowSteps; ++j)
    ep.ttlc.push_back(lane_change ? (kWindowSteps - j) * kDt : kKeepHorizon);

  for (std::size_t j = 0; j < ep.frames.size(); ++j) {
    const auto& f = ep.frames[j];
    try {
      f.validate(kSampleRate);
    } catch (const scene::SceneError& e) {
      throw GenerationError("frame " + std::to_string(j) + ": " + e.what());
    }
    const auto dias = scene::extract_dias(f);
    if (!dias.live(ep.label_area)) throw GenerationError("label area vanishes at frame " + std::to_string(j));
    if (dias.at(ep.label_area).reference_id != ep.reference_id)
      throw GenerationError("reference vehicle changes at frame " + std::to_string(j));
    if (lane_change) {
      const double y = f.predicted().y;
      const bool beyond = sc.side == Side::left ? y > mark : y < mark;
      if (beyond != (j == static_cast<std::size_t>(kWindowSteps)))
        throw GenerationError("lane mark crossing is not at the last frame");
    }
  }
  if (lane_change) {
    const auto& last = ep.frames.back();
    const auto dia = scene::extract_dias(last).at(ep.label_area);
    if (!dia.contains(last.predicted().x)) throw GenerationError("insertion point lies outside the labeled area");
    if (sc.behavior == MotionKind::pass && last.predicted().v < last.find(sc.reference_id)->v)
      throw GenerationError("pass ends slower than the reference");
  } else {
    double lo = 1e300, hi = -1e300;
    for (const auto& f : ep.frames) lo = std::min(lo, f.predicted().y), hi = std::max(hi, f.predicted().y);
    if (hi - lo >= 0.2) throw GenerationError("keep episode drifts laterally");
  }

  const auto actions = episode_actions(ep);
  for (std::size_t j = 0; j < actions.size(); ++j) {
    const auto& f = ep.frames[j];
    const auto inter = scene::interaction_state(f, scene::extract_dias(f).at(ep.label_area));
    scene::FeasibilityContext ctx{inter.pred_length, inter.pred_width, inter.ref_length, inter.ref_width,
                                  inter.virtual_reference, {}};
    for (const auto& v : ep.frames[j + 1].vehicles) {
      if (v.id == sc.predicted_id || (!inter.virtual_reference && v.id == sc.reference_id)) continue;
      ctx.others.push_back({{v.x, v.y, v.v}, v.length, v.width});
    }
    const auto ok = scene::check_feasible(actions[j], inter.pose, {}, ctx, kDt);
    if (!ok) throw GenerationError("transition " + std::to_string(j) + " infeasible: " + std::string(scene::to_string(ok.reason)));
  }
  return ep;
}

std::vector<scene::Action> episode_actions(const Episode& episode) {
  std::vector<scene::Action> out;
  for (std::size_t j = 0; j + 1 < episode.frames.size(); ++j) {
    const auto& a = episode.frames[j];
    const auto& b = episode.frames[j + 1];
    const auto dia = scene::extract_dias(a).at(episode.label_area);
    const auto now = scene::interaction_state(a, dia);
    const VehicleState& p0 = a.predicted();
    const VehicleState& p1 = b.predicted();
    scene::Action act{p1.y - p0.y, p1.v - p0.v, 0.0, 0.0};
    if (!now.virtual_reference) {
      const VehicleState* r0 = a.find(*dia.reference_id);
      const VehicleState* r1 = b.find(*dia.reference_id);
      if (!r1) throw GenerationError("reference vehicle missing from the next frame");
      act.dx_ref = r1->y - r0->y;
      act.dv_ref = r1->v - r0->v;
    }
    out.push_back(act);
  }
  return out;
}

Episode generate_episode(std::uint64_t seed, MotionKind behavior, const GeneratorConfig& config) {
  std::mt19937_64 rng(seed);
  std::string last_error;
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    Scenario sc = sample_scenario(behavior, rng, config);
    try {
      Episode ep = simulate(sc, config);
      ep.seed = seed;
      return ep;
    } catch (const GenerationError& e) {
      last_error = e.what();
    }
  }
  throw GenerationError("no valid " + std::string(scene::to_string(behavior)) + " episode for seed " +
                        std::to_string(seed) + " after " + std::to_string(config.max_attempts) +
                        " attempts (last: " + last_error + ")");
}

std::vector<Episode> generate_dataset(std::size_t count, std::uint64_t seed, const GeneratorConfig& config) {
  static constexpr MotionKind kOrder[] = {MotionKind::yield, MotionKind::pass, MotionKind::keep};
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Episode ep = generate_episode(derive_seed(seed, i), kOrder[i % 3], config);
    ep.id = i;
    out.push_back(std::move(ep));
  }
  return out;
}

namespace {

VehicleSpec scripted(int id, int lane, double x, double v, const LaneGeometry& lanes, double desired) {
  VehicleSpec s;
  s.initial = {id, x, lanes.center(lane), v, 4.5, 1.8, lane};
  s.idm.desired_speed = desired;
  return s;
}

}  // namespace

Episode scripted_episode(ScriptedCase which) {
  Scenario sc;
  sc.lanes = {3, scene::kDefaultLaneWidth};
  sc.side = Side::right;
  sc.maneuver_time = 2.0;
  sc.crossing_time = 3.95;
  sc.target_margin = 3.0;
  sc.cooperation = 0.6;
  const auto& L = sc.lanes;
  if (which == ScriptedCase::pass_right) {
    sc.behavior = MotionKind::pass;
    sc.vehicles = {scripted(0, 1, 100.0, 16.0, L, 16.0), scripted(1, 0, 94.0, 15.0, L, 15.0),
                   scripted(2, 0, 150.0, 15.5, L, 15.5), scripted(3, 1, 135.0, 13.0, L, 13.0),
                   scripted(4, 2, 95.0, 14.0, L, 14.0), scripted(5, 0, 55.0, 15.0, L, 15.0)};
  } else {
    sc.behavior = MotionKind::yield;
    sc.vehicles = {scripted(0, 1, 100.0, 16.0, L, 16.0), scripted(1, 0, 102.0, 16.0, L, 18.0),
                   scripted(2, 0, 150.0, 16.5, L, 16.5), scripted(3, 1, 135.0, 13.0, L, 13.0),
                   scripted(4, 2, 95.0, 14.0, L, 14.0), scripted(5, 0, 55.0, 16.0, L, 16.0)};
  }
  sc.predicted_id = 0;
  sc.reference_id = 1;
  Episode ep = simulate(sc);
  ep.source = "scripted";
  return ep;
}

scene::SceneSnapshot exemplar_snapshot() {
  // Predicted vehicle in the middle of three lanes with a reference vehicle on each side and a
  // leader in its own lane: all five areas are live.
  SceneSnapshot s;
  s.timestamp = 0.0;
  s.predicted_id = 0;
  s.lanes = {3, scene::kDefaultLaneWidth};
  const auto& L = s.lanes;
  s.vehicles = {
      {0, 100.0, L.center(1), 15.0, 4.5, 1.8, 1}, {1, 103.0, L.center(2), 16.5, 4.5, 1.8, 2},
      {2, 150.0, L.center(2), 16.0, 4.5, 1.8, 2}, {3, 60.0, L.center(2), 16.0, 4.5, 1.8, 2},
      {4, 96.0, L.center(0), 13.5, 4.5, 1.8, 0},  {5, 140.0, L.center(0), 13.0, 4.5, 1.8, 0},
      {6, 130.0, L.center(1), 12.5, 4.5, 1.8, 1},
  };
  return s;
}

}  // namespace scenepred::datagen
