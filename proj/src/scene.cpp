#include "scenepred/scene.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace scenepred::scene {

std::vector<double> LaneGeometry::centers() const {
  std::vector<double> out;
  for (int i = 0; i < lane_count; ++i) out.push_back(center(i));
  return out;
}

const VehicleState* SceneSnapshot::find(int id) const {
  for (const auto& v : vehicles)
    if (v.id == id) return &v;
  return nullptr;
}

const VehicleState& SceneSnapshot::predicted() const {
  const VehicleState* p = find(predicted_id);
  if (!p) throw SceneError("predicted vehicle " + std::to_string(predicted_id) + " is not in the snapshot");
  return *p;
}

void SceneSnapshot::validate(double sample_rate) const {
  if (lanes.lane_count < 1 || !(lanes.lane_width > 0.0)) throw SceneError("invalid lane geometry");
  std::set<int> ids;
  int predicted_count = 0;
  for (const auto& v : vehicles) {
    if (!ids.insert(v.id).second) throw SceneError("duplicate vehicle id " + std::to_string(v.id));
    if (v.id == predicted_id) ++predicted_count;
    if (!std::isfinite(v.x) || !std::isfinite(v.y) || !std::isfinite(v.v))
      throw SceneError("vehicle " + std::to_string(v.id) + " has non-finite state");
    if (v.v < 0.0) throw SceneError("vehicle " + std::to_string(v.id) + " has negative speed");
    if (!(v.length > 0.0) || !(v.width > 0.0))
      throw SceneError("vehicle " + std::to_string(v.id) + " has non-positive dimensions");
    if (!lanes.has_lane(v.lane)) throw SceneError("vehicle " + std::to_string(v.id) + " is on a nonexistent lane");
  }
  if (predicted_count != 1) throw SceneError("snapshot must contain exactly one predicted vehicle");
  for (std::size_t i = 0; i < vehicles.size(); ++i) {
    for (std::size_t j = i + 1; j < vehicles.size(); ++j) {
      const auto& a = vehicles[i];
      const auto& b = vehicles[j];
      if (clearance({a.x, a.y, a.v}, a.length, a.width, {b.x, b.y, b.v}, b.length, b.width) < 0.0) {
        throw SceneError("vehicles " + std::to_string(a.id) + " and " + std::to_string(b.id) + " overlap");
      }
    }
  }
  const double ticks = timestamp * sample_rate;
  if (std::abs(ticks - std::round(ticks)) > 1e-6) throw SceneError("timestamp is off the sampling grid");
}

std::string_view to_string(MotionKind kind) {
  switch (kind) {
    case MotionKind::yield: return "yield";
    case MotionKind::pass: return "pass";
    case MotionKind::keep: return "keep";
  }
  return "?";
}

std::string_view to_string(Side side) {
  switch (side) {
    case Side::left: return "left";
    case Side::right: return "right";
    case Side::own: return "own";
  }
  return "?";
}

MotionKind parse_motion_kind(std::string_view name) {
  if (name == "yield") return MotionKind::yield;
  if (name == "pass") return MotionKind::pass;
  if (name == "keep") return MotionKind::keep;
  throw std::invalid_argument("unknown motion kind '" + std::string(name) + "'");
}

Side parse_side(std::string_view name) {
  if (name == "left") return Side::left;
  if (name == "right") return Side::right;
  if (name == "own") return Side::own;
  throw std::invalid_argument("unknown side '" + std::string(name) + "'");
}

double side_sign(Side side) { return side == Side::right ? -1.0 : 1.0; }

MotionKind kind_of_area(int area_id) {
  switch (area_id) {
    case 1: case 3: return MotionKind::yield;
    case 2: case 4: return MotionKind::pass;
    case 5: return MotionKind::keep;
    default: throw std::out_of_range("area id " + std::to_string(area_id) + " out of range");
  }
}

Side side_of_area(int area_id) {
  switch (area_id) {
    case 1: case 2: return Side::left;
    case 3: case 4: return Side::right;
    case 5: return Side::own;
    default: throw std::out_of_range("area id " + std::to_string(area_id) + " out of range");
  }
}

bool DiaSet::live(int area_id) const {
  return area_id >= 1 && area_id <= kNumAreas && areas[static_cast<std::size_t>(area_id - 1)].has_value();
}

const Dia& DiaSet::at(int area_id) const {
  if (!live(area_id)) throw std::out_of_range("area " + std::to_string(area_id) + " is not live");
  return *areas[static_cast<std::size_t>(area_id - 1)];
}

std::array<bool, kNumAreas> DiaSet::mask() const {
  std::array<bool, kNumAreas> m{};
  for (std::size_t i = 0; i < areas.size(); ++i) m[i] = areas[i].has_value();
  return m;
}

int DiaSet::live_count() const {
  return static_cast<int>(std::count_if(areas.begin(), areas.end(), [](const auto& a) { return a.has_value(); }));
}

std::vector<Dia> DiaSet::list() const {
  std::vector<Dia> out;
  for (const auto& a : areas)
    if (a) out.push_back(*a);
  return out;
}

namespace {

// Deterministic orderings independent of the vehicle list order: ties break on id.
const VehicleState* nearest_in_lane(const SceneSnapshot& s, int lane, double x, int exclude) {
  const VehicleState* best = nullptr;
  for (const auto& v : s.vehicles) {
    if (v.lane != lane || v.id == exclude) continue;
    const double d = std::abs(v.x - x);
    if (!best || d < std::abs(best->x - x) || (d == std::abs(best->x - x) && v.id < best->id)) best = &v;
  }
  return best;
}

const VehicleState* leader_in_lane(const SceneSnapshot& s, int lane, double x, int exclude) {
  const VehicleState* best = nullptr;
  for (const auto& v : s.vehicles) {
    if (v.lane != lane || v.id == exclude || v.x <= x) continue;
    if (!best || v.x < best->x || (v.x == best->x && v.id < best->id)) best = &v;
  }
  return best;
}

const VehicleState* follower_in_lane(const SceneSnapshot& s, int lane, double x, int exclude) {
  const VehicleState* best = nullptr;
  for (const auto& v : s.vehicles) {
    if (v.lane != lane || v.id == exclude || v.x >= x) continue;
    if (!best || v.x > best->x || (v.x == best->x && v.id < best->id)) best = &v;
  }
  return best;
}

void add_side_areas(const SceneSnapshot& s, const VehicleState& pred, Side side, DiaSet& out) {
  const int lane = pred.lane + (side == Side::left ? 1 : -1);
  if (!s.lanes.has_lane(lane)) return;
  const VehicleState* ref = nearest_in_lane(s, lane, pred.x, pred.id);
  if (!ref) return;
  const double margin = kInsertionMargin * pred.length;
  const int yield_id = side == Side::left ? 1 : 3;
  const int pass_id = yield_id + 1;

  const VehicleState* follower = follower_in_lane(s, lane, ref->x, ref->id);
  Dia yield{yield_id, MotionKind::yield, side, ref->id, 0.0, ref->rear() - margin};
  yield.rear_bound = follower ? follower->front() + 0.5 * pred.length : yield.front_bound - kSentinelHeadway;
  if (yield.front_bound > yield.rear_bound) out.areas[static_cast<std::size_t>(yield_id - 1)] = yield;

  const VehicleState* leader = leader_in_lane(s, lane, ref->x, ref->id);
  Dia pass{pass_id, MotionKind::pass, side, ref->id, ref->front() + margin, 0.0};
  pass.front_bound = leader ? leader->rear() - 0.5 * pred.length : pass.rear_bound + kSentinelHeadway;
  if (pass.front_bound > pass.rear_bound) out.areas[static_cast<std::size_t>(pass_id - 1)] = pass;
}

}  // namespace

DiaSet extract_dias(const SceneSnapshot& snapshot) {
  const VehicleState& pred = snapshot.predicted();
  DiaSet out;
  add_side_areas(snapshot, pred, Side::left, out);
  add_side_areas(snapshot, pred, Side::right, out);
  const VehicleState* leader = leader_in_lane(snapshot, pred.lane, pred.x, pred.id);
  Dia keep{5, MotionKind::keep, Side::own, std::nullopt, pred.front(), pred.front() + kSentinelHeadway};
  if (leader) {
    keep.reference_id = leader->id;
    keep.front_bound = leader->rear();
  }
  if (keep.front_bound > keep.rear_bound) out.areas[4] = keep;
  return out;
}

std::size_t observation_dim(MotionKind kind) {
  switch (kind) {
    case MotionKind::pass: return 4;
    case MotionKind::yield: return 2;
    case MotionKind::keep: return 0;
  }
  return 0;
}

std::vector<double> make_observation(MotionKind kind, const JointPose& pose, const ObservationSources& sources) {
  auto leader_state = [](const std::optional<Pose>& leader, const Pose& follower) -> std::array<double, 2> {
    if (!leader) return {kSentinelHeadway, follower.v};
    return {leader->x - follower.x, leader->v};
  };
  switch (kind) {
    case MotionKind::pass: {
      const auto a = leader_state(sources.pred_leader, pose.pred);
      const auto b = leader_state(sources.ref_leader, pose.ref);
      return {a[0], a[1], b[0], b[1]};
    }
    case MotionKind::yield: {
      const auto a = leader_state(sources.pred_leader, pose.pred);
      return {a[0], a[1]};
    }
    case MotionKind::keep: return {};
  }
  return {};
}

Interaction interaction_state(const SceneSnapshot& snapshot, const Dia& dia) {
  const VehicleState& pred = snapshot.predicted();
  Interaction out;
  out.pose.pred = {pred.x, pred.y, pred.v};
  out.pred_length = pred.length;
  out.pred_width = pred.width;

  const VehicleState* ref = nullptr;
  if (dia.reference_id) {
    ref = snapshot.find(*dia.reference_id);
    if (!ref) throw SceneError("area " + std::to_string(dia.area_id) + " references missing vehicle " +
                               std::to_string(*dia.reference_id));
    out.pose.ref = {ref->x, ref->y, ref->v};
    out.ref_length = ref->length;
    out.ref_width = ref->width;
  } else if (dia.kind == MotionKind::keep) {
    out.virtual_reference = true;
    out.pose.ref = {pred.x + kSentinelHeadway, pred.y, pred.v};
  } else {
    throw SceneError("area " + std::to_string(dia.area_id) + " has no reference vehicle");
  }

  if (const VehicleState* pl = leader_in_lane(snapshot, pred.lane, pred.x, pred.id);
      pl && (!ref || pl->id != ref->id)) {
    out.sources.pred_leader = Pose{pl->x, pl->y, pl->v};
    out.pred_leader_id = pl->id;
  }
  if (ref) {
    if (const VehicleState* rl = leader_in_lane(snapshot, ref->lane, ref->x, ref->id); rl && rl->id != pred.id) {
      out.sources.ref_leader = Pose{rl->x, rl->y, rl->v};
      out.ref_leader_id = rl->id;
    }
  }
  out.state = out.pose.state();
  out.observation = make_observation(dia.kind, out.pose, out.sources);
  return out;
}

InteractionState step_state(const InteractionState& s, const Action& a, double dt) {
  InteractionState n;
  n.v_pred = s.v_pred + a.dv_pred;
  n.v_ref = s.v_ref + a.dv_ref;
  n.dx = s.dx + (n.v_ref - n.v_pred) * dt;
  n.dy = s.dy - (a.dx_pred - a.dx_ref);
  return n;
}

JointPose step_pose(const JointPose& p, const Action& a, double dt) {
  JointPose n = p;
  n.pred.v += a.dv_pred;
  n.pred.y += a.dx_pred;
  n.pred.x += n.pred.v * dt;
  n.ref.v += a.dv_ref;
  n.ref.y += a.dx_ref;
  n.ref.x += n.ref.v * dt;
  return n;
}

std::string_view to_string(Infeasibility reason) {
  switch (reason) {
    case Infeasibility::none: return "none";
    case Infeasibility::lateral: return "lateral";
    case Infeasibility::velocity_change: return "velocity-change";
    case Infeasibility::speed_range: return "speed-range";
    case Infeasibility::collision: return "collision";
  }
  return "?";
}

double clearance(const Pose& a, double len_a, double wid_a, const Pose& b, double len_b, double wid_b) {
  const double gx = std::abs(a.x - b.x) - 0.5 * (len_a + len_b);
  const double gy = std::abs(a.y - b.y) - 0.5 * (wid_a + wid_b);
  if (gx > 0.0 && gy > 0.0) return std::hypot(gx, gy);
  return std::max(gx, gy);
}

Feasibility check_feasible(const Action& a, const JointPose& current, const FeasibilityLimits& limits,
                           const FeasibilityContext& context, double dt) {
  if (!std::isfinite(a.dx_pred) || !std::isfinite(a.dv_pred) || !std::isfinite(a.dx_ref) || !std::isfinite(a.dv_ref))
    return {Infeasibility::velocity_change};
  if (std::abs(a.dx_pred) > limits.max_lateral_step || std::abs(a.dx_ref) > limits.max_lateral_step)
    return {Infeasibility::lateral};
  if (std::abs(a.dv_pred) > limits.max_speed_step || std::abs(a.dv_ref) > limits.max_speed_step)
    return {Infeasibility::velocity_change};

  auto speed_bad = [&](double v0, double dv) {
    const double v = v0 + dv;
    return v < 0.0 || (v > limits.v_max && dv > 0.0);
  };
  if (speed_bad(current.pred.v, a.dv_pred) || (!context.virtual_reference && speed_bad(current.ref.v, a.dv_ref)))
    return {Infeasibility::speed_range};

  const JointPose moved = step_pose(current, a, dt);
  const JointPose coast = step_pose(current, Action{}, dt);
  auto violates = [&](const Pose& p_moved, const Pose& p_coast, double l1, double w1, const Pose& q_moved,
                      const Pose& q_coast, double l2, double w2) {
    const double c = clearance(p_moved, l1, w1, q_moved, l2, w2);
    const double c0 = clearance(p_coast, l1, w1, q_coast, l2, w2);
    return c < limits.min_gap && c < c0 - 1e-9;
  };
  if (!context.virtual_reference &&
      violates(moved.pred, coast.pred, context.pred_length, context.pred_width, moved.ref, coast.ref,
               context.ref_length, context.ref_width))
    return {Infeasibility::collision};
  for (const auto& o : context.others) {
    if (violates(moved.pred, coast.pred, context.pred_length, context.pred_width, o.pose, o.pose, o.length, o.width))
      return {Infeasibility::collision};
    if (!context.virtual_reference &&
        violates(moved.ref, coast.ref, context.ref_length, context.ref_width, o.pose, o.pose, o.length, o.width))
      return {Infeasibility::collision};
  }
  return {};
}

}  // namespace scenepred::scene
