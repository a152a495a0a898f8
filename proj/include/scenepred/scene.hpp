#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace scenepred::scene {

inline constexpr double kDefaultLaneWidth = 3.7;
// Stand-in headway for a missing leader or an unbounded gap.
inline constexpr double kSentinelHeadway = 200.0;
inline constexpr int kNumAreas = 5;
// Insertion margin around a reference vehicle, in multiples of the predicted vehicle's length.
inline constexpr double kInsertionMargin = 1.5;

class SceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct VehicleState {
  int id = 0;
  double x = 0.0;  // longitudinal center [m]
  double y = 0.0;  // lateral center [m], increasing to the left
  double v = 0.0;  // longitudinal speed [m/s]
  double length = 4.5;
  double width = 1.8;
  int lane = 0;  // 0 is the rightmost lane

  double front() const { return x + 0.5 * length; }
  double rear() const { return x - 0.5 * length; }
};

struct LaneGeometry {
  int lane_count = 3;
  double lane_width = kDefaultLaneWidth;

  bool has_lane(int lane) const { return lane >= 0 && lane < lane_count; }
  double center(int lane) const { return (lane + 0.5) * lane_width; }
  // Lateral coordinate of the marking between `lane` and `lane + 1`.
  double left_mark(int lane) const { return (lane + 1) * lane_width; }
  std::vector<double> centers() const;
};

struct SceneSnapshot {
  double timestamp = 0.0;
  int predicted_id = 0;
  std::vector<VehicleState> vehicles;
  LaneGeometry lanes;

  const VehicleState* find(int id) const;
  const VehicleState& predicted() const;
  // Throws SceneError on: missing/duplicate predicted vehicle, duplicate ids, negative speed,
  // non-positive dimensions, lane index out of range, overlapping vehicles, or a timestamp off
  // the 1/sample_rate grid.
  void validate(double sample_rate = 10.0) const;
};

enum class MotionKind { yield, pass, keep };
enum class Side { left, right, own };

std::string_view to_string(MotionKind kind);
std::string_view to_string(Side side);
MotionKind parse_motion_kind(std::string_view name);
Side parse_side(std::string_view name);
// +1 for left and own-lane areas, -1 for right: lateral quantities are mirrored by this sign so
// that the reference always sits on the positive side.
double side_sign(Side side);

// Dynamic Insertion Area. Bounds are admissible longitudinal positions of the predicted vehicle's
// center once it has inserted.
struct Dia {
  int area_id = 0;  // 1..5
  MotionKind kind = MotionKind::keep;
  Side side = Side::own;
  std::optional<int> reference_id;
  double rear_bound = 0.0;
  double front_bound = 0.0;

  double length() const { return front_bound - rear_bound; }
  bool contains(double x) const { return x >= rear_bound && x <= front_bound; }
};

// Fixed slots: 1 left-yield, 2 left-pass, 3 right-yield, 4 right-pass, 5 keep.
struct DiaSet {
  std::array<std::optional<Dia>, kNumAreas> areas;

  bool live(int area_id) const;
  const Dia& at(int area_id) const;
  std::array<bool, kNumAreas> mask() const;
  int live_count() const;
  std::vector<Dia> list() const;
};

MotionKind kind_of_area(int area_id);
Side side_of_area(int area_id);

DiaSet extract_dias(const SceneSnapshot& snapshot);

struct InteractionState {
  double v_pred = 0.0;
  double v_ref = 0.0;
  double dx = 0.0;  // x_ref - x_pred
  double dy = 0.0;  // y_ref - y_pred

  std::array<double, 4> as_array() const { return {v_pred, v_ref, dx, dy}; }
};

struct Action {
  double dx_pred = 0.0;  // lateral displacement of the predicted vehicle over one step [m]
  double dv_pred = 0.0;  // longitudinal speed change [m/s]
  double dx_ref = 0.0;
  double dv_ref = 0.0;

  std::array<double, 4> as_array() const { return {dx_pred, dv_pred, dx_ref, dv_ref}; }
  static Action from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
  Action operator+(const Action& o) const {
    return {dx_pred + o.dx_pred, dv_pred + o.dv_pred, dx_ref + o.dx_ref, dv_ref + o.dv_ref};
  }
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double v = 0.0;
};

struct JointPose {
  Pose pred;
  Pose ref;

  InteractionState state() const { return {pred.v, ref.v, ref.x - pred.x, ref.y - pred.y}; }
};

// Vehicles ahead of the predicted and the reference vehicle, when present.
struct ObservationSources {
  std::optional<Pose> pred_leader;
  std::optional<Pose> ref_leader;
};

// pass: [pred-leader headway, pred-leader speed, ref-leader headway, ref-leader speed]
// yield: [pred-leader headway, pred-leader speed]
// keep: []
// A missing leader is encoded as kSentinelHeadway ahead at the follower's own speed.
std::size_t observation_dim(MotionKind kind);
std::vector<double> make_observation(MotionKind kind, const JointPose& pose, const ObservationSources& sources);

struct Interaction {
  InteractionState state;
  std::vector<double> observation;
  JointPose pose;
  ObservationSources sources;
  double pred_length = 4.5, pred_width = 1.8;
  double ref_length = 4.5, ref_width = 1.8;
  bool virtual_reference = false;  // keep area without a leader
  std::optional<int> pred_leader_id;
  std::optional<int> ref_leader_id;
};

Interaction interaction_state(const SceneSnapshot& snapshot, const Dia& dia);

// The linear map f: speeds take the speed changes, lateral offsets take the displacements and the
// longitudinal gap advances by (v_ref - v_pred) * dt using post-update speeds.
InteractionState step_state(const InteractionState& s, const Action& a, double dt);
JointPose step_pose(const JointPose& p, const Action& a, double dt);

struct FeasibilityLimits {
  double max_lateral_step = 0.35;  // [m per step]
  double max_speed_step = 0.5;     // [m/s per step]
  double v_max = 40.0;
  double min_gap = 0.5;
};

enum class Infeasibility { none, lateral, velocity_change, speed_range, collision };
std::string_view to_string(Infeasibility reason);

struct Feasibility {
  Infeasibility reason = Infeasibility::none;
  explicit operator bool() const { return reason == Infeasibility::none; }
};

struct Obstacle {
  Pose pose;  // pose after the step being checked
  double length = 4.5;
  double width = 1.8;
};

struct FeasibilityContext {
  double pred_length = 4.5, pred_width = 1.8;
  double ref_length = 4.5, ref_width = 1.8;
  bool virtual_reference = false;
  std::vector<Obstacle> others;
};

// Axis-aligned clearance between two rectangles; negative when they overlap.
double clearance(const Pose& a, double len_a, double wid_a, const Pose& b, double len_b, double wid_b);

// Per-step bounds on displacement and speed change, speed range, and clearance. A pair of
// vehicles violates the clearance rule when the action leaves them closer than min_gap and closer
// than coasting (the zero action) would, so the zero action is always feasible.
Feasibility check_feasible(const Action& a, const JointPose& current, const FeasibilityLimits& limits,
                           const FeasibilityContext& context, double dt);

}  // namespace scenepred::scene
