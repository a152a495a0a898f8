#include "scenepred/datagen.hpp"
#include "scenepred/scene.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace scenepred;
using namespace scenepred::scene;

namespace {

SceneSnapshot two_lane(double ref_x, double ref_v) {
  SceneSnapshot s;
  s.lanes = {2, 3.7};
  s.predicted_id = 0;
  s.vehicles = {{0, 0.0, 1.85, 10.0, 4.5, 1.8, 0}, {1, ref_x, 5.55, ref_v, 4.5, 1.8, 1}};
  return s;
}

}  // namespace

TEST_CASE("exemplar layout has five areas") {
  const auto s = datagen::exemplar_snapshot();
  s.validate();
  const auto dias = extract_dias(s);
  CHECK(dias.live_count() == 5);
  const MotionKind expected[] = {MotionKind::yield, MotionKind::pass, MotionKind::yield, MotionKind::pass, MotionKind::keep};
  for (int a = 1; a <= 5; ++a) {
    REQUIRE(dias.live(a));
    CHECK(dias.at(a).kind == expected[a - 1]);
    CHECK(dias.at(a).kind == kind_of_area(a));
    CHECK(dias.at(a).length() > 0.0);
  }
  CHECK(dias.at(1).side == Side::left);
  CHECK(dias.at(3).side == Side::right);
  CHECK(dias.at(1).reference_id == dias.at(2).reference_id);
}

TEST_CASE("missing neighbours mask their areas") {
  auto s = datagen::exemplar_snapshot();
  const int left = s.predicted().lane + 1;
  std::erase_if(s.vehicles, [&](const VehicleState& v) { return v.lane == left; });
  const auto dias = extract_dias(s);
  CHECK(dias.live_count() == 3);
  CHECK_FALSE(dias.live(1));
  CHECK_FALSE(dias.live(2));
  const auto mask = dias.mask();
  CHECK(mask == std::array<bool, 5>{false, false, true, true, true});

  SceneSnapshot one;
  one.lanes = {1, 3.7};
  one.vehicles = {{0, 0.0, 1.85, 10.0, 4.5, 1.8, 0}, {1, 30.0, 1.85, 10.0, 4.5, 1.8, 0}};
  const auto d1 = extract_dias(one);
  CHECK(d1.live_count() == 1);
  CHECK(d1.live(5));
  CHECK(d1.at(5).reference_id == 1);
}

TEST_CASE("absent predicted vehicle is an error") {
  auto s = datagen::exemplar_snapshot();
  s.predicted_id = 99;
  CHECK_THROWS_AS(extract_dias(s), SceneError);
  CHECK_THROWS_AS(s.validate(), SceneError);
}

TEST_CASE("snapshot validation") {
  auto s = datagen::exemplar_snapshot();
  auto dup = s;
  dup.vehicles.push_back(dup.vehicles.back());
  CHECK_THROWS_AS(dup.validate(), SceneError);
  auto overlap = s;
  overlap.vehicles[1].x = overlap.vehicles[0].x;
  overlap.vehicles[1].y = overlap.vehicles[0].y;
  overlap.vehicles[1].lane = overlap.vehicles[0].lane;
  CHECK_THROWS_AS(overlap.validate(), SceneError);
  auto neg = s;
  neg.vehicles[2].v = -1.0;
  CHECK_THROWS_AS(neg.validate(), SceneError);
  auto lane = s;
  lane.vehicles[2].lane = 7;
  CHECK_THROWS_AS(lane.validate(), SceneError);
  auto off_grid = s;
  off_grid.timestamp = 0.05;
  CHECK_THROWS_AS(off_grid.validate(), SceneError);
}

TEST_CASE("extract_dias is permutation invariant") {
  const auto s = datagen::exemplar_snapshot();
  const auto ref = extract_dias(s);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    auto p = s;
    std::shuffle(p.vehicles.begin(), p.vehicles.end(), rng);
    const auto d = extract_dias(p);
    for (int a = 1; a <= 5; ++a) {
      REQUIRE(d.live(a) == ref.live(a));
      if (!d.live(a)) continue;
      CHECK(d.at(a).reference_id == ref.at(a).reference_id);
      CHECK(d.at(a).rear_bound == ref.at(a).rear_bound);
      CHECK(d.at(a).front_bound == ref.at(a).front_bound);
    }
  }
}

TEST_CASE("interaction state arithmetic") {
  const auto s = two_lane(5.0 + 1e-9, 12.0);
  const auto dias = extract_dias(s);
  const int area = dias.live(2) ? 2 : 1;
  const auto in = interaction_state(s, dias.at(area));
  CHECK(in.state.v_pred == 10.0);
  CHECK(in.state.v_ref == 12.0);
  CHECK(in.state.dx == doctest::Approx(5.0));
  CHECK(in.state.dy == doctest::Approx(3.7));

  SceneSnapshot one;
  one.lanes = {1, 3.7};
  one.vehicles = {{0, 0.0, 1.85, 10.0, 4.5, 1.8, 0}, {1, 30.0, 1.85, 11.0, 4.5, 1.8, 0}};
  const auto keep = interaction_state(one, extract_dias(one).at(5));
  CHECK(keep.observation.empty());
  CHECK_FALSE(keep.virtual_reference);

  Dia dangling{2, MotionKind::pass, Side::left, 42, 0.0, 10.0};
  CHECK_THROWS_AS(interaction_state(s, dangling), SceneError);
}

TEST_CASE("pass observation uses the sentinel for a missing leader") {
  const auto s = two_lane(-20.0, 12.0);
  const auto dias = extract_dias(s);
  REQUIRE(dias.live(2));
  const auto in = interaction_state(s, dias.at(2));
  REQUIRE(in.observation.size() == 4);
  CHECK(in.observation[0] == kSentinelHeadway);
  CHECK(in.observation[1] == 10.0);
  CHECK(in.observation[2] == kSentinelHeadway);
  CHECK(in.observation[3] == 12.0);
  CHECK(observation_dim(MotionKind::yield) == 2);
}

TEST_CASE("step_state examples and linearity") {
  const InteractionState s{15.0, 15.0, 8.0, 3.7};
  const double dt = 0.1;
  const auto z = step_state(s, {}, dt);
  CHECK(z.dx == s.dx);
  CHECK(z.dy == s.dy);

  const auto a = step_state(s, {0.3, 0, 0, 0}, dt);
  CHECK(a.dy == doctest::Approx(s.dy - 0.3));
  CHECK(a.v_pred == s.v_pred);
  CHECK(a.v_ref == s.v_ref);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const InteractionState r{10 + 5 * u(rng), 10 + 5 * u(rng), 20 * u(rng), 4 * u(rng)};
    const Action a1{u(rng), u(rng), u(rng), u(rng)}, a2{u(rng), u(rng), u(rng), u(rng)};
    const auto base = step_state(r, {}, dt).as_array();
    const auto s12 = step_state(r, a1 + a2, dt).as_array();
    const auto s1 = step_state(r, a1, dt).as_array();
    const auto s2 = step_state(r, a2, dt).as_array();
    for (int k = 0; k < 4; ++k) CHECK(s12[k] - base[k] == doctest::Approx((s1[k] - base[k]) + (s2[k] - base[k])));

    // Poses and state advance consistently.
    const JointPose p{{0.0, 1.85, r.v_pred}, {r.dx, 1.85 + r.dy, r.v_ref}};
    const auto q = step_pose(p, a1, dt).state().as_array();
    const auto t = step_state(p.state(), a1, dt).as_array();
    for (int k = 0; k < 4; ++k) CHECK(q[k] == doctest::Approx(t[k]));
  }
}

TEST_CASE("feasibility examples") {
  const FeasibilityLimits limits;
  const JointPose pose{{0.0, 1.85, 15.0}, {20.0, 5.55, 15.0}};
  const FeasibilityContext ctx;
  CHECK(bool(check_feasible({}, pose, limits, ctx, 0.1)));

  const auto hard = check_feasible({0.0, -15.0, 0.0, 0.0}, pose, limits, ctx, 0.1);
  CHECK_FALSE(bool(hard));
  CHECK(to_string(hard.reason) == "velocity-change");
  CHECK(check_feasible({0.5, 0.0, 0.0, 0.0}, pose, limits, ctx, 0.1).reason == Infeasibility::lateral);
  const JointPose slow{{0.0, 1.85, 0.2}, {20.0, 5.55, 15.0}};
  CHECK(check_feasible({0.0, -0.4, 0.0, 0.0}, slow, limits, ctx, 0.1).reason == Infeasibility::speed_range);

  // Reference alongside: moving the predicted vehicle left into it overlaps the rectangles.
  const JointPose side{{0.0, 1.85, 15.0}, {0.5, 3.9, 15.0}};
  const auto hit = check_feasible({0.3, 0.0, 0.0, 0.0}, side, limits, ctx, 0.1);
  CHECK(hit.reason == Infeasibility::collision);
  // Independent rectangle test on the post-step poses.
  const auto after = step_pose(side, {0.3, 0.0, 0.0, 0.0}, 0.1);
  const bool overlap_x = std::abs(after.pred.x - after.ref.x) < 4.5;
  const bool overlap_y = std::abs(after.pred.y - after.ref.y) < 1.8;
  CHECK((overlap_x && overlap_y));
  CHECK(clearance(after.pred, 4.5, 1.8, after.ref, 4.5, 1.8) < 0.0);

  // Other traffic counts too.
  FeasibilityContext busy;
  busy.others.push_back({{5.0, 1.85, 15.0}, 4.5, 1.8});
  CHECK(check_feasible({0.0, 0.5, 0.0, 0.0}, pose, limits, busy, 0.1).reason == Infeasibility::collision);
}

TEST_CASE("zero action is feasible in generated scenes") {
  const auto episodes = datagen::generate_dataset(30, 5);
  const FeasibilityLimits limits;
  for (const auto& ep : episodes) {
    for (std::size_t j = 0; j < ep.frames.size(); j += 7) {
      const auto& s = ep.frames[j];
      const auto dias = extract_dias(s);
      for (const auto& d : dias.list()) {
        const auto in = interaction_state(s, d);
        FeasibilityContext ctx{in.pred_length, in.pred_width, in.ref_length, in.ref_width, in.virtual_reference, {}};
        for (const auto& v : s.vehicles) {
          if (v.id == s.predicted_id || (d.reference_id && v.id == *d.reference_id)) continue;
          ctx.others.push_back({{v.x + v.v * 0.1, v.y, v.v}, v.length, v.width});
        }
        CHECK(bool(check_feasible({}, in.pose, limits, ctx, 0.1)));
      }
    }
  }
}
