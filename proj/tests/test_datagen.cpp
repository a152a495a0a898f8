#include "scenepred/datagen.hpp"

#include <doctest.h>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace scenepred;
using namespace scenepred::datagen;
using scene::MotionKind;

namespace {

const std::vector<Episode>& sample_episodes() {
  static const auto eps = generate_dataset(60, 11);
  return eps;
}

// Ljung-Box portmanteau p-value for lags 1..h.
double ljung_box_p(const std::vector<double>& e, int h) {
  const double n = static_cast<double>(e.size());
  double mean = 0.0;
  for (double x : e) mean += x;
  mean /= n;
  double c0 = 0.0;
  for (double x : e) c0 += (x - mean) * (x - mean);
  double q = 0.0;
  for (int k = 1; k <= h; ++k) {
    double ck = 0.0;
    for (std::size_t i = static_cast<std::size_t>(k); i < e.size(); ++i) ck += (e[i] - mean) * (e[i - k] - mean);
    const double r = ck / c0;
    q += r * r / (n - k);
  }
  q *= n * (n + 2.0);
  return boost::math::gamma_q(h / 2.0, q / 2.0);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("scenepred_datagen_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generated episodes satisfy behavior invariants") {
  const auto& eps = sample_episodes();
  int counts[3] = {0, 0, 0};
  for (const auto& ep : eps) {
    ++counts[static_cast<int>(ep.behavior)];
    REQUIRE(ep.frames.size() == static_cast<std::size_t>(kWindowSteps + 1));
    REQUIRE(ep.ttlc.size() == ep.frames.size());
    CHECK(scene::kind_of_area(ep.label_area) == ep.behavior);
    for (std::size_t j = 0; j < ep.frames.size(); ++j) {
      const auto& f = ep.frames[j];
      CHECK(f.timestamp == doctest::Approx(ep.frames[0].timestamp + 0.1 * static_cast<double>(j)));
      const auto dias = scene::extract_dias(f);
      REQUIRE(dias.live(ep.label_area));
      CHECK(dias.at(ep.label_area).reference_id == ep.reference_id);
    }
    if (ep.behavior == MotionKind::keep) {
      double lo = 1e9, hi = -1e9;
      for (const auto& f : ep.frames) lo = std::min(lo, f.predicted().y), hi = std::max(hi, f.predicted().y);
      CHECK(hi - lo < 0.2);
      for (double t : ep.ttlc) CHECK(t == kKeepHorizon);
    } else {
      for (std::size_t j = 0; j + 1 < ep.ttlc.size(); ++j) CHECK(ep.ttlc[j] - ep.ttlc[j + 1] == doctest::Approx(0.1));
      CHECK(ep.ttlc.back() == doctest::Approx(0.0));
      // Insertion frame: the predicted vehicle has crossed into the target lane inside the area.
      const auto& last = ep.frames.back();
      const auto dia = scene::extract_dias(last).at(ep.label_area);
      const double x = last.predicted().x;
      CHECK(x >= dia.rear_bound);
      CHECK(x <= dia.front_bound);
      const double mark = last.lanes.center(last.predicted().lane) + (dia.side == scene::Side::left ? 0.5 : -0.5) * last.lanes.lane_width;
      CHECK(ep.insertion_lateral == last.predicted().y);
      CHECK(std::abs(ep.insertion_lateral - mark) < 0.5);
      if (ep.behavior == MotionKind::pass) CHECK(last.predicted().v >= last.find(*ep.reference_id)->v);
      if (ep.behavior == MotionKind::yield) CHECK(x < last.find(*ep.reference_id)->x);
    }
  }
  CHECK(counts[0] == 20);
  CHECK(counts[1] == 20);
  CHECK(counts[2] == 20);
}

TEST_CASE("episode actions are feasible and replay the relative state") {
  for (const auto& ep : sample_episodes()) {
    const auto actions = episode_actions(ep);
    const scene::FeasibilityLimits limits;
    REQUIRE(actions.size() == ep.steps());
    for (std::size_t j = 0; j < actions.size(); ++j) {
      const auto& a = actions[j];
      CHECK(std::abs(a.dx_pred) <= limits.max_lateral_step + 1e-9);
      CHECK(std::abs(a.dv_pred) <= limits.max_speed_step + 1e-9);
      const auto d0 = scene::extract_dias(ep.frames[j]).at(ep.label_area);
      const auto d1 = scene::extract_dias(ep.frames[j + 1]).at(ep.label_area);
      const auto s0 = scene::interaction_state(ep.frames[j], d0).state;
      const auto s1 = scene::interaction_state(ep.frames[j + 1], d1).state;
      const auto next = scene::step_state(s0, a, ep.dt());
      if (ep.behavior != MotionKind::keep || ep.reference_id) {
        CHECK(next.dx == doctest::Approx(s1.dx).epsilon(1e-9));
        CHECK(next.dy == doctest::Approx(s1.dy).epsilon(1e-9));
      }
      CHECK(next.v_pred == doctest::Approx(s1.v_pred).epsilon(1e-9));
    }
  }
}

TEST_CASE("generator is reproducible per seed") {
  const auto a = generate_episode(42, MotionKind::pass);
  const auto b = generate_episode(42, MotionKind::pass);
  CHECK(episode_to_json(a).dump() == episode_to_json(b).dump());
  const auto c = generate_episode(43, MotionKind::pass);
  CHECK(episode_to_json(a).dump() != episode_to_json(c).dump());
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  CHECK(derive_seed(5, 7) == derive_seed(5, 7));
}

TEST_CASE("idm examples") {
  const IdmParams p;
  CHECK(idm_acceleration(p, 0.0, std::nullopt, 0.0) == doctest::Approx(p.max_accel));
  CHECK(idm_acceleration(p, p.desired_speed, std::nullopt, 0.0) == doctest::Approx(0.0));
  CHECK(idm_acceleration(p, 20.0, 5.0, 10.0) < -p.comfort_decel);
}

TEST_CASE("smoother is exact on noiseless tracks") {
  std::vector<TrackSample> track;
  for (int k = 0; k < 80; ++k) {
    const double t = 0.1 * k;
    track.push_back({t, 3.0 + 12.0 * t + 0.5 * 0.8 * t * t, 1.85 + 0.3 * t});
  }
  const auto out = smooth_track(track);
  REQUIRE(out.states.size() == track.size());
  for (std::size_t k = 10; k < track.size(); ++k) {
    const double t = track[k].t;
    CHECK(std::abs(out.states[k].x - track[k].x) < 1e-6);
    CHECK(std::abs(out.states[k].y - track[k].y) < 1e-6);
    CHECK(std::abs(out.states[k].vx - (12.0 + 0.8 * t)) < 1e-6);
    CHECK(std::abs(out.states[k].vy - 0.3) < 1e-6);
    CHECK(std::abs(out.states[k].ax - 0.8) < 1e-6);
  }
}

TEST_CASE("smoother rejects bad input") {
  CHECK_THROWS_AS(smooth_track({}), std::invalid_argument);
  std::vector<TrackSample> two{{0.0, 0.0, 0.0}, {0.1, 1.0, 0.0}};
  CHECK_THROWS_AS(smooth_track(two), std::invalid_argument);
  std::vector<TrackSample> uneven{{0.0, 0.0, 0.0}, {0.1, 1.0, 0.0}, {0.25, 2.0, 0.0}, {0.3, 3.0, 0.0}};
  CHECK_THROWS_AS(smooth_track(uneven), std::invalid_argument);
}

TEST_CASE("smoother innovations are white on model-consistent data") {
  const SmootherConfig cfg;
  const double dt = 0.1;
  // Exact discretization of the filter's own process model.
  Eigen::Matrix3d qx;
  qx << std::pow(dt, 5) / 20, std::pow(dt, 4) / 8, std::pow(dt, 3) / 6, std::pow(dt, 4) / 8, std::pow(dt, 3) / 3,
      dt * dt / 2, std::pow(dt, 3) / 6, dt * dt / 2, dt;
  qx *= cfg.jerk_noise;
  Eigen::Matrix2d qy;
  qy << std::pow(dt, 3) / 3, dt * dt / 2, dt * dt / 2, dt;
  qy *= cfg.lateral_accel_noise;
  const Eigen::Matrix3d lx = qx.llt().matrixL();
  const Eigen::Matrix2d ly = qy.llt().matrixL();

  // Under whiteness the p-values are uniform, so about 1% of tracks fall below 0.01.
  const int tracks = 100;
  int rejected = 0;
  double var_sum = 0.0;
  std::size_t var_n = 0;
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < tracks; ++trial) {
    Eigen::Vector3d sx(0.0, 15.0, 0.0);
    Eigen::Vector2d sy(1.85, 0.0);
    std::vector<TrackSample> track;
    for (int k = 0; k < 400; ++k) {
      track.push_back({dt * k, sx(0) + cfg.measurement_noise_x * n(rng), sy(0) + cfg.measurement_noise_y * n(rng)});
      const Eigen::Vector3d wx(n(rng), n(rng), n(rng));
      const Eigen::Vector2d wy(n(rng), n(rng));
      sx = Eigen::Vector3d(sx(0) + dt * sx(1) + 0.5 * dt * dt * sx(2), sx(1) + dt * sx(2), sx(2)) + lx * wx;
      sy = Eigen::Vector2d(sy(0) + dt * sy(1), sy(1)) + ly * wy;
    }
    const auto out = smooth_track(track, cfg);
    REQUIRE(out.normalized_innovations.size() == track.size() - 3);
    for (int c = 0; c < 2; ++c) {
      std::vector<double> e;
      for (const auto& w : out.normalized_innovations) e.push_back(w[c]);
      rejected += ljung_box_p(e, 10) < 0.01;
      for (double x : e) var_sum += x * x;
      var_n += e.size();
    }
  }
  MESSAGE("Ljung-Box rejections at 1%: " << rejected << " of " << 2 * tracks);
  CHECK(rejected <= 6);
  CHECK(std::abs(var_sum / static_cast<double>(var_n) - 1.0) < 0.03);
}

TEST_CASE("csv ingestion labels windows") {
  const auto dir = temp_dir("ingest");
  const auto path = dir / "tracks.csv";
  {
    std::ofstream out(path);
    out << "id,frame,lon,lat,lane\n";
    // Vehicle 1 changes left at frame 50 after 40 frames of drift; vehicle 2 is overtaken.
    for (int f = 0; f < 60; ++f) {
      const double y = f < 10 ? 1.85 : std::min(1.85 + 1.85 * (f - 10) / 40.0, 5.55);
      out << 1 << ',' << f << ',' << 1.5 * f << ',' << y << ',' << (f < 50 ? 1 : 2) << '\n';
      out << 2 << ',' << f << ',' << -30.0 + 1.2 * f << ',' << 5.55 << ',' << 2 << '\n';
      out << 3 << ',' << f << ',' << 100.0 + 1.5 * f << ',' << 1.85 << ',' << 1 << '\n';
    }
    for (int f = 0; f < 20; ++f) out << 4 << ',' << f << ',' << 500.0 + f << ',' << 5.55 << ',' << 2 << '\n';
  }
  ColumnMapping m;
  m.vehicle_id = "id";
  m.frame = "frame";
  m.longitudinal = "lon";
  m.lateral = "lat";
  m.lane = "lane";
  m.unit_scale = 1.0;
  m.lateral_sign = 1.0;
  m.lanes_left_to_right = false;
  m.lane_count = 2;
  m.lane_width = 3.7;
  const auto r = ingest_csv(path, m);
  CHECK(r.errors.empty());

  const Episode* pass = nullptr;
  const Episode* keep3 = nullptr;
  for (const auto& ep : r.episodes) {
    const int id = ep.frames.front().predicted_id;
    if (id == 1) pass = &ep;
    if (id == 3) keep3 = &ep;
  }
  REQUIRE(pass != nullptr);
  CHECK(pass->behavior == MotionKind::pass);
  CHECK(pass->label_area == 2);
  CHECK(pass->reference_id == 2);
  CHECK(pass->frames.size() == static_cast<std::size_t>(kWindowSteps + 1));
  CHECK(pass->frames.front().timestamp == doctest::Approx(1.0));
  CHECK(pass->ttlc.front() == doctest::Approx(4.0));
  CHECK(pass->ttlc.back() == doctest::Approx(0.0));
  CHECK(pass->source == "csv");

  REQUIRE(keep3 != nullptr);
  CHECK(keep3->behavior == MotionKind::keep);
  CHECK(keep3->frames.front().timestamp == doctest::Approx(0.0));

  bool short_warned = false;
  for (const auto& w : r.warnings) short_warned |= w.vehicle_id == 4;
  CHECK(short_warned);
  for (const auto& ep : r.episodes) CHECK(ep.frames.front().predicted_id != 4);
}

TEST_CASE("csv ingestion reports malformed input") {
  const auto dir = temp_dir("ingest_bad");
  CHECK_THROWS(ingest_csv(dir / "missing.csv"));
  {
    std::ofstream out(dir / "cols.csv");
    out << "Vehicle_ID,Frame_ID,Local_Y\n1,1,0\n";
  }
  CHECK_THROWS(ingest_csv(dir / "cols.csv"));
  {
    std::ofstream out(dir / "gap.csv");
    out << "Vehicle_ID,Frame_ID,Local_Y,Local_X,Lane_ID\n";
    for (int f = 0; f < 50; ++f) out << "7," << (f < 20 ? f : f + 3) << ',' << f * 5.0 << ",6.0,3\n";
  }
  const auto r = ingest_csv(dir / "gap.csv");
  REQUIRE(r.errors.size() == 1);
  CHECK(r.errors[0].vehicle_id == 7);
  CHECK(r.episodes.empty());
}

TEST_CASE("split and dataset round trip") {
  const auto& eps = sample_episodes();
  std::mt19937_64 r1(3), r2(3);
  const auto a = split(eps, 0.8, r1);
  const auto b = split(eps, 0.8, r2);
  CHECK(a.train.size() == 48);
  CHECK(a.test.size() == 12);
  std::set<std::uint64_t> ids;
  for (const auto& e : a.train) ids.insert(e.id);
  for (const auto& e : a.test) CHECK(ids.insert(e.id).second);
  CHECK(ids.size() == eps.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(a.test[i].id == b.test[i].id);
  CHECK_THROWS(split(eps, 1.0, r1));
  CHECK_THROWS(split(eps, 0.0, r1));

  const auto dir = temp_dir("dataset");
  write_dataset(dir / "d.jsonl", eps);
  const auto back = read_dataset(dir / "d.jsonl");
  REQUIRE(back.size() == eps.size());
  CHECK(dataset_to_jsonl(back) == dataset_to_jsonl(eps));
  CHECK(back[5].frames[3].vehicles[0].x == eps[5].frames[3].vehicles[0].x);
}
