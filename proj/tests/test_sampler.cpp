#include "scenepred/sampler.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

using namespace scenepred;
using namespace scenepred::sampler;
using lower::ModelType;

namespace {

struct Fixture {
  scene::SceneSnapshot snapshot = datagen::exemplar_snapshot();
  lower::CvaeModel yield, pass, keep;
  upper::UpperPrediction upper;

  Fixture() {
    const auto eps = datagen::generate_dataset(30, 8);
    std::mt19937_64 rng(1);
    auto make = [&](ModelType type) {
      const auto data = lower::transitions(eps, type);
      std::vector<std::vector<double>> xs, ys;
      for (const auto& t : data) {
        xs.push_back(t.x);
        ys.emplace_back(t.y.begin(), t.y.end());
      }
      lower::CvaeArch arch;
      arch.hidden = {16, 16};
      return lower::init_cvae(type, lower::input_dim(type), arch, lower::Scaler::fit(xs, lower::input_dim(type)),
                              lower::Scaler::fit(ys, lower::kActionDim), rng);
    };
    yield = make(ModelType::yield);
    pass = make(ModelType::pass);
    keep = make(ModelType::keep);

    const auto& pred = snapshot.predicted();
    const double left = snapshot.lanes.left_mark(pred.lane);
    const double right = left - snapshot.lanes.lane_width;
    const double ys[] = {left, left, right, right, pred.y};
    const double w[] = {0.1, 0.3, 0.1, 0.2, 0.3};
    for (std::size_t k = 0; k < scene::kNumAreas; ++k) {
      upper.mask[k] = true;
      upper.weights[k] = w[k];
      upper.areas[k] = gmm::Gmm2D({gmm::Component2D{1.0, {ys[k], 2.0}, {1.5, 0.8}, 0.0}});
    }
  }

  MotionModels models() const { return {&yield, &pass, &keep}; }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

SamplerConfig ungated(std::size_t n = 40) {
  SamplerConfig c;
  c.samples = n;
  c.gate = false;
  return c;
}

}  // namespace

TEST_CASE("allocation examples") {
  SamplerConfig c;
  c.samples = 100;
  using A = std::array<std::size_t, 5>;
  CHECK(allocate({0.5, 0.3, 0.15, 0.04, 0.01}, c) == A{50, 30, 15, 0, 0});
  CHECK(allocate({0.0, 0.0, 0.0, 0.0, 1.0}, c) == A{0, 0, 0, 0, 100});
  c.samples = 3;
  const auto even = allocate({0.2, 0.2, 0.2, 0.2, 0.2}, c);
  CHECK(std::accumulate(even.begin(), even.end(), std::size_t{0}) == 3);
  c.samples = 10;
  CHECK_THROWS_AS(allocate({0.5, 0.5, 0.5, 0.0, 0.0}, c), SamplerError);
}

TEST_CASE("allocation properties") {
  std::mt19937_64 rng(2);
  std::gamma_distribution<double> g(0.5, 1.0);
  std::uniform_int_distribution<std::size_t> n(1, 300);
  for (int i = 0; i < 2000; ++i) {
    std::array<double, 5> w{};
    double total = 0.0;
    for (double& x : w) total += (x = g(rng));
    if (total == 0.0) continue;
    for (double& x : w) x /= total;
    SamplerConfig c;
    c.samples = n(rng);
    c.w_min = 0.05;
    const auto a = allocate(w, c);
    std::size_t sum = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      sum += a[k];
      if (w[k] <= c.w_min) CHECK(a[k] == 0);
      else CHECK(std::abs(static_cast<double>(a[k]) - c.samples * w[k]) <= 1.0);
    }
    CHECK(sum <= c.samples);
  }
}

TEST_CASE("rollout invariants over seeded scenes") {
  const auto& f = fixture();
  const double dt = 0.1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const auto p = predict_scene(f.snapshot, f.upper, f.models(), ungated(), rng);
    std::array<std::size_t, 5> per_area{};
    for (const auto& t : p.trajectories) {
      ++per_area[static_cast<std::size_t>(t.area - 1)];
      CHECK(lower::kind_of(t.model) == scene::kind_of_area(t.area));
      CHECK(t.horizon >= 0.1);
      CHECK(t.horizon <= 4.0);
      CHECK(t.planned_steps == static_cast<std::size_t>(std::max(1LL, std::llround(t.horizon * 10.0))));
      if (t.status != Status::completed) continue;
      REQUIRE(t.steps() == t.planned_steps);
      REQUIRE(t.poses.size() == t.steps() + 1);
      for (std::size_t j = 0; j < t.steps(); ++j)
        CHECK(t.contexts[j].remaining_time == doctest::Approx(t.horizon - static_cast<double>(j) * dt));
      CHECK(trajectory_feasible(t, f.snapshot, ungated()));
      const auto& first = t.poses.front();
      const auto in = scene::interaction_state(f.snapshot, scene::extract_dias(f.snapshot).at(t.area));
      CHECK(first.pred.x == in.pose.pred.x);
      CHECK(first.ref.y == in.pose.ref.y);
    }
    CHECK(per_area == p.allocation);
    CHECK(p.diagnostics.completed > p.trajectories.size() / 2);
    CHECK(p.diagnostics.completed + p.diagnostics.rejected_destination + p.diagnostics.exhausted_retries ==
          p.trajectories.size());
  }
}

TEST_CASE("prediction is reproducible and thread-count independent") {
  const auto& f = fixture();
  std::mt19937_64 a(5), b(5);
  auto cfg = ungated(30);
  const auto x = predict_scene(f.snapshot, f.upper, f.models(), cfg, a);
  cfg.threads = 3;
  const auto y = predict_scene(f.snapshot, f.upper, f.models(), cfg, b);
  CHECK(to_jsonl(x) == to_jsonl(y));
  CHECK(to_csv(x) == to_csv(y));
}

TEST_CASE("fixed horizon and gate behaviour") {
  const auto& f = fixture();
  auto cfg = ungated();
  cfg.fixed_horizon = 2.0;
  std::mt19937_64 rng(6);
  const auto t = rollout(f.snapshot, 5, f.keep, f.upper, cfg, rng);
  CHECK(t.horizon == 2.0);
  CHECK(t.planned_steps == 20);

  // A destination far from anything reachable is never accepted.
  auto far = f.upper;
  far.areas[4] = gmm::Gmm2D({gmm::Component2D{1.0, {f.snapshot.predicted().y + 30.0, 2.0}, {0.1, 0.5}, 0.0}});
  SamplerConfig gated;
  gated.sample_retries = 3;
  const auto r = rollout(f.snapshot, 5, f.keep, far, gated, rng);
  CHECK(r.status == Status::rejected_destination);
  CHECK(r.attempts == 3);
  CHECK(r.gate_threshold == doctest::Approx(0.01 * far.area(5).marginal(gmm::Axis::location).peak_density()));
  CHECK(r.final_density < r.gate_threshold);

  gated.gate_mode = GateMode::absolute;
  gated.epsilon = 0.0;
  CHECK(rollout(f.snapshot, 5, f.keep, far, gated, rng).status == Status::completed);
}

TEST_CASE("impossible limits exhaust the step budget") {
  const auto& f = fixture();
  auto cfg = ungated();
  cfg.limits.max_lateral_step = 1e-12;
  cfg.step_retries = 4;
  std::mt19937_64 rng(7);
  const auto t = rollout(f.snapshot, 2, f.pass, f.upper, cfg, rng);
  CHECK(t.status == Status::exhausted_retries);
  CHECK(t.step_resamples == 4);
  CHECK(t.infeasible_by_reason.at("lateral") == 4);
}

TEST_CASE("model and scene mismatches are errors") {
  const auto& f = fixture();
  std::mt19937_64 rng(8);
  CHECK_THROWS_AS(rollout(f.snapshot, 2, f.yield, f.upper, ungated(), rng), SamplerError);
  CHECK_THROWS_AS(rollout_as(f.snapshot, 5, f.pass, f.upper, ungated(), rng), SamplerError);
  CHECK_NOTHROW(rollout_as(f.snapshot, 2, f.yield, f.upper, ungated(), rng));
  MotionModels missing{&f.yield, nullptr, &f.keep};
  CHECK_THROWS_AS(predict_scene(f.snapshot, f.upper, missing, ungated(), rng), SamplerError);
  auto bad = ungated();
  bad.t_min = 5.0;
  CHECK_THROWS_AS(predict_scene(f.snapshot, f.upper, f.models(), bad, rng), SamplerError);
}

TEST_CASE("trajectory log-probability is additive over segments") {
  const auto& f = fixture();
  const auto density = gaussian_step_density(f.pass, 100);
  std::mt19937_64 rng(9);
  auto cfg = ungated();
  cfg.fixed_horizon = 1.5;
  const auto t = rollout(f.snapshot, 2, f.pass, f.upper, cfg, rng);
  REQUIRE(t.status == Status::completed);
  const double full = rollout_log_prob(t, density);
  CHECK(std::isfinite(full));
  for (std::size_t k : {0u, 1u, 7u, 15u})
    CHECK(segment_log_prob(t, density, 0, k) + segment_log_prob(t, density, k, t.steps()) == doctest::Approx(full));
  CHECK(density(t.contexts[0], t.actions[0]) == density(t.contexts[0], t.actions[0]));
}

TEST_CASE("exports") {
  const auto& f = fixture();
  std::mt19937_64 rng(10);
  const auto p = predict_scene(f.snapshot, f.upper, f.models(), ungated(12), rng);
  std::istringstream lines(to_jsonl(p));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto& t = p.trajectories[n++];
    CHECK(j.at("area") == t.area);
    CHECK(j.at("steps").size() == t.poses.size());
  }
  CHECK(n == p.trajectories.size());

  std::size_t rows = 0;
  for (const auto& t : p.trajectories) rows += t.poses.size();
  const auto csv = to_csv(p);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == rows + 1);
  CHECK(csv.rfind("area,model,index,status,step,t,pred_x,pred_y,pred_v,ref_x,ref_y,ref_v\n", 0) == 0);
}

TEST_CASE("configuration round trip and validation") {
  SamplerConfig c;
  c.fixed_horizon = 2.5;
  c.gate_mode = GateMode::absolute;
  const auto back = SamplerConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["w_min"] = 1.0;
  CHECK_THROWS(SamplerConfig::from_json(j));
  j = c.to_json();
  j["gate_mode"] = "sideways";
  CHECK_THROWS(SamplerConfig::from_json(j));
}
