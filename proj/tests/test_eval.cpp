#include "scenepred/eval.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace scenepred;
using namespace scenepred::eval;
using lower::ModelType;

namespace {

Track constant(std::size_t n, double lateral, double velocity) {
  return {std::vector<double>(n, lateral), std::vector<double>(n, velocity)};
}

struct Models {
  std::vector<datagen::Episode> episodes = datagen::generate_dataset(15, 31);
  lower::CvaeModel yield, pass, keep, pass_notime;
  upper::UpperModel upper;

  Models() {
    std::mt19937_64 rng(2);
    lower::LowerTrainConfig cfg;
    cfg.epochs = 2;
    cfg.arch.hidden = {16, 16};
    yield = lower::train_lower(episodes, ModelType::yield, cfg, rng).model;
    pass = lower::train_lower(episodes, ModelType::pass, cfg, rng).model;
    keep = lower::train_lower(episodes, ModelType::keep, cfg, rng).model;
    pass_notime = lower::train_lower(episodes, ModelType::pass_notime, cfg, rng).model;
    upper::UpperArch arch;
    arch.hidden = {8};
    upper = upper::init_upper(arch, upper::Normalizer::identity(), upper::LabelScaler{}, rng);
  }

  EvalModels all() const { return {&yield, &pass, &keep, &pass_notime}; }
};

const Models& models() {
  static const Models m;
  return m;
}

}  // namespace

TEST_CASE("rmse examples") {
  const Track truth = constant(10, 0.0, 20.0);
  const Track same[] = {constant(10, 0.0, 20.0)};
  CHECK(rmse(truth, same, 10).lateral == 0.0);
  CHECK(rmse(truth, same, 10).velocity == 0.0);

  const Track off[] = {constant(10, 0.5, 20.5), constant(10, -0.5, 19.5)};
  CHECK(rmse(truth, off, 10).lateral == doctest::Approx(0.5));
  CHECK(rmse(truth, off, 6).velocity == doctest::Approx(0.5));

  const Track half[] = {constant(4, 1.0, 20.0), constant(4, 0.0, 20.0)};
  CHECK(rmse(truth, half, 4).lateral == doctest::Approx(std::sqrt(0.5)));
}

TEST_CASE("rmse matches a pooled brute-force evaluation") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const std::size_t len = 5 + static_cast<std::size_t>(i % 20);
    Track truth{std::vector<double>(len), std::vector<double>(len)};
    for (std::size_t k = 0; k < len; ++k) truth.lateral[k] = n(rng), truth.velocity[k] = 15 + n(rng);
    std::vector<Track> preds(1 + static_cast<std::size_t>(i % 5), truth);
    for (auto& p : preds)
      for (std::size_t k = 0; k < len; ++k) p.lateral[k] += n(rng), p.velocity[k] += 2 * n(rng);
    const std::size_t steps = 1 + static_cast<std::size_t>(i) % len;

    double sl = 0.0, sv = 0.0;
    for (const auto& p : preds)
      for (std::size_t k = 0; k < steps; ++k) {
        sl += (p.lateral[k] - truth.lateral[k]) * (p.lateral[k] - truth.lateral[k]);
        sv += (p.velocity[k] - truth.velocity[k]) * (p.velocity[k] - truth.velocity[k]);
      }
    const double count = static_cast<double>(preds.size() * steps);
    const auto r = rmse(truth, preds, steps);
    CHECK(r.lateral == doctest::Approx(std::sqrt(sl / count)).epsilon(1e-12));
    CHECK(r.velocity == doctest::Approx(std::sqrt(sv / count)).epsilon(1e-12));

    // Scaling every error scales the RMSE.
    auto scaled = preds;
    for (auto& p : scaled)
      for (std::size_t k = 0; k < len; ++k) p.lateral[k] = truth.lateral[k] + 3.0 * (p.lateral[k] - truth.lateral[k]);
    CHECK(rmse(truth, scaled, steps).lateral == doctest::Approx(3.0 * r.lateral).epsilon(1e-12));

    // Steps beyond the horizon do not contribute.
    auto tail = preds;
    for (auto& p : tail)
      for (std::size_t k = steps; k < len; ++k) p.lateral[k] += 100.0;
    CHECK(rmse(truth, tail, steps).lateral == r.lateral);
  }
}

TEST_CASE("rmse input errors") {
  const Track truth = constant(5, 0.0, 0.0);
  const Track shorter[] = {constant(3, 0.0, 0.0)};
  CHECK_THROWS_AS(rmse(truth, shorter, 4), EvalError);
  const Track ok[] = {constant(8, 0.0, 0.0)};
  CHECK_THROWS_AS(rmse(truth, ok, 6), EvalError);
  CHECK_THROWS_AS(rmse(truth, {}, 3), EvalError);
}

TEST_CASE("tracks follow the episode and trajectory") {
  const auto& m = models();
  const auto& ep = m.episodes[1];
  const auto truth = truth_track(ep, Role::pred);
  REQUIRE(truth.lateral.size() == ep.steps());
  CHECK(truth.lateral[0] == ep.frames[1].predicted().y);
  CHECK(truth.velocity.back() == ep.frames.back().predicted().v);
  const auto ref = truth_track(ep, Role::ref);
  CHECK(ref.velocity[2] == ep.frames[3].find(*ep.reference_id)->v);

  sampler::Trajectory t;
  t.poses = {{{0, 1, 10}, {5, 4, 12}}, {{1, 1.1, 10.2}, {6, 4, 12.1}}};
  const auto tr = trajectory_track(t, Role::ref);
  REQUIRE(tr.lateral.size() == 1);
  CHECK(tr.velocity[0] == 12.1);
}

TEST_CASE("table protocol cells") {
  const auto& m = models();
  EvalConfig cfg;
  cfg.samples = 4;
  const auto report = table_protocol(m.episodes, m.all(), m.upper, cfg, 9);
  for (auto type : {ModelType::yield, ModelType::pass, ModelType::pass_notime}) {
    for (double h : kHorizons) {
      for (auto role : {Role::pred, Role::ref}) {
        const auto* c = report.find(type, role, h);
        if (!c) continue;
        CHECK(c->steps == c->trajectories * static_cast<std::size_t>(std::llround(h * 10)));
        CHECK(c->lateral >= 0.0);
      }
    }
  }
  CHECK(report.find(ModelType::keep, Role::pred, 4.0) != nullptr);
  CHECK(report.find(ModelType::keep, Role::pred, 2.0) == nullptr);
  CHECK(report.find(ModelType::pass, Role::pred, 0.5) != nullptr);
  CHECK(report.find(ModelType::pass_notime, Role::pred, 0.5) != nullptr);
  // The true horizon of a lane change is 4 s, so every horizon up to that is present.
  CHECK(report.find(ModelType::yield, Role::ref, 4.0) != nullptr);

  const auto again = table_protocol(m.episodes, m.all(), m.upper, cfg, 9);
  CHECK(again.to_csv() == report.to_csv());
  cfg.threads = 2;
  CHECK(table_protocol(m.episodes, m.all(), m.upper, cfg, 9).to_csv() == report.to_csv());
  CHECK(report.to_csv().rfind("model,role,horizon,", 0) == 0);
  CHECK(report.to_table().find("pass_notime") != std::string::npos);

  EvalModels no_keep = m.all();
  no_keep.keep = nullptr;
  const auto partial = table_protocol(m.episodes, no_keep, m.upper, cfg, 9);
  CHECK(partial.find(ModelType::keep, Role::pred, 4.0) == nullptr);
}

TEST_CASE("robustness reports") {
  const auto& m = models();
  const auto snapshot = datagen::exemplar_snapshot();
  RobustnessConfig cfg;
  cfg.samples = 6;
  const auto swap = robustness_model_swap(snapshot, 4, m.pass, m.yield, m.upper, cfg, 3);
  REQUIRE(swap.variants.size() == 2);
  CHECK(swap.kind == "model-swap");
  for (const auto& v : swap.variants) {
    CHECK(v.attempted == 6);
    CHECK(v.time.size() == v.pred_speed.size());
    if (v.time_to_lateral) CHECK(*v.time_to_lateral > 0.0);
  }
  CHECK(swap.variants[0].time == swap.variants[1].time);

  const auto shift = robustness_ttlc(snapshot, 2, m.pass, m.upper, cfg, 3);
  REQUIRE(shift.variants.size() == cfg.ttlc_values.size());
  for (std::size_t i = 0; i < shift.variants.size(); ++i)
    CHECK(shift.variants[i].time.back() <= cfg.ttlc_values[i] + 1e-9);
  CHECK(shift.to_json().at("variants").size() == 4);
  CHECK(!shift.summary().empty());
  CHECK(robustness_ttlc(snapshot, 2, m.pass, m.upper, cfg, 3).to_csv() == shift.to_csv());

  CHECK_THROWS(robustness_model_swap(snapshot, 5, m.pass, m.yield, m.upper, cfg, 3));
}

TEST_CASE("configuration round trips") {
  EvalConfig e;
  e.horizons = {1.0, 2.0};
  CHECK(EvalConfig::from_json(e.to_json()).to_json() == e.to_json());
  auto j = e.to_json();
  j["horizons"] = nlohmann::json::array();
  CHECK_THROWS(EvalConfig::from_json(j));
  RobustnessConfig r;
  CHECK(RobustnessConfig::from_json(r.to_json()).to_json() == r.to_json());
  CHECK_FALSE(EvalConfig::default_sampler().gate);
}
