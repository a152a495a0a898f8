#include "scenepred/eval.hpp"
#include "scenepred/numerics/checkpoint.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace scenepred;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path kFixtures = fs::path(SCENEPRED_SOURCE_DIR) / "fixtures";

}  // namespace

TEST_CASE("packaged fixtures match the generator") {
  CHECK(slurp(kFixtures / "exemplar_scene.json") ==
        datagen::snapshot_to_json(datagen::exemplar_snapshot()).dump(2) + "\n");
  const auto pass = datagen::scripted_episode(datagen::ScriptedCase::pass_right);
  const auto yield = datagen::scripted_episode(datagen::ScriptedCase::yield_right);
  CHECK(slurp(kFixtures / "pass_right.jsonl") == datagen::dataset_to_jsonl(std::span(&pass, 1)));
  CHECK(slurp(kFixtures / "yield_right.jsonl") == datagen::dataset_to_jsonl(std::span(&yield, 1)));
  CHECK(slurp(kFixtures / "pass_right_snapshot.json") == datagen::snapshot_to_json(pass.frames.front()).dump(2) + "\n");

  CHECK(pass.behavior == scene::MotionKind::pass);
  CHECK(pass.label_area == 4);
  CHECK(yield.behavior == scene::MotionKind::yield);
  CHECK(yield.label_area == 3);
  // Both narratives start from the same layout and differ only in outcome.
  CHECK(pass.frames.front().predicted().x == yield.frames.front().predicted().x);
  const auto& pl = pass.frames.back();
  const auto& yl = yield.frames.back();
  CHECK(pl.predicted().x > pl.find(*pass.reference_id)->x);
  CHECK(yl.predicted().x < yl.find(*yield.reference_id)->x);
}

TEST_CASE("fixture snapshots load and predict") {
  const auto snap = datagen::snapshot_from_json(io::read_json(kFixtures / "pass_right_snapshot.json"));
  snap.validate();
  const auto dias = scene::extract_dias(snap);
  CHECK(dias.live(3));
  CHECK(dias.live(4));

  const auto eps = datagen::generate_dataset(60, 12);
  std::mt19937_64 rng(1);
  upper::UpperTrainConfig ucfg;
  ucfg.epochs = 2;
  ucfg.arch.hidden = {32, 32};
  const auto up = upper::train_upper(eps, ucfg, rng).model;
  lower::LowerTrainConfig lcfg;
  lcfg.epochs = 2;
  lcfg.arch.hidden = {32, 32};
  const auto y = lower::train_lower(eps, lower::ModelType::yield, lcfg, rng).model;
  const auto p = lower::train_lower(eps, lower::ModelType::pass, lcfg, rng).model;
  const auto k = lower::train_lower(eps, lower::ModelType::keep, lcfg, rng).model;

  sampler::SamplerConfig cfg;
  cfg.samples = 30;
  const auto pred = sampler::predict_scene(snap, up, {&y, &p, &k}, cfg, rng);
  std::size_t total = 0;
  for (std::size_t a = 0; a < scene::kNumAreas; ++a) {
    total += pred.allocation[a];
    if (!pred.upper.mask[a]) CHECK(pred.allocation[a] == 0);
  }
  CHECK(total <= 30);
  CHECK(pred.trajectories.size() == total);
  for (const auto& t : pred.trajectories)
    if (t.status == sampler::Status::completed) CHECK(sampler::trajectory_feasible(t, snap, cfg));

  // Model swap on the scripted scene reuses the same seeds for both variants.
  eval::RobustnessConfig rc;
  rc.samples = 5;
  const auto swap = eval::robustness_model_swap(snap, 4, p, y, up, rc, 4);
  CHECK(swap.variants.size() == 2);
  CHECK(swap.variants[0].attempted == swap.variants[1].attempted);
}
