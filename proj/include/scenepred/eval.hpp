#pragma once

#include "scenepred/datagen.hpp"
#include "scenepred/lower.hpp"
#include "scenepred/sampler.hpp"
#include "scenepred/upper.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace scenepred::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Role { pred, ref };
std::string_view to_string(Role role);

// Per-step series of one vehicle, excluding the initial state.
struct Track {
  std::vector<double> lateral;   // y [m]
  std::vector<double> velocity;  // longitudinal speed [m/s]
};

struct RmseValue {
  double lateral = 0.0;
  double velocity = 0.0;
};

// Root-mean-square error over the first `steps` steps of every prediction against the truth.
RmseValue rmse(const Track& truth, std::span<const Track> predictions, std::size_t steps);

Track truth_track(const datagen::Episode& episode, Role role);
Track trajectory_track(const sampler::Trajectory& trajectory, Role role);

inline const std::vector<double> kHorizons{0.5, 1.0, 1.5, 2.0, 3.0, 4.0};

struct EvalConfig {
  std::size_t samples = 20;  // trajectories per episode
  std::vector<double> horizons = kHorizons;
  double keep_horizon = 4.0;
  std::size_t max_episodes = 0;  // 0: all
  std::size_t threads = 1;
  sampler::SamplerConfig sampler = default_sampler();

  static sampler::SamplerConfig default_sampler();
  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct RmseCell {
  lower::ModelType model = lower::ModelType::keep;
  Role role = Role::pred;
  double horizon = 0.0;
  double lateral = 0.0;
  double velocity = 0.0;
  std::size_t episodes = 0;
  std::size_t trajectories = 0;
  std::size_t steps = 0;  // squared errors pooled into the cell
  // Spread of per-episode RMSEs, for standard-error bars.
  double lateral_episode_std = 0.0;
  double velocity_episode_std = 0.0;
};

struct RmseReport {
  std::vector<RmseCell> cells;
  std::size_t skipped_trajectories = 0;  // rollouts that stopped before the longest horizon

  const RmseCell* find(lower::ModelType model, Role role, double horizon) const;
  std::string to_csv() const;
  std::string to_table() const;
};

struct EvalModels {
  const lower::CvaeModel* yield = nullptr;
  const lower::CvaeModel* pass = nullptr;
  const lower::CvaeModel* keep = nullptr;
  const lower::CvaeModel* pass_notime = nullptr;

  const lower::CvaeModel* get(lower::ModelType type) const;
};

// Rolls every test episode out from its first frame with the model of its insertion area, using
// the episode's true time to lane change as the horizon, and pools errors per cell. Models that
// are missing or have no episodes leave their cells out.
RmseReport table_protocol(std::span<const datagen::Episode> test, const EvalModels& models,
                          const upper::UpperModel& upper, const EvalConfig& config, std::uint64_t seed);

struct Profile {
  std::string variant;
  std::vector<double> time;
  std::vector<double> pred_lateral;  // displacement toward the target lane [m]
  std::vector<double> pred_speed;
  std::vector<double> ref_lateral;
  std::vector<double> ref_speed;
  std::vector<std::size_t> count;  // trajectories contributing to each step
  double mean_pred_speed_change = 0.0;
  double mean_ref_speed = 0.0;
  double mean_abs_pred_accel = 0.0;
  std::optional<double> time_to_lateral;  // first crossing of the lateral threshold by the mean profile
  std::size_t completed = 0;
  std::size_t attempted = 0;
};

struct RobustnessReport {
  std::string kind;  // "model-swap" or "ttlc-shift"
  int area = 0;
  std::vector<Profile> variants;

  std::string to_csv() const;
  std::string summary() const;
  nlohmann::json to_json() const;
};

struct RobustnessConfig {
  std::size_t samples = 50;
  double lateral_threshold = 0.6;  // [m]
  std::vector<double> ttlc_values{1.0, 2.0, 3.0, 4.0};
  sampler::SamplerConfig sampler = EvalConfig::default_sampler();

  void validate() const;
  nlohmann::json to_json() const;
  static RobustnessConfig from_json(const nlohmann::json& j);
};

// Same snapshot, area, horizons and seeds under the pass and the yield model.
RobustnessReport robustness_model_swap(const scene::SceneSnapshot& snapshot, int area, const lower::CvaeModel& pass,
                                       const lower::CvaeModel& yield, const upper::UpperModel& upper,
                                       const RobustnessConfig& config, std::uint64_t seed);

// One variant per fixed horizon in config.ttlc_values.
RobustnessReport robustness_ttlc(const scene::SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                                 const upper::UpperModel& upper, const RobustnessConfig& config, std::uint64_t seed);

}  // namespace scenepred::eval
