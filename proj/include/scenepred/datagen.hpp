#pragma once

#include "scenepred/scene.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace scenepred::datagen {

inline constexpr double kSampleRate = 10.0;
// Transitions per training window; an episode carries kWindowSteps + 1 snapshots, the last one
// being the insertion frame (TTLC = 0 for lane changes).
inline constexpr int kWindowSteps = 40;
// Time label used for keep episodes, which have no insertion event inside the window.
inline constexpr double kKeepHorizon = 4.0;
inline constexpr int kDatasetVersion = 1;

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Episode {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  std::string source = "synthetic";
  scene::MotionKind behavior = scene::MotionKind::keep;
  int label_area = 5;
  std::optional<int> reference_id;
  double sample_rate = kSampleRate;
  std::vector<scene::SceneSnapshot> frames;
  std::vector<double> ttlc;     // per frame [s]
  double insertion_lateral = 0.0;  // y_s: lateral position of the predicted vehicle at the insertion frame

  double dt() const { return 1.0 / sample_rate; }
  std::size_t steps() const { return frames.empty() ? 0 : frames.size() - 1; }
};

// ---- synthetic generator -------------------------------------------------------------------

struct IdmParams {
  double desired_speed = 25.0;
  double max_accel = 1.2;
  double comfort_decel = 2.0;
  double time_headway = 1.4;
  double min_spacing = 2.0;
};

// Intelligent Driver Model acceleration. `gap` is bumper-to-bumper; pass std::nullopt for a free road.
double idm_acceleration(const IdmParams& p, double v, std::optional<double> gap, double lead_v);

struct GeneratorConfig {
  int lane_count = 3;
  double lane_width = scene::kDefaultLaneWidth;
  double speed_min = 8.0;
  double speed_max = 25.0;
  double headway_min = 10.0;
  double headway_max = 60.0;
  double maneuver_min = 1.0;  // lateral maneuver time constant range [s]
  double maneuver_max = 4.0;
  double accel_limit = 4.0;   // |a| cap, below the feasibility bound of 5 m/s^2
  int max_attempts = 400;
};

struct VehicleSpec {
  scene::VehicleState initial;
  IdmParams idm;
  double lateral_amplitude = 0.0;  // lane-keeping wander
  double lateral_period = 6.0;
  double lateral_phase = 0.0;
};

// A fully specified initial layout plus behavior parameters; simulate() is deterministic.
struct Scenario {
  scene::LaneGeometry lanes;
  scene::MotionKind behavior = scene::MotionKind::keep;
  scene::Side side = scene::Side::own;  // lane-change direction
  int predicted_id = 0;
  int reference_id = -1;  // target-lane reference, or the own-lane leader for keep
  double maneuver_time = 2.0;
  double crossing_time = 3.95;  // must lie in ((W-1)dt, W dt)
  double target_margin = 3.0;   // extra clearance beyond the insertion margin
  double cooperation = 0.5;     // reference deceleration when a merger cuts in ahead [m/s^2]
  double target_lateral_bias = 0.0;
  std::vector<VehicleSpec> vehicles;
};

Scenario sample_scenario(scene::MotionKind behavior, std::mt19937_64& rng, const GeneratorConfig& config = {});

// Integrates the scenario over the window and checks every episode invariant. Throws
// GenerationError when the initial layout overlaps or the outcome violates the behavior.
Episode simulate(const Scenario& scenario, const GeneratorConfig& config = {});

// Draws scenarios from the seed's own RNG stream until one simulates cleanly.
Episode generate_episode(std::uint64_t seed, scene::MotionKind behavior, const GeneratorConfig& config = {});

// Equal thirds of yield/pass/keep, episode i seeded from (seed, i).
std::vector<Episode> generate_dataset(std::size_t count, std::uint64_t seed, const GeneratorConfig& config = {});

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

// Transition actions between consecutive frames of an episode for its label area.
std::vector<scene::Action> episode_actions(const Episode& episode);

// Scripted narratives used as packaged fixtures: (a) a merge that ends by passing the right
// reference vehicle, (b) one that ends by yielding to the right reference vehicle.
enum class ScriptedCase { pass_right, yield_right };
Episode scripted_episode(ScriptedCase which);
scene::SceneSnapshot exemplar_snapshot();

// ---- smoothing -----------------------------------------------------------------------------

struct SmootherConfig {
  double jerk_noise = 2.0;             // longitudinal jerk spectral density [m^2/s^5]
  double lateral_accel_noise = 0.25;   // lateral acceleration spectral density [m^2/s^3]
  double measurement_noise_x = 0.5;    // [m]
  double measurement_noise_y = 0.2;    // [m]
};

struct TrackSample {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
};

// State layout (x, y, vx, vy, ax).
struct SmoothedSample {
  double t = 0.0;
  double x = 0.0, y = 0.0, vx = 0.0, vy = 0.0, ax = 0.0;
};

struct SmootherOutput {
  std::vector<SmoothedSample> states;
  // Innovations whitened by the innovation covariance, from the first filtered update on.
  std::vector<std::array<double, 2>> normalized_innovations;
};

// Forward Kalman filter over a constant-acceleration longitudinal / constant-velocity lateral
// model, initialized exactly from the first three samples. Requires >= 3 uniformly spaced samples.
SmootherOutput smooth_track(std::span<const TrackSample> track, const SmootherConfig& config = {});

// ---- NGSIM-schema ingestion ----------------------------------------------------------------

struct ColumnMapping {
  std::string vehicle_id = "Vehicle_ID";
  std::string frame = "Frame_ID";
  std::string longitudinal = "Local_Y";
  std::string lateral = "Local_X";
  std::string lane = "Lane_ID";
  std::string length;  // optional columns
  std::string width;
  double unit_scale = 0.3048;   // feet to meters
  double lateral_sign = -1.0;   // NGSIM lateral grows to the right
  bool lanes_left_to_right = true;  // lane 1 is the leftmost lane
  int lane_count = 5;
  double lane_width = 3.66;
  double sample_rate = kSampleRate;
  SmootherConfig smoother;

  static ColumnMapping from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct IngestIssue {
  int vehicle_id = 0;
  std::string message;
};

struct IngestResult {
  std::vector<Episode> episodes;
  std::vector<IngestIssue> warnings;  // skipped windows
  std::vector<IngestIssue> errors;    // rejected tracks
};

// Throws on unreadable files or missing columns; per-track problems are collected in the result.
IngestResult ingest_csv(const std::filesystem::path& path, const ColumnMapping& mapping = {});

// ---- dataset files -------------------------------------------------------------------------

struct Split {
  std::vector<Episode> train;
  std::vector<Episode> test;
};

// Episode-level shuffle then cut at round(ratio * n). Ratio must lie in (0, 1).
Split split(std::vector<Episode> episodes, double ratio, std::mt19937_64& rng);

nlohmann::json snapshot_to_json(const scene::SceneSnapshot& s);
scene::SceneSnapshot snapshot_from_json(const nlohmann::json& j);
nlohmann::json episode_to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& j);

// JSON lines, one episode per line.
std::string dataset_to_jsonl(std::span<const Episode> episodes);
void write_dataset(const std::filesystem::path& path, std::span<const Episode> episodes);
std::vector<Episode> read_dataset(const std::filesystem::path& path);

}  // namespace scenepred::datagen
