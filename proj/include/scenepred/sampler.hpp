#pragma once

#include "scenepred/lower.hpp"
#include "scenepred/scene.hpp"
#include "scenepred/upper.hpp"

#include <json.hpp>

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace scenepred::sampler {

class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class GateMode { relative, absolute };

struct SamplerConfig {
  std::size_t samples = 100;  // N_s
  double w_min = 0.05;
  GateMode gate_mode = GateMode::relative;
  // relative: fraction of the area's peak marginal location density; absolute: density value.
  double epsilon = 0.01;
  bool gate = true;
  int step_retries = 20;
  int sample_retries = 5;
  double t_min = 0.1;
  double t_max = 4.0;
  double sample_rate = 10.0;
  scene::FeasibilityLimits limits;
  bool check_feasibility = true;
  double observation_noise = 0.0;  // std of Gaussian noise on observations [m, m/s]
  std::optional<double> fixed_horizon;  // overrides the sampled T
  std::size_t threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static SamplerConfig from_json(const nlohmann::json& j);
};

enum class Status { completed, rejected_destination, exhausted_retries };
std::string_view to_string(Status status);

struct Trajectory {
  int area = 0;
  lower::ModelType model = lower::ModelType::keep;
  std::size_t index = 0;  // sample index within the area
  double horizon = 0.0;   // T [s]
  std::size_t planned_steps = 0;
  Status status = Status::completed;
  int attempts = 0;
  double final_density = 0.0;
  double gate_threshold = 0.0;
  std::vector<scene::JointPose> poses;  // planned_steps + 1 when complete
  std::vector<lower::Context> contexts;  // model inputs per step
  std::vector<scene::Action> actions;
  bool virtual_reference = false;
  std::size_t step_resamples = 0;
  std::map<std::string, std::size_t> infeasible_by_reason;

  std::size_t steps() const { return actions.size(); }
};

struct Diagnostics {
  std::size_t completed = 0;
  std::size_t rejected_destination = 0;
  std::size_t exhausted_retries = 0;
  std::size_t step_resamples = 0;
  std::size_t sample_redos = 0;
  std::map<std::string, std::size_t> infeasible_by_reason;

  nlohmann::json to_json() const;
};

struct ScenePrediction {
  std::array<std::size_t, scene::kNumAreas> allocation{};
  std::vector<Trajectory> trajectories;
  upper::UpperPrediction upper;
  Diagnostics diagnostics;
};

// Motion models by kind; the pass slot may hold the pass_notime variant.
struct MotionModels {
  const lower::CvaeModel* yield = nullptr;
  const lower::CvaeModel* pass = nullptr;
  const lower::CvaeModel* keep = nullptr;

  const lower::CvaeModel* for_kind(scene::MotionKind kind) const;
};

// n_a = round(N_s * w_a) for w_a > w_min, else 0. If rounding overshoots N_s, the areas rounded up
// the most give back one sample each.
std::array<std::size_t, scene::kNumAreas> allocate(const std::array<double, scene::kNumAreas>& w, const SamplerConfig& config);

Trajectory rollout(const scene::SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                   const upper::UpperPrediction& upper, const SamplerConfig& config, std::mt19937_64& rng);
// Rolls out a lane-change area with either lane-change model; observations follow the model's kind.
Trajectory rollout_as(const scene::SceneSnapshot& snapshot, int area, const lower::CvaeModel& model,
                      const upper::UpperPrediction& upper, const SamplerConfig& config, std::mt19937_64& rng);

ScenePrediction predict_scene(const scene::SceneSnapshot& snapshot, const upper::UpperModel& upper,
                              const MotionModels& models, const SamplerConfig& config, std::mt19937_64& rng);
// Same, with an upper prediction supplied by the caller.
ScenePrediction predict_scene(const scene::SceneSnapshot& snapshot, const upper::UpperPrediction& upper,
                              const MotionModels& models, const SamplerConfig& config, std::mt19937_64& rng);

// log p(a_j | s_j, o_j, T_j) for one step; equivalently the density of the next joint state, since
// the state transition is a deterministic shift of the action.
using StepDensity = std::function<double(const lower::Context&, const scene::Action&)>;

// Diagonal Gaussian fitted to K decoder samples per step, drawn with a fixed latent set so that
// scores are deterministic. `min_std` floors each component's spread [physical units].
StepDensity gaussian_step_density(const lower::CvaeModel& model, std::size_t k = 200, std::uint64_t seed = 7,
                                  double min_std = 1e-3);

// Sum of step log-densities over steps [begin, end).
double segment_log_prob(const Trajectory& t, const StepDensity& density, std::size_t begin, std::size_t end);
// Joint log-probability of a completed trajectory.
double rollout_log_prob(const Trajectory& t, const StepDensity& density);

// Re-checks every recorded action against the feasibility rules along the stored poses.
bool trajectory_feasible(const Trajectory& t, const scene::SceneSnapshot& snapshot, const SamplerConfig& config);

// One JSON object per trajectory.
std::string to_jsonl(const ScenePrediction& p);
// Flat rows: area, model, index, status, step, t, pred x/y/v, ref x/y/v.
std::string to_csv(const ScenePrediction& p);

}  // namespace scenepred::sampler
