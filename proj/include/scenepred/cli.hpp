#pragma once

#include "scenepred/datagen.hpp"
#include "scenepred/eval.hpp"
#include "scenepred/lower.hpp"
#include "scenepred/sampler.hpp"
#include "scenepred/upper.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace scenepred::cli {

// Bad input from the user: exit code 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

struct Paths {
  std::filesystem::path data = "data";
  std::filesystem::path checkpoints = "checkpoints";
  std::filesystem::path reports = "reports";
};

struct RunConfig {
  std::uint64_t seed = 1;
  double sample_rate = datagen::kSampleRate;
  Paths paths;
  std::size_t episodes = 3000;
  double train_ratio = 0.8;
  datagen::GeneratorConfig generator;
  datagen::ColumnMapping ingest;
  upper::UpperTrainConfig upper;
  lower::LowerTrainConfig lower;
  sampler::SamplerConfig sampler;
  std::string pass_model = "pass";  // or "pass_notime"
  eval::EvalConfig eval;
  eval::RobustnessConfig robustness;

  nlohmann::json to_json() const;
  // Throws UserError on unknown keys, wrong types or invalid values.
  static RunConfig from_json(const nlohmann::json& j);
};

nlohmann::json generator_to_json(const datagen::GeneratorConfig& c);
datagen::GeneratorConfig generator_from_json(const nlohmann::json& j);

// Defaults, then the config file (if any), then each "a.b.c=value" override in order. Values
// parse as JSON when possible and as plain strings otherwise.
nlohmann::json merge_config(const std::filesystem::path* file, const std::vector<std::string>& overrides);

// Checkpoint stems inside the checkpoint directory.
std::filesystem::path checkpoint_stem(const RunConfig& config, std::string_view which);

int main(int argc, char** argv);

}  // namespace scenepred::cli
