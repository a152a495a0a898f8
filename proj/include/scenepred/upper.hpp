#pragma once

#include "scenepred/datagen.hpp"
#include "scenepred/gmm.hpp"
#include "scenepred/numerics/adam.hpp"
#include "scenepred/numerics/graph.hpp"
#include "scenepred/numerics/mlp.hpp"
#include "scenepred/scene.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace scenepred::upper {

// Feature layout (version 1):
//   [0]      predicted speed
//   [1..3]   lateral offset of the predicted center from the own / left / right lane center
//   [4 + 6k .. 9 + 6k] for area k = 0..4:
//            dx, dy, dv to the reference; area length (capped); reference-leader headway;
//            signed distance of the predicted center to the area extent (0 inside)
//   [34..38] area presence mask
inline constexpr std::size_t kEgoFeatures = 4;
inline constexpr std::size_t kAreaFeatures = 6;
inline constexpr std::size_t kMaskOffset = kEgoFeatures + kAreaFeatures * scene::kNumAreas;
inline constexpr std::size_t kFeatureDim = kMaskOffset + scene::kNumAreas;
inline constexpr int kFeatureLayoutVersion = 1;
inline constexpr std::size_t kAreas = scene::kNumAreas;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unnormalized features plus which entries carry information (absent lanes and areas do not).
struct RawFeatures {
  std::array<double, kFeatureDim> values{};
  std::array<bool, kFeatureDim> live{};
  std::array<bool, kAreas> mask{};
};

RawFeatures raw_features(const scene::SceneSnapshot& snapshot);

// Per-feature z-scoring fitted over live entries. Mask bits pass through unchanged.
struct Normalizer {
  std::array<double, kFeatureDim> mean{};
  std::array<double, kFeatureDim> stddev{};

  static Normalizer identity();
  static Normalizer fit(std::span<const RawFeatures> rows);
  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

struct FeatureVector {
  std::array<double, kFeatureDim> values{};
  std::array<bool, kAreas> mask{};
};

FeatureVector normalize(const RawFeatures& raw, const Normalizer& norm);
FeatureVector featurize(const scene::SceneSnapshot& snapshot, const Normalizer& norm);

// Affine map between physical labels (y_s [m], y_t [s]) and the network's normalized targets.
struct LabelScaler {
  gmm::Point mean{0.0, 0.0};
  gmm::Point stddev{1.0, 1.0};

  gmm::Point normalize(const gmm::Point& y) const;
  nlohmann::json to_json() const;
  static LabelScaler from_json(const nlohmann::json& j);
};

struct UpperArch {
  std::vector<std::size_t> hidden{400, 400, 400};
  std::size_t components = 2;
  double dropout = 0.2;

  std::size_t output_dim() const { return kAreas + kAreas * 6 * components; }
};

struct UpperModel {
  UpperArch arch;
  Normalizer features = Normalizer::identity();
  LabelScaler labels;
  nn::ParameterSet params;

  nn::Mlp trunk() const;
};

struct UpperPrediction {
  std::array<double, kAreas> weights{};
  std::array<bool, kAreas> mask{};
  std::array<std::optional<gmm::Gmm2D>, kAreas> areas;  // physical units; empty for masked areas

  int argmax() const;  // area id 1..5
  const gmm::Gmm2D& area(int area_id) const;
};

UpperModel init_upper(const UpperArch& arch, const Normalizer& features, const LabelScaler& labels, std::mt19937_64& rng);

// Decodes one output row: softmax over live logits, heads mapped through the label scaler.
UpperPrediction decode_output(const UpperModel& model, std::span<const double> output, const std::array<bool, kAreas>& mask);
UpperPrediction predict_upper(const UpperModel& model, const FeatureVector& x);
std::vector<UpperPrediction> predict_upper(const UpperModel& model, std::span<const FeatureVector> xs);

struct UpperLoss {
  nn::Var total;  // W1 * nll + W2 * ce
  nn::Var nll;    // -sum_n log sum_a w_hat_a p(y_a | x)
  nn::Var ce;     // -sum_n sum_a w_hat_a log w_a
};

// Two-term loss over a batch of network outputs [B x output_dim]. `mask` and `onehot` are [B x 5],
// `y` is [B x 2] in normalized label units. Throws ModelError when a label sits on a masked area.
UpperLoss upper_loss(nn::Graph& g, nn::Var output, const nn::Tensor& mask, const nn::Tensor& onehot,
                     const nn::Tensor& y, std::size_t components, double w1, double w2);

struct UpperSample {
  RawFeatures raw;
  int area = 5;
  gmm::Point y{0.0, 0.0};  // physical
  double ttlc = 0.0;
  std::uint64_t episode = 0;
};

std::vector<UpperSample> upper_samples(std::span<const datagen::Episode> episodes);

struct UpperTrainConfig {
  double w1 = 1.0;
  double w2 = 1.0;
  bool auto_balance = false;
  int epochs = 30;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  UpperArch arch;
  // Frames drawn per episode each epoch (0 uses every frame).
  std::size_t frames_per_episode = 10;

  nlohmann::json to_json() const;
  static UpperTrainConfig from_json(const nlohmann::json& j);
};

struct UpperEpochLog {
  int epoch = 0;
  double nll = 0.0;  // per-sample means
  double ce = 0.0;
  double total = 0.0;
  double w2 = 1.0;
  double seconds = 0.0;
};

struct UpperTrainResult {
  UpperModel model;
  std::vector<UpperEpochLog> log;
  nn::Adam optimizer;
};

// Thrown when the loss turns non-finite; carries the model as of the last completed epoch.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, UpperModel last_good, int epoch)
      : std::runtime_error(what), last_good(std::move(last_good)), epoch(epoch) {}
  UpperModel last_good;
  int epoch;
};

using EpochCallback = std::function<void(const UpperEpochLog&)>;

// When `resume` is given its parameters, normalizers and optimizer state are continued.
UpperTrainResult train_upper(std::span<const datagen::Episode> episodes, const UpperTrainConfig& config,
                             std::mt19937_64& rng, const UpperTrainResult* resume = nullptr,
                             const EpochCallback& on_epoch = {});

// <stem>.params.json, <stem>.meta.json and <stem>.adam.json.
void save_upper(const std::filesystem::path& stem, const UpperModel& model, const nn::Adam* optimizer = nullptr,
                const nlohmann::json& extra = {});
UpperModel load_upper(const std::filesystem::path& stem);
std::optional<nn::Adam> load_upper_optimizer(const std::filesystem::path& stem);

}  // namespace scenepred::upper
