#pragma once

#include "scenepred/datagen.hpp"
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
#include <string>
#include <vector>

namespace scenepred::lower {

inline constexpr std::size_t kActionDim = 4;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// pass_notime is the pass model with the remaining-time input removed.
enum class ModelType { yield, pass, keep, pass_notime };

std::string_view to_string(ModelType type);
ModelType parse_model_type(std::string_view name);
scene::MotionKind kind_of(ModelType type);
bool uses_time(ModelType type);
// Interaction state (4) + observation + optional remaining time.
std::size_t input_dim(ModelType type);

// Inputs of one model evaluation in physical units. Lateral quantities are mirrored by the side
// sign inside the model so that right-side areas look like left-side ones.
struct Context {
  scene::InteractionState state;
  std::vector<double> observation;
  double remaining_time = 0.0;  // T_j [s]
  scene::Side side = scene::Side::own;
};

std::vector<double> encode_input(ModelType type, const Context& context);
std::array<double, kActionDim> encode_action(const scene::Action& action, scene::Side side);
scene::Action decode_action(const std::array<double, kActionDim>& y, scene::Side side);

// Per-column z-scoring; near-constant columns keep unit scale.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Scaler fit(std::span<const std::vector<double>> rows, std::size_t dim);
  std::vector<double> normalize(std::span<const double> v) const;
  std::vector<double> denormalize(std::span<const double> v) const;
  nlohmann::json to_json() const;
  static Scaler from_json(const nlohmann::json& j);
};

struct CvaeArch {
  std::vector<std::size_t> hidden{128, 128};
  std::size_t latent = 3;
  double decoder_noise = 0.0;  // std of optional additive output noise, normalized units
  double beta = 1.0;           // KL weight
};

struct CvaeModel {
  ModelType type = ModelType::keep;
  std::size_t x_dim = 0;
  CvaeArch arch;
  Scaler x_scaler;
  Scaler y_scaler;
  nn::ParameterSet params;

  nn::Mlp encoder() const;  // (X, Y) -> (mu_z, log_var_z)
  nn::Mlp decoder() const;  // (z, X) -> Y
};

CvaeModel init_cvae(ModelType type, std::size_t x_dim, const CvaeArch& arch, Scaler x_scaler, Scaler y_scaler,
                    std::mt19937_64& rng);

// Normalized-space operations on row batches.
struct Posterior {
  nn::RowMatrix mean;
  nn::RowMatrix stddev;
};
Posterior encode(const CvaeModel& model, const nn::RowMatrix& x, const nn::RowMatrix& y);
nn::RowMatrix reparameterize(const nn::RowMatrix& mean, const nn::RowMatrix& stddev, std::mt19937_64& rng);
nn::RowMatrix decode(const CvaeModel& model, const nn::RowMatrix& z, const nn::RowMatrix& x,
                     std::mt19937_64* noise_rng = nullptr);

struct CvaeLoss {
  nn::Var total;  // mean_n (recon_n + beta * kl_n)
  nn::Var recon;  // mean_n ||Y - Y_hat||^2
  nn::Var kl;     // mean_n KL[Q(z|X,Y) || N(0, I)]
};

// `x` and `y` are normalized [B x x_dim] and [B x 4]. `epsilon` supplies the reparameterization
// noise [B x latent]; when absent it is drawn from `rng`.
CvaeLoss cvae_loss(nn::Graph& g, const CvaeModel& model, const nn::Tensor& x, const nn::Tensor& y, std::mt19937_64& rng,
                   const std::optional<nn::Tensor>& epsilon = std::nullopt);

// z ~ N(0, I), decoded and mapped back to a physical action.
scene::Action sample_action(const CvaeModel& model, const Context& context, std::mt19937_64& rng);
std::vector<scene::Action> sample_actions(const CvaeModel& model, const Context& context, std::size_t n,
                                          std::mt19937_64& rng);
// Decodes given latent draws [n x latent]; deterministic.
std::vector<scene::Action> decode_actions(const CvaeModel& model, const Context& context, const nn::RowMatrix& z);

struct Transition {
  std::vector<double> x;                   // physical input
  std::array<double, kActionDim> y{};      // mirrored physical action
};

// Transitions of every episode whose behavior matches the model type.
std::vector<Transition> transitions(std::span<const datagen::Episode> episodes, ModelType type);

struct LowerTrainConfig {
  int epochs = 40;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  CvaeArch arch;

  nlohmann::json to_json() const;
  static LowerTrainConfig from_json(const nlohmann::json& j);
};

struct LowerEpochLog {
  int epoch = 0;
  double recon = 0.0;
  double kl = 0.0;
  double seconds = 0.0;
};

struct LowerTrainResult {
  CvaeModel model;
  std::vector<LowerEpochLog> log;
  nn::Adam optimizer;
};

using EpochCallback = std::function<void(const LowerEpochLog&)>;

LowerTrainResult train_cvae(std::span<const Transition> data, ModelType type, const LowerTrainConfig& config,
                            std::mt19937_64& rng, const LowerTrainResult* resume = nullptr,
                            const EpochCallback& on_epoch = {});
LowerTrainResult train_lower(std::span<const datagen::Episode> episodes, ModelType type, const LowerTrainConfig& config,
                             std::mt19937_64& rng, const LowerTrainResult* resume = nullptr,
                             const EpochCallback& on_epoch = {});

void save_cvae(const std::filesystem::path& stem, const CvaeModel& model, const nn::Adam* optimizer = nullptr,
               const nlohmann::json& extra = {});
CvaeModel load_cvae(const std::filesystem::path& stem);
std::optional<nn::Adam> load_cvae_optimizer(const std::filesystem::path& stem);

}  // namespace scenepred::lower
