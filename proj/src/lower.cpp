#include "scenepred/lower.hpp"

#include "scenepred/numerics/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace scenepred::lower {

using nn::Graph;
using nn::RowMatrix;
using nn::Tensor;
using nn::Var;

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  std::filesystem::path p = stem;
  p += suffix;
  return p;
}

RowMatrix row_matrix(std::span<const double> v) {
  RowMatrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

RowMatrix hcat(const RowMatrix& a, const RowMatrix& b) {
  RowMatrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

}  // namespace

std::string_view to_string(ModelType type) {
  switch (type) {
    case ModelType::yield: return "yield";
    case ModelType::pass: return "pass";
    case ModelType::keep: return "keep";
    case ModelType::pass_notime: return "pass_notime";
  }
  return "?";
}

ModelType parse_model_type(std::string_view name) {
  if (name == "yield") return ModelType::yield;
  if (name == "pass") return ModelType::pass;
  if (name == "keep") return ModelType::keep;
  if (name == "pass_notime") return ModelType::pass_notime;
  throw std::invalid_argument("unknown motion model '" + std::string(name) + "' (expected yield, pass, keep or pass_notime)");
}

scene::MotionKind kind_of(ModelType type) {
  switch (type) {
    case ModelType::yield: return scene::MotionKind::yield;
    case ModelType::keep: return scene::MotionKind::keep;
    default: return scene::MotionKind::pass;
  }
}

bool uses_time(ModelType type) { return type == ModelType::yield || type == ModelType::pass; }

std::size_t input_dim(ModelType type) {
  return 4 + scene::observation_dim(kind_of(type)) + (uses_time(type) ? 1 : 0);
}

std::vector<double> encode_input(ModelType type, const Context& c) {
  const std::size_t obs = scene::observation_dim(kind_of(type));
  if (c.observation.size() != obs)
    throw ModelError(std::string(to_string(type)) + " model expects " + std::to_string(obs) + " observation values, got " +
                     std::to_string(c.observation.size()));
  const double sign = scene::side_sign(c.side);
  std::vector<double> x{c.state.v_pred, c.state.v_ref, c.state.dx, sign * c.state.dy};
  x.insert(x.end(), c.observation.begin(), c.observation.end());
  if (uses_time(type)) x.push_back(c.remaining_time);
  return x;
}

std::array<double, kActionDim> encode_action(const scene::Action& a, scene::Side side) {
  const double sign = scene::side_sign(side);
  return {sign * a.dx_pred, a.dv_pred, sign * a.dx_ref, a.dv_ref};
}

scene::Action decode_action(const std::array<double, kActionDim>& y, scene::Side side) {
  const double sign = scene::side_sign(side);
  return {sign * y[0], y[1], sign * y[2], y[3]};
}

Scaler Scaler::fit(std::span<const std::vector<double>> rows, std::size_t dim) {
  Scaler s;
  s.mean.assign(dim, 0.0);
  s.stddev.assign(dim, 1.0);
  if (rows.empty()) return s;
  for (std::size_t d = 0; d < dim; ++d) {
    double mean = 0.0, m2 = 0.0;
    for (const auto& r : rows) mean += r[d];
    mean /= static_cast<double>(rows.size());
    for (const auto& r : rows) m2 += (r[d] - mean) * (r[d] - mean);
    const double sd = std::sqrt(m2 / static_cast<double>(rows.size()));
    s.mean[d] = mean;
    s.stddev[d] = sd > 1e-9 ? sd : 1.0;
  }
  return s;
}

std::vector<double> Scaler::normalize(std::span<const double> v) const {
  if (v.size() != mean.size()) throw nn::ShapeError("scaler: dimension mismatch");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean[i]) / stddev[i];
  return out;
}

std::vector<double> Scaler::denormalize(std::span<const double> v) const {
  if (v.size() != mean.size()) throw nn::ShapeError("scaler: dimension mismatch");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * stddev[i] + mean[i];
  return out;
}

nlohmann::json Scaler::to_json() const { return {{"mean", mean}, {"stddev", stddev}}; }

Scaler Scaler::from_json(const nlohmann::json& j) {
  Scaler s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  if (s.mean.size() != s.stddev.size()) throw ModelError("scaler: mean/stddev length mismatch");
  return s;
}

nn::Mlp CvaeModel::encoder() const {
  std::vector<std::size_t> sizes{x_dim + kActionDim};
  sizes.insert(sizes.end(), arch.hidden.begin(), arch.hidden.end());
  sizes.push_back(2 * arch.latent);
  return {"encoder", sizes};
}

nn::Mlp CvaeModel::decoder() const {
  std::vector<std::size_t> sizes{arch.latent + x_dim};
  sizes.insert(sizes.end(), arch.hidden.begin(), arch.hidden.end());
  sizes.push_back(kActionDim);
  return {"decoder", sizes};
}

CvaeModel init_cvae(ModelType type, std::size_t x_dim, const CvaeArch& arch, Scaler x_scaler, Scaler y_scaler,
                    std::mt19937_64& rng) {
  if (arch.latent == 0) throw ModelError("latent dimension must be positive");
  CvaeModel m;
  m.type = type;
  m.x_dim = x_dim;
  m.arch = arch;
  m.x_scaler = std::move(x_scaler);
  m.y_scaler = std::move(y_scaler);
  m.encoder().init(m.params, rng);
  m.decoder().init(m.params, rng);
  return m;
}

Posterior encode(const CvaeModel& model, const RowMatrix& x, const RowMatrix& y) {
  if (x.rows() != y.rows() || static_cast<std::size_t>(x.cols()) != model.x_dim ||
      static_cast<std::size_t>(y.cols()) != kActionDim)
    throw nn::ShapeError("encode: expected X [n x " + std::to_string(model.x_dim) + "] and Y [n x 4]");
  const RowMatrix out = model.encoder().infer(model.params, hcat(x, y));
  const auto L = static_cast<Eigen::Index>(model.arch.latent);
  Posterior p;
  p.mean = out.leftCols(L);
  p.stddev = (0.5 * out.rightCols(L).array()).exp().matrix();
  return p;
}

RowMatrix reparameterize(const RowMatrix& mean, const RowMatrix& stddev, std::mt19937_64& rng) {
  if (mean.rows() != stddev.rows() || mean.cols() != stddev.cols()) throw nn::ShapeError("reparameterize: shape mismatch");
  std::normal_distribution<double> n01(0.0, 1.0);
  RowMatrix z(mean.rows(), mean.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    for (Eigen::Index c = 0; c < z.cols(); ++c) z(r, c) = mean(r, c) + std::max(stddev(r, c), 0.0) * n01(rng);
  return z;
}

RowMatrix decode(const CvaeModel& model, const RowMatrix& z, const RowMatrix& x, std::mt19937_64* noise_rng) {
  if (z.rows() != x.rows() || static_cast<std::size_t>(z.cols()) != model.arch.latent ||
      static_cast<std::size_t>(x.cols()) != model.x_dim)
    throw nn::ShapeError("decode: expected z [n x " + std::to_string(model.arch.latent) + "] and X [n x " +
                         std::to_string(model.x_dim) + "]");
  RowMatrix y = model.decoder().infer(model.params, hcat(z, x));
  if (noise_rng && model.arch.decoder_noise > 0.0) {
    std::normal_distribution<double> n01(0.0, model.arch.decoder_noise);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] += n01(*noise_rng);
  }
  return y;
}

CvaeLoss cvae_loss(Graph& g, const CvaeModel& model, const Tensor& x, const Tensor& y, std::mt19937_64& rng,
                   const std::optional<Tensor>& epsilon) {
  const std::size_t B = x.rows();
  const std::size_t L = model.arch.latent;
  if (B == 0) throw ModelError("cvae_loss: empty batch");
  if (x.cols() != model.x_dim || y.cols() != kActionDim || y.rows() != B)
    throw nn::ShapeError("cvae_loss: expected X [B x " + std::to_string(model.x_dim) + "] and Y [B x 4]");
  Tensor eps(B, L);
  if (epsilon) {
    if (epsilon->rows() != B || epsilon->cols() != L) throw nn::ShapeError("cvae_loss: epsilon shape mismatch");
    eps = *epsilon;
  } else {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (double& v : eps.values()) v = n01(rng);
  }
  const Var xv = g.input(x);
  const Var yv = g.input(y);
  const Var xy[] = {xv, yv};
  const Var enc = model.encoder().forward(g, model.params, g.concat(xy));
  const Var mu = g.slice(enc, 0, L);
  const Var log_var = g.slice(enc, L, 2 * L);
  const Var z = g.add(mu, g.mul(g.exp(g.scale(log_var, 0.5)), g.input(std::move(eps))));
  const Var zx[] = {z, xv};
  const Var y_hat = model.decoder().forward(g, model.params, g.concat(zx));
  const Var recon_rows = g.row_sum(g.square(g.sub(yv, y_hat)));
  const Var kl_rows = g.kl_std_normal(mu, log_var);
  const Var recon = g.mean(recon_rows);
  const Var kl = g.mean(kl_rows);
  const Var total = g.add(recon, g.scale(kl, model.arch.beta));
  return {total, recon, kl};
}

std::vector<scene::Action> decode_actions(const CvaeModel& model, const Context& context, const RowMatrix& z) {
  const auto xn = model.x_scaler.normalize(encode_input(model.type, context));
  RowMatrix x(z.rows(), static_cast<Eigen::Index>(model.x_dim));
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < model.x_dim; ++c) x(r, static_cast<Eigen::Index>(c)) = xn[c];
  const RowMatrix y = decode(model, z, x);
  std::vector<scene::Action> out;
  out.reserve(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const auto phys = model.y_scaler.denormalize(std::span<const double>(y.data() + r * y.cols(), kActionDim));
    out.push_back(decode_action({phys[0], phys[1], phys[2], phys[3]}, context.side));
  }
  return out;
}

std::vector<scene::Action> sample_actions(const CvaeModel& model, const Context& context, std::size_t n,
                                          std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  RowMatrix z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(model.arch.latent));
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n01(rng);
  if (model.arch.decoder_noise <= 0.0) return decode_actions(model, context, z);
  const auto xn = model.x_scaler.normalize(encode_input(model.type, context));
  RowMatrix x = row_matrix(xn).replicate(static_cast<Eigen::Index>(n), 1);
  const RowMatrix y = decode(model, z, x, &rng);
  std::vector<scene::Action> out;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const auto phys = model.y_scaler.denormalize(std::span<const double>(y.data() + r * y.cols(), kActionDim));
    out.push_back(decode_action({phys[0], phys[1], phys[2], phys[3]}, context.side));
  }
  return out;
}

scene::Action sample_action(const CvaeModel& model, const Context& context, std::mt19937_64& rng) {
  return sample_actions(model, context, 1, rng).front();
}

std::vector<Transition> transitions(std::span<const datagen::Episode> episodes, ModelType type) {
  const scene::MotionKind kind = kind_of(type);
  std::vector<Transition> out;
  for (const auto& e : episodes) {
    if (e.behavior != kind) continue;
    const auto actions = datagen::episode_actions(e);
    for (std::size_t j = 0; j < actions.size(); ++j) {
      const auto& f = e.frames[j];
      const auto dia = scene::extract_dias(f).at(e.label_area);
      const auto inter = scene::interaction_state(f, dia);
      Context c{inter.state, inter.observation, e.ttlc[j], dia.side};
      out.push_back({encode_input(type, c), encode_action(actions[j], dia.side)});
    }
  }
  return out;
}

nlohmann::json LowerTrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"hidden", arch.hidden},
          {"latent", arch.latent},
          {"decoder_noise", arch.decoder_noise},
          {"beta", arch.beta}};
}

LowerTrainConfig LowerTrainConfig::from_json(const nlohmann::json& j) {
  LowerTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.arch.hidden = j.value("hidden", c.arch.hidden);
  c.arch.latent = j.value("latent", c.arch.latent);
  c.arch.decoder_noise = j.value("decoder_noise", c.arch.decoder_noise);
  c.arch.beta = j.value("beta", c.arch.beta);
  if (c.epochs < 0 || c.batch_size == 0 || !(c.learning_rate > 0.0) || c.arch.latent == 0 ||
      !(c.arch.decoder_noise >= 0.0) || !(c.arch.beta >= 0.0))
    throw std::invalid_argument("lower: invalid training configuration");
  return c;
}

LowerTrainResult train_cvae(std::span<const Transition> data, ModelType type, const LowerTrainConfig& config,
                            std::mt19937_64& rng, const LowerTrainResult* resume, const EpochCallback& on_epoch) {
  if (data.empty()) throw ModelError("no training transitions for the " + std::string(to_string(type)) + " model");
  const std::size_t x_dim = data.front().x.size();
  for (const auto& t : data)
    if (t.x.size() != x_dim) throw nn::ShapeError("training transitions have inconsistent input widths");

  LowerTrainResult result;
  if (resume) {
    result = *resume;
    if (result.model.type != type || result.model.x_dim != x_dim) throw ModelError("resume checkpoint does not match the model type");
  } else {
    std::vector<std::vector<double>> xs, ys;
    for (const auto& t : data) {
      xs.push_back(t.x);
      ys.emplace_back(t.y.begin(), t.y.end());
    }
    result.model = init_cvae(type, x_dim, config.arch, Scaler::fit(xs, x_dim), Scaler::fit(ys, kActionDim), rng);
    result.optimizer = nn::Adam(nn::AdamConfig{config.learning_rate});
  }
  CvaeModel& model = result.model;
  result.optimizer.set_learning_rate(config.learning_rate);

  std::vector<std::vector<double>> xn, yn;
  xn.reserve(data.size());
  yn.reserve(data.size());
  for (const auto& t : data) {
    xn.push_back(model.x_scaler.normalize(t.x));
    yn.push_back(model.y_scaler.normalize(t.y));
  }

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const int first_epoch = result.log.empty() ? 1 : result.log.back().epoch + 1;
  for (int epoch = first_epoch; epoch < first_epoch + config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double recon_sum = 0.0, kl_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      Tensor x(B, x_dim), y(B, kActionDim);
      for (std::size_t r = 0; r < B; ++r) {
        const std::size_t i = order[start + r];
        std::copy(xn[i].begin(), xn[i].end(), x.data() + r * x_dim);
        std::copy(yn[i].begin(), yn[i].end(), y.data() + r * kActionDim);
      }
      Graph g;
      const CvaeLoss loss = cvae_loss(g, model, x, y, rng);
      const double recon = g.value(loss.recon).item();
      const double kl = g.value(loss.kl).item();
      if (!std::isfinite(recon) || !std::isfinite(kl))
        throw nn::NumericError(std::string(to_string(type)) + " training produced a non-finite loss in epoch " + std::to_string(epoch));
      recon_sum += recon * static_cast<double>(B);
      kl_sum += kl * static_cast<double>(B);
      result.optimizer.step(model.params, g.backward(loss.total));
    }
    LowerEpochLog entry{epoch, recon_sum / static_cast<double>(data.size()), kl_sum / static_cast<double>(data.size()),
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

LowerTrainResult train_lower(std::span<const datagen::Episode> episodes, ModelType type, const LowerTrainConfig& config,
                             std::mt19937_64& rng, const LowerTrainResult* resume, const EpochCallback& on_epoch) {
  const auto data = transitions(episodes, type);
  if (data.empty())
    throw ModelError("dataset has no " + std::string(scene::to_string(kind_of(type))) + " episodes for the " +
                     std::string(to_string(type)) + " model");
  return train_cvae(data, type, config, rng, resume, on_epoch);
}

void save_cvae(const std::filesystem::path& stem, const CvaeModel& model, const nn::Adam* optimizer,
               const nlohmann::json& extra) {
  nlohmann::json meta = {{"kind", "cvae"},
                         {"model_type", std::string(to_string(model.type))},
                         {"x_dim", model.x_dim},
                         {"uses_time", uses_time(model.type)},
                         {"hidden", model.arch.hidden},
                         {"latent", model.arch.latent},
                         {"decoder_noise", model.arch.decoder_noise},
                         {"beta", model.arch.beta},
                         {"x_scaler", model.x_scaler.to_json()},
                         {"y_scaler", model.y_scaler.to_json()},
                         {"optimizer_steps", optimizer ? optimizer->step_count() : 0}};
  if (!extra.is_null()) meta["run"] = extra;
  nn::save_tensors(with_suffix(stem, ".params.json"), model.params);
  if (optimizer) nn::save_tensors(with_suffix(stem, ".adam.json"), optimizer->export_state());
  io::write_text_atomic(with_suffix(stem, ".meta.json"), meta.dump(2) + "\n");
}

CvaeModel load_cvae(const std::filesystem::path& stem) {
  const auto meta = io::read_json(with_suffix(stem, ".meta.json"));
  if (meta.value("kind", std::string()) != "cvae") throw ModelError(stem.string() + " is not a motion-model checkpoint");
  CvaeModel m;
  m.type = parse_model_type(meta.at("model_type").get<std::string>());
  m.x_dim = meta.at("x_dim").get<std::size_t>();
  if (m.x_dim != input_dim(m.type)) throw ModelError(stem.string() + ": input width does not match the model type");
  m.arch.hidden = meta.at("hidden").get<std::vector<std::size_t>>();
  m.arch.latent = meta.at("latent").get<std::size_t>();
  m.arch.decoder_noise = meta.value("decoder_noise", 0.0);
  m.arch.beta = meta.value("beta", 1.0);
  m.x_scaler = Scaler::from_json(meta.at("x_scaler"));
  m.y_scaler = Scaler::from_json(meta.at("y_scaler"));
  m.params = nn::load_tensors(with_suffix(stem, ".params.json"));
  for (const auto& mlp : {m.encoder(), m.decoder()})
    for (std::size_t l = 0; l < mlp.layers(); ++l) {
      const auto w = m.params.find(mlp.weight_name(l));
      if (w == m.params.end() || w->second.rows() != mlp.sizes[l] || w->second.cols() != mlp.sizes[l + 1])
        throw ModelError(stem.string() + ": parameter " + mlp.weight_name(l) + " missing or misshapen");
    }
  return m;
}

std::optional<nn::Adam> load_cvae_optimizer(const std::filesystem::path& stem) {
  const auto path = with_suffix(stem, ".adam.json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  const auto meta = io::read_json(with_suffix(stem, ".meta.json"));
  nn::Adam adam;
  adam.import_state(nn::load_tensors(path), meta.value("optimizer_steps", std::uint64_t{0}));
  return adam;
}

}  // namespace scenepred::lower
