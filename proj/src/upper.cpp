#include "scenepred/upper.hpp"

#include "scenepred/numerics/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace scenepred::upper {

using nn::Graph;
using nn::Tensor;
using nn::Var;
using scene::SceneSnapshot;

namespace {

constexpr double kMinFeatureStd = 1e-6;

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  std::filesystem::path p = stem;
  p += suffix;
  return p;
}

}  // namespace

RawFeatures raw_features(const SceneSnapshot& snapshot) {
  const auto& pred = snapshot.predicted();
  const auto& lanes = snapshot.lanes;
  RawFeatures out;
  auto set = [&](std::size_t i, double v) {
    out.values[i] = v;
    out.live[i] = true;
  };
  set(0, pred.v);
  set(1, pred.y - lanes.center(pred.lane));
  if (lanes.has_lane(pred.lane + 1)) set(2, pred.y - lanes.center(pred.lane + 1));
  if (lanes.has_lane(pred.lane - 1)) set(3, pred.y - lanes.center(pred.lane - 1));

  const auto dias = scene::extract_dias(snapshot);
  for (std::size_t k = 0; k < kAreas; ++k) {
    const int area = static_cast<int>(k) + 1;
    if (!dias.live(area)) continue;
    out.mask[k] = true;
    const auto& dia = dias.at(area);
    const auto inter = scene::interaction_state(snapshot, dia);
    const std::size_t base = kEgoFeatures + kAreaFeatures * k;
    set(base + 0, inter.state.dx);
    set(base + 1, inter.state.dy);
    set(base + 2, inter.state.v_ref - inter.state.v_pred);
    set(base + 3, std::min(dia.length(), scene::kSentinelHeadway));
    double headway = scene::kSentinelHeadway;
    if (inter.sources.ref_leader) {
      headway = std::min(inter.sources.ref_leader->x - inter.pose.ref.x, scene::kSentinelHeadway);
    }
    set(base + 4, headway);
    double dist = 0.0;
    if (pred.x < dia.rear_bound) dist = pred.x - dia.rear_bound;
    else if (pred.x > dia.front_bound) dist = pred.x - dia.front_bound;
    set(base + 5, std::clamp(dist, -scene::kSentinelHeadway, scene::kSentinelHeadway));
  }
  for (std::size_t k = 0; k < kAreas; ++k) {
    out.values[kMaskOffset + k] = out.mask[k] ? 1.0 : 0.0;
    out.live[kMaskOffset + k] = true;
  }
  return out;
}

Normalizer Normalizer::identity() {
  Normalizer n;
  n.mean.fill(0.0);
  n.stddev.fill(1.0);
  return n;
}

Normalizer Normalizer::fit(std::span<const RawFeatures> rows) {
  Normalizer n = identity();
  for (std::size_t i = 0; i < kMaskOffset; ++i) {
    double count = 0.0, mean = 0.0, m2 = 0.0;
    for (const auto& r : rows) {
      if (!r.live[i]) continue;
      count += 1.0;
      const double d = r.values[i] - mean;
      mean += d / count;
      m2 += d * (r.values[i] - mean);
    }
    if (count < 2.0) continue;
    const double sd = std::sqrt(m2 / count);
    n.mean[i] = mean;
    n.stddev[i] = sd > kMinFeatureStd ? sd : 1.0;
  }
  return n;
}

nlohmann::json Normalizer::to_json() const { return {{"mean", mean}, {"stddev", stddev}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer n;
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("stddev").get<std::vector<double>>();
  if (m.size() != kFeatureDim || s.size() != kFeatureDim)
    throw ModelError("feature normalizer has " + std::to_string(m.size()) + " entries, expected " + std::to_string(kFeatureDim));
  std::copy(m.begin(), m.end(), n.mean.begin());
  std::copy(s.begin(), s.end(), n.stddev.begin());
  return n;
}

FeatureVector normalize(const RawFeatures& raw, const Normalizer& norm) {
  FeatureVector x;
  x.mask = raw.mask;
  for (std::size_t i = 0; i < kFeatureDim; ++i)
    x.values[i] = raw.live[i] ? (raw.values[i] - norm.mean[i]) / norm.stddev[i] : 0.0;
  return x;
}

FeatureVector featurize(const SceneSnapshot& snapshot, const Normalizer& norm) {
  return normalize(raw_features(snapshot), norm);
}

gmm::Point LabelScaler::normalize(const gmm::Point& y) const {
  return {(y[0] - mean[0]) / stddev[0], (y[1] - mean[1]) / stddev[1]};
}

nlohmann::json LabelScaler::to_json() const { return {{"mean", mean}, {"stddev", stddev}}; }

LabelScaler LabelScaler::from_json(const nlohmann::json& j) {
  LabelScaler s;
  s.mean = j.at("mean").get<gmm::Point>();
  s.stddev = j.at("stddev").get<gmm::Point>();
  return s;
}

nn::Mlp UpperModel::trunk() const {
  std::vector<std::size_t> sizes{kFeatureDim};
  sizes.insert(sizes.end(), arch.hidden.begin(), arch.hidden.end());
  sizes.push_back(arch.output_dim());
  return {"upper", sizes};
}

int UpperPrediction::argmax() const {
  int best = 0;
  for (std::size_t k = 0; k < kAreas; ++k)
    if (mask[k] && (best == 0 || weights[k] > weights[static_cast<std::size_t>(best - 1)])) best = static_cast<int>(k) + 1;
  return best;
}

const gmm::Gmm2D& UpperPrediction::area(int area_id) const {
  if (area_id < 1 || area_id > static_cast<int>(kAreas) || !areas[static_cast<std::size_t>(area_id - 1)])
    throw ModelError("area " + std::to_string(area_id) + " is not live in this prediction");
  return *areas[static_cast<std::size_t>(area_id - 1)];
}

UpperModel init_upper(const UpperArch& arch, const Normalizer& features, const LabelScaler& labels, std::mt19937_64& rng) {
  UpperModel m;
  m.arch = arch;
  m.features = features;
  m.labels = labels;
  m.trunk().init(m.params, rng);
  return m;
}

UpperPrediction decode_output(const UpperModel& model, std::span<const double> output, const std::array<bool, kAreas>& mask) {
  const std::size_t M = model.arch.components;
  if (output.size() != model.arch.output_dim()) throw ModelError("upper output has the wrong width");
  UpperPrediction p;
  p.mask = mask;
  double mx = -1e300;
  for (std::size_t k = 0; k < kAreas; ++k)
    if (mask[k]) mx = std::max(mx, output[k]);
  double z = 0.0;
  for (std::size_t k = 0; k < kAreas; ++k)
    if (mask[k]) z += std::exp(output[k] - mx);
  for (std::size_t k = 0; k < kAreas; ++k) {
    if (!mask[k]) continue;
    p.weights[k] = std::exp(output[k] - mx) / z;
    const auto head = output.subspan(kAreas + k * 6 * M, 6 * M);
    p.areas[k] = gmm::Gmm2D::from_raw(head, M).affine(model.labels.stddev, model.labels.mean);
  }
  return p;
}

std::vector<UpperPrediction> predict_upper(const UpperModel& model, std::span<const FeatureVector> xs) {
  std::vector<UpperPrediction> out;
  if (xs.empty()) return out;
  nn::RowMatrix x(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(kFeatureDim));
  for (std::size_t r = 0; r < xs.size(); ++r) {
    bool any = false;
    for (std::size_t i = 0; i < kFeatureDim; ++i) x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = xs[r].values[i];
    for (bool b : xs[r].mask) any = any || b;
    if (!any) throw ModelError("feature vector has no live area");
  }
  const nn::RowMatrix y = model.trunk().infer(model.params, x);
  for (std::size_t r = 0; r < xs.size(); ++r) {
    const auto row = std::span<const double>(y.data() + r * static_cast<std::size_t>(y.cols()), static_cast<std::size_t>(y.cols()));
    out.push_back(decode_output(model, row, xs[r].mask));
  }
  return out;
}

UpperPrediction predict_upper(const UpperModel& model, const FeatureVector& x) {
  return predict_upper(model, std::span<const FeatureVector>(&x, 1)).front();
}

UpperLoss upper_loss(Graph& g, Var output, const Tensor& mask, const Tensor& onehot, const Tensor& y,
                     std::size_t components, double w1, double w2) {
  const std::size_t B = mask.rows();
  const std::size_t head = 6 * components;
  if (B == 0) throw ModelError("upper_loss: empty batch");
  if (g.value(output).rows() != B || g.value(output).cols() != kAreas + kAreas * head || onehot.rows() != B ||
      onehot.cols() != kAreas || mask.cols() != kAreas || y.rows() != B || y.cols() != 2)
    throw nn::ShapeError("upper_loss: inconsistent batch shapes");
  if (!(w1 > 0.0 && w2 > 0.0)) throw ModelError("upper_loss: loss weights must be positive");
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t k = 0; k < kAreas; ++k)
      if (onehot(r, k) != 0.0 && mask(r, k) == 0.0)
        throw ModelError("label references masked area " + std::to_string(k + 1) + " in batch row " + std::to_string(r));

  const Var yv = g.input(y);
  std::vector<Var> per_area;
  for (std::size_t k = 0; k < kAreas; ++k) {
    const std::size_t begin = kAreas + k * head;
    per_area.push_back(g.gmm2d_log_density(g.slice(output, begin, begin + head), yv, components, gmm::kHeadMinStd));
  }
  const Var log_p = g.concat(per_area);
  // Masked areas never carry label weight, so they drop out of the weighted sum.
  const Var nll = g.scale(g.sum(g.log_weighted_sum_exp(log_p, g.input(onehot))), -1.0);
  const Var log_w = g.log_softmax(g.slice(output, 0, kAreas), mask);
  const Var ce = g.scale(g.sum(g.mul(log_w, g.input(onehot))), -1.0);
  const Var total = g.add(g.scale(nll, w1), g.scale(ce, w2));
  return {total, nll, ce};
}

std::vector<UpperSample> upper_samples(std::span<const datagen::Episode> episodes) {
  std::vector<UpperSample> out;
  for (const auto& e : episodes) {
    for (std::size_t j = 0; j < e.frames.size(); ++j) {
      UpperSample s;
      s.raw = raw_features(e.frames[j]);
      s.area = e.label_area;
      s.y = {e.insertion_lateral, e.ttlc[j]};
      s.ttlc = e.ttlc[j];
      s.episode = e.id;
      if (!s.raw.mask[static_cast<std::size_t>(s.area - 1)])
        throw ModelError("episode " + std::to_string(e.id) + " frame " + std::to_string(j) + ": label area is not live");
      out.push_back(s);
    }
  }
  return out;
}

nlohmann::json UpperTrainConfig::to_json() const {
  return {{"w1", w1},
          {"w2", w2},
          {"auto_balance", auto_balance},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"hidden", arch.hidden},
          {"components", arch.components},
          {"dropout", arch.dropout},
          {"frames_per_episode", frames_per_episode}};
}

UpperTrainConfig UpperTrainConfig::from_json(const nlohmann::json& j) {
  UpperTrainConfig c;
  c.w1 = j.value("w1", c.w1);
  c.w2 = j.value("w2", c.w2);
  c.auto_balance = j.value("auto_balance", c.auto_balance);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.arch.hidden = j.value("hidden", c.arch.hidden);
  c.arch.components = j.value("components", c.arch.components);
  c.arch.dropout = j.value("dropout", c.arch.dropout);
  c.frames_per_episode = j.value("frames_per_episode", c.frames_per_episode);
  if (!(c.w1 > 0.0 && c.w2 > 0.0)) throw std::invalid_argument("upper: w1 and w2 must be positive");
  if (c.epochs < 0 || c.batch_size == 0 || !(c.learning_rate > 0.0) || c.arch.components == 0 ||
      !(c.arch.dropout >= 0.0 && c.arch.dropout < 1.0))
    throw std::invalid_argument("upper: invalid training configuration");
  return c;
}

UpperTrainResult train_upper(std::span<const datagen::Episode> episodes, const UpperTrainConfig& config,
                             std::mt19937_64& rng, const UpperTrainResult* resume, const EpochCallback& on_epoch) {
  if (episodes.empty()) throw ModelError("train_upper: empty dataset");
  const auto samples = upper_samples(episodes);

  UpperTrainResult result;
  if (resume) {
    result.model = resume->model;
    result.optimizer = resume->optimizer;
    result.log = resume->log;
  } else {
    std::vector<RawFeatures> raws;
    raws.reserve(samples.size());
    for (const auto& s : samples) raws.push_back(s.raw);
    LabelScaler labels;
    for (std::size_t d = 0; d < 2; ++d) {
      double mean = 0.0, m2 = 0.0;
      for (const auto& s : samples) mean += s.y[d];
      mean /= static_cast<double>(samples.size());
      for (const auto& s : samples) m2 += (s.y[d] - mean) * (s.y[d] - mean);
      const double sd = std::sqrt(m2 / static_cast<double>(samples.size()));
      labels.mean[d] = mean;
      labels.stddev[d] = sd > 1e-6 ? sd : 1.0;
    }
    result.model = init_upper(config.arch, Normalizer::fit(raws), labels, rng);
    result.optimizer = nn::Adam(nn::AdamConfig{config.learning_rate});
  }
  UpperModel& model = result.model;
  result.optimizer.set_learning_rate(config.learning_rate);
  const nn::Mlp trunk = model.trunk();
  const std::size_t M = model.arch.components;

  std::vector<FeatureVector> xs;
  xs.reserve(samples.size());
  for (const auto& s : samples) xs.push_back(normalize(s.raw, model.features));

  // Episode -> sample index ranges, for per-episode frame subsampling.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (ranges.empty() || samples[ranges.back().first].episode != samples[i].episode) ranges.push_back({i, i});
    ranges.back().second = i + 1;
  }

  double w2 = result.log.empty() ? config.w2 : result.log.back().w2;
  const int first_epoch = result.log.empty() ? 1 : result.log.back().epoch + 1;
  nn::ParameterSet last_good = model.params;
  for (int epoch = first_epoch; epoch < first_epoch + config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order;
    if (config.frames_per_episode == 0) {
      order.resize(samples.size());
      std::iota(order.begin(), order.end(), 0);
    } else {
      for (const auto& [b, e] : ranges) {
        std::uniform_int_distribution<std::size_t> pick(b, e - 1);
        for (std::size_t k = 0; k < config.frames_per_episode; ++k) order.push_back(pick(rng));
      }
    }
    std::shuffle(order.begin(), order.end(), rng);

    double nll_sum = 0.0, ce_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      Tensor x(B, kFeatureDim), mask(B, kAreas), onehot(B, kAreas), y(B, 2);
      for (std::size_t r = 0; r < B; ++r) {
        const std::size_t i = order[start + r];
        std::copy(xs[i].values.begin(), xs[i].values.end(), x.data() + r * kFeatureDim);
        for (std::size_t k = 0; k < kAreas; ++k) mask(r, k) = xs[i].mask[k] ? 1.0 : 0.0;
        onehot(r, static_cast<std::size_t>(samples[i].area - 1)) = 1.0;
        const auto yn = model.labels.normalize(samples[i].y);
        y(r, 0) = yn[0];
        y(r, 1) = yn[1];
      }
      Graph g;
      const Var out = trunk.forward(g, model.params, g.input(std::move(x)), model.arch.dropout, &rng);
      const UpperLoss loss = upper_loss(g, out, mask, onehot, y, M, config.w1, w2);
      const double nll = g.value(loss.nll).item();
      const double ce = g.value(loss.ce).item();
      if (!std::isfinite(nll) || !std::isfinite(ce)) {
        model.params = last_good;
        throw TrainingDiverged("upper training diverged in epoch " + std::to_string(epoch), model, epoch - 1);
      }
      nll_sum += nll;
      ce_sum += ce;
      const Var objective = g.scale(loss.total, 1.0 / static_cast<double>(B));
      auto grads = g.backward(objective);
      try {
        result.optimizer.step(model.params, grads);
      } catch (const nn::NumericError& e) {
        model.params = last_good;
        throw TrainingDiverged(std::string("upper training diverged: ") + e.what(), model, epoch - 1);
      }
    }
    const double n = static_cast<double>(order.size());
    UpperEpochLog entry;
    entry.epoch = epoch;
    entry.nll = nll_sum / n;
    entry.ce = ce_sum / n;
    entry.w2 = w2;
    entry.total = config.w1 * entry.nll + w2 * entry.ce;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    last_good = model.params;
    if (on_epoch) on_epoch(entry);
    if (config.auto_balance && entry.ce > 0.0)
      w2 = std::clamp(config.w1 * std::abs(entry.nll) / entry.ce, 1e-3, 1e3);
  }
  return result;
}

void save_upper(const std::filesystem::path& stem, const UpperModel& model, const nn::Adam* optimizer,
                const nlohmann::json& extra) {
  nlohmann::json meta = {{"kind", "upper"},
                         {"feature_layout_version", kFeatureLayoutVersion},
                         {"feature_dim", kFeatureDim},
                         {"areas", kAreas},
                         {"components", model.arch.components},
                         {"hidden", model.arch.hidden},
                         {"dropout", model.arch.dropout},
                         {"features", model.features.to_json()},
                         {"labels", model.labels.to_json()},
                         {"optimizer_steps", optimizer ? optimizer->step_count() : 0}};
  if (!extra.is_null()) meta["run"] = extra;
  nn::save_tensors(with_suffix(stem, ".params.json"), model.params);
  if (optimizer) nn::save_tensors(with_suffix(stem, ".adam.json"), optimizer->export_state());
  io::write_text_atomic(with_suffix(stem, ".meta.json"), meta.dump(2) + "\n");
}

UpperModel load_upper(const std::filesystem::path& stem) {
  const auto meta = io::read_json(with_suffix(stem, ".meta.json"));
  if (meta.value("kind", std::string()) != "upper") throw ModelError(stem.string() + " is not an upper-module checkpoint");
  if (meta.value("feature_layout_version", 0) != kFeatureLayoutVersion)
    throw ModelError(stem.string() + ": unsupported feature layout version");
  UpperModel m;
  m.arch.components = meta.at("components").get<std::size_t>();
  m.arch.hidden = meta.at("hidden").get<std::vector<std::size_t>>();
  m.arch.dropout = meta.at("dropout").get<double>();
  m.features = Normalizer::from_json(meta.at("features"));
  m.labels = LabelScaler::from_json(meta.at("labels"));
  m.params = nn::load_tensors(with_suffix(stem, ".params.json"));
  const nn::Mlp trunk = m.trunk();
  for (std::size_t l = 0; l < trunk.layers(); ++l) {
    const auto w = m.params.find(trunk.weight_name(l));
    if (w == m.params.end() || w->second.rows() != trunk.sizes[l] || w->second.cols() != trunk.sizes[l + 1])
      throw ModelError(stem.string() + ": parameter " + trunk.weight_name(l) + " missing or misshapen");
  }
  return m;
}

std::optional<nn::Adam> load_upper_optimizer(const std::filesystem::path& stem) {
  const auto path = with_suffix(stem, ".adam.json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  const auto meta = io::read_json(with_suffix(stem, ".meta.json"));
  nn::Adam adam;
  adam.import_state(nn::load_tensors(path), meta.value("optimizer_steps", std::uint64_t{0}));
  return adam;
}

}  // namespace scenepred::upper
