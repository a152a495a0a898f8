#include "scenepred/numerics/adam.hpp"

#include <cmath>

namespace scenepred::nn {

void Adam::step(ParameterSet& params, const Gradients& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("adam: gradient for unknown parameter '" + name + "'");
    if (!g.same_shape(it->second)) {
      throw ShapeError("adam: gradient " + g.shape_string() + " does not match parameter '" + name + "' " +
                       it->second.shape_string());
    }
    if (!g.all_finite()) throw NumericError("adam: non-finite gradient for parameter '" + name + "'");
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mi, fresh_m] = first_.try_emplace(name, Tensor(p.rows(), p.cols()));
    auto [vi, fresh_v] = second_.try_emplace(name, Tensor(p.rows(), p.cols()));
    auto m = mi->second.mat();
    auto v = vi->second.mat();
    m = config_.beta1 * m + (1.0 - config_.beta1) * g.mat();
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.mat().cwiseProduct(g.mat());
    p.mat().array() -= config_.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.epsilon);
  }
}

ParameterSet Adam::export_state() const {
  ParameterSet out;
  for (const auto& [name, t] : first_) out.emplace("m/" + name, t);
  for (const auto& [name, t] : second_) out.emplace("v/" + name, t);
  return out;
}

void Adam::import_state(const ParameterSet& state, std::uint64_t steps) {
  first_.clear();
  second_.clear();
  for (const auto& [key, t] : state) {
    if (key.starts_with("m/")) {
      first_.emplace(key.substr(2), t);
    } else if (key.starts_with("v/")) {
      second_.emplace(key.substr(2), t);
    } else {
      throw std::invalid_argument("adam: unexpected state entry '" + key + "'");
    }
  }
  steps_ = steps;
}

}  // namespace scenepred::nn
