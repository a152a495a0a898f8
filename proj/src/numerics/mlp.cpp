#include "scenepred/numerics/mlp.hpp"

#include <cmath>

namespace scenepred::nn {

std::string Mlp::weight_name(std::size_t layer) const { return prefix + "." + std::to_string(layer) + ".W"; }
std::string Mlp::bias_name(std::size_t layer) const { return prefix + "." + std::to_string(layer) + ".b"; }

void Mlp::init(ParameterSet& params, std::mt19937_64& rng) const {
  for (std::size_t l = 0; l < layers(); ++l) {
    const std::size_t in = sizes[l];
    const std::size_t out = sizes[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor w(in, out);
    for (double& v : w.values()) v = dist(rng);
    params.insert_or_assign(weight_name(l), std::move(w));
    params.insert_or_assign(bias_name(l), Tensor(1, out));
  }
}

Var Mlp::forward(Graph& g, const ParameterSet& params, Var x, double dropout_rate, std::mt19937_64* rng) const {
  Var h = x;
  for (std::size_t l = 0; l < layers(); ++l) {
    h = g.add(g.matmul(h, g.parameter(params, weight_name(l))), g.parameter(params, bias_name(l)));
    const bool last = l + 1 == layers();
    if (!last) h = g.tanh(h);
    if (l + 2 == layers() && dropout_rate > 0.0 && rng != nullptr) h = g.dropout(h, dropout_rate, *rng);
  }
  return h;
}

RowMatrix Mlp::infer(const ParameterSet& params, const RowMatrix& x) const {
  if (static_cast<std::size_t>(x.cols()) != input_dim()) {
    throw ShapeError("mlp '" + prefix + "': input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(input_dim()));
  }
  RowMatrix h = x;
  for (std::size_t l = 0; l < layers(); ++l) {
    const Tensor& w = params.at(weight_name(l));
    const Tensor& b = params.at(bias_name(l));
    RowMatrix next = h * w.mat();
    next.rowwise() += b.mat().row(0);
    if (l + 1 != layers()) next = next.array().tanh().matrix();
    h = std::move(next);
  }
  return h;
}

}  // namespace scenepred::nn
