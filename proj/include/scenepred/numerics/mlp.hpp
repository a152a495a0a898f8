#pragma once

#include "scenepred/numerics/graph.hpp"

#include <random>
#include <string>
#include <vector>

namespace scenepred::nn {

// Fully connected stack: tanh on hidden layers, linear output layer, optional dropout after the
// last hidden layer. Parameters are named "<prefix>.<layer>.W" ([in x out]) and "<prefix>.<layer>.b".
struct Mlp {
  std::string prefix;
  std::vector<std::size_t> sizes;  // input, hidden..., output

  std::size_t input_dim() const { return sizes.front(); }
  std::size_t output_dim() const { return sizes.back(); }
  std::size_t layers() const { return sizes.size() - 1; }
  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;

  // Glorot-uniform weights, zero biases.
  void init(ParameterSet& params, std::mt19937_64& rng) const;

  Var forward(Graph& g, const ParameterSet& params, Var x, double dropout_rate = 0.0,
              std::mt19937_64* rng = nullptr) const;

  // Graph-free inference path; matches forward() with dropout disabled.
  RowMatrix infer(const ParameterSet& params, const RowMatrix& x) const;
};

}  // namespace scenepred::nn
