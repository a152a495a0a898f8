#pragma once

#include "scenepred/numerics/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace scenepred::nn {

using ParameterSet = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

enum class OpKind : std::uint8_t {
  input,
  parameter,
  matmul,
  add,
  sub,
  mul,
  scale,
  tanh,
  exp,
  log,
  square,
  sum,
  mean,
  row_sum,
  concat,
  slice,
  dropout,
  softmax,
  log_softmax,
  gaussian_log_density,
  kl_std_normal,
  gmm2d_log_density,
  log_weighted_sum_exp,
};

const char* op_name(OpKind op);

// Eager reverse-mode tape. Every op computes its value on construction; backward() replays the
// tape in reverse insertion order. Not thread-safe; use one Graph per thread.
class Graph {
 public:
  Var input(Tensor value);
  // Binds a named parameter by reference. The set must outlive the graph and stay unmodified
  // until backward() returns.
  Var parameter(const ParameterSet& params, const std::string& name);

  Var matmul(Var a, Var b);
  // Elementwise; `b` may also be a single row broadcast over the rows of `a`.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var row_sum(Var a);
  Var concat(std::span<const Var> parts);
  Var slice(Var a, std::size_t col_begin, std::size_t col_end);
  // Inverted dropout: kept entries are scaled by 1/(1-rate).
  Var dropout(Var a, double rate, std::mt19937_64& rng);
  // Row-wise softmax. Entries whose mask is 0 are excluded and produce 0.
  Var softmax(Var logits, std::optional<Tensor> mask = std::nullopt);
  Var log_softmax(Var logits, std::optional<Tensor> mask = std::nullopt);
  // Row-wise diagonal Gaussian log-density, summed over columns -> [rows x 1].
  Var gaussian_log_density(Var y, Var mean, Var log_std);
  // Row-wise KL[N(mean, exp(log_var)) || N(0, I)] -> [rows x 1].
  Var kl_std_normal(Var mean, Var log_var);
  // Row-wise log-density of a 2-D Gaussian mixture given unconstrained head outputs laid out as
  // [logits | mean_s | mean_t | log_std_s | log_std_t | corr_pre], each block `components` wide.
  Var gmm2d_log_density(Var raw_head, Var y, std::size_t components, double min_std);
  // Row-wise log(sum_c w_c exp(l_c)) over entries with w_c > 0. Weights are treated as constants.
  Var log_weighted_sum_exp(Var log_values, Var weights);

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a scalar output w.r.t. every parameter bound to this graph. Parameters not
  // reachable from `output` receive zero gradients.
  Gradients backward(Var output);

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    Tensor aux;  // op-specific cache (dropout mask, softmax probabilities, responsibilities...)
    std::optional<Tensor> mask;
    const Tensor* external = nullptr;  // parameter storage
    std::string name;
    double scalar = 0.0;
    std::size_t a0 = 0, a1 = 0;
    bool needs_grad = false;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  bool any_needs_grad(std::initializer_list<Var> vars) const;
  void accumulate(std::size_t id, const RowMatrix& g);
  void backprop(Node& n);

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, const Tensor*>> params_;
};

}  // namespace scenepred::nn
