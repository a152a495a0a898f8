#include "scenepred/numerics/graph.hpp"

#include <algorithm>
#include <utility>
#include <cmath>
#include <limits>
#include <numbers>

namespace scenepred::nn {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
constexpr double kCorrScale = 0.999;

[[noreturn]] void shape_mismatch(OpKind op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::input: return "input";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::row_sum: return "row_sum";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::dropout: return "dropout";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::gaussian_log_density: return "gaussian_log_density";
    case OpKind::kl_std_normal: return "kl_std_normal";
    case OpKind::gmm2d_log_density: return "gmm2d_log_density";
    case OpKind::log_weighted_sum_exp: return "log_weighted_sum_exp";
  }
  return "unknown";
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("graph node id out of range");
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.value;
}

bool Graph::any_needs_grad(std::initializer_list<Var> vars) const {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return node(v).needs_grad; });
}

Var Graph::input(Tensor value) {
  Node n{.op = OpKind::input, .value = std::move(value)};
  return push(std::move(n));
}

Var Graph::parameter(const ParameterSet& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  Node n{.op = OpKind::parameter, .external = &it->second, .name = name, .needs_grad = true};
  params_.emplace_back(name, &it->second);
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.cols() != y.rows()) shape_mismatch(OpKind::matmul, x, y);
  Tensor out(x.rows(), y.cols());
  out.mat().noalias() = x.mat() * y.mat();
  return push(Node{.op = OpKind::matmul, .inputs = {a.id, b.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a, b})});
}

Var Graph::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  Tensor out(x.rows(), x.cols());
  if (x.same_shape(y)) {
    out.mat() = x.mat() + y.mat();
  } else if (y.rows() == 1 && y.cols() == x.cols()) {
    out.mat() = x.mat().rowwise() + y.mat().row(0);
  } else {
    shape_mismatch(OpKind::add, x, y);
  }
  return push(Node{.op = OpKind::add, .inputs = {a.id, b.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a, b})});
}

Var Graph::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y)) shape_mismatch(OpKind::sub, x, y);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat() - y.mat();
  return push(Node{.op = OpKind::sub, .inputs = {a.id, b.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a, b})});
}

Var Graph::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y)) shape_mismatch(OpKind::mul, x, y);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat().cwiseProduct(y.mat());
  return push(Node{.op = OpKind::mul, .inputs = {a.id, b.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a, b})});
}

Var Graph::scale(Var a, double factor) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat() * factor;
  return push(Node{.op = OpKind::scale, .inputs = {a.id}, .value = std::move(out), .scalar = factor,
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::tanh(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat().array().tanh().matrix();
  return push(Node{.op = OpKind::tanh, .inputs = {a.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::exp(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat().array().exp().matrix();
  return push(Node{.op = OpKind::exp, .inputs = {a.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::log(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat().array().log().matrix();
  return push(Node{.op = OpKind::log, .inputs = {a.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::square(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat().array().square().matrix();
  return push(Node{.op = OpKind::square, .inputs = {a.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::sum(Var a) {
  return push(Node{.op = OpKind::sum, .inputs = {a.id}, .value = Tensor::scalar(value(a).mat().sum()),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::mean(Var a) {
  const Tensor& x = value(a);
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return push(Node{.op = OpKind::mean, .inputs = {a.id}, .value = Tensor::scalar(x.mat().mean()),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::row_sum(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), 1);
  out.mat() = x.mat().rowwise().sum();
  return push(Node{.op = OpKind::row_sum, .inputs = {a.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({a})});
}

Var Graph::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  bool grad = false;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    const Tensor& t = value(p);
    if (t.rows() != rows) shape_mismatch(OpKind::concat, value(parts[0]), t);
    cols += t.cols();
    grad = grad || node(p).needs_grad;
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    out.mat().middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(t.cols())) = t.mat();
    offset += t.cols();
  }
  return push(Node{.op = OpKind::concat, .inputs = std::move(ids), .value = std::move(out), .needs_grad = grad});
}

Var Graph::slice(Var a, std::size_t col_begin, std::size_t col_end) {
  const Tensor& x = value(a);
  if (col_begin > col_end || col_end > x.cols()) {
    throw ShapeError("slice: columns [" + std::to_string(col_begin) + ", " + std::to_string(col_end) +
                     ") out of range for " + x.shape_string());
  }
  Tensor out(x.rows(), col_end - col_begin);
  out.mat() = x.mat().middleCols(static_cast<Eigen::Index>(col_begin),
                                 static_cast<Eigen::Index>(col_end - col_begin));
  return push(Node{.op = OpKind::slice, .inputs = {a.id}, .value = std::move(out), .a0 = col_begin,
                   .a1 = col_end, .needs_grad = any_needs_grad({a})});
}

Var Graph::dropout(Var a, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  const Tensor& x = value(a);
  Tensor mask(x.rows(), x.cols());
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = keep(rng) ? s : 0.0;
  Tensor out(x.rows(), x.cols());
  out.mat() = x.mat().cwiseProduct(mask.mat());
  return push(Node{.op = OpKind::dropout, .inputs = {a.id}, .value = std::move(out), .aux = std::move(mask),
                   .needs_grad = any_needs_grad({a})});
}

namespace {

// Row-wise masked log-sum-exp and probabilities.
void masked_softmax_rows(const Tensor& x, const std::optional<Tensor>& mask, Tensor& probs, Tensor& lse) {
  probs = Tensor(x.rows(), x.cols());
  lse = Tensor(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c)
      if (!mask || (*mask)(r, c) != 0.0) mx = std::max(mx, x(r, c));
    if (!std::isfinite(mx)) throw NumericError("softmax: row " + std::to_string(r) + " has no live entries");
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c)
      if (!mask || (*mask)(r, c) != 0.0) z += std::exp(x(r, c) - mx);
    for (std::size_t c = 0; c < x.cols(); ++c)
      probs(r, c) = (!mask || (*mask)(r, c) != 0.0) ? std::exp(x(r, c) - mx) / z : 0.0;
    lse(r, 0) = mx + std::log(z);
  }
}

void check_mask(OpKind op, const Tensor& x, const std::optional<Tensor>& mask) {
  if (!mask) return;
  if (mask->same_shape(x)) return;
  shape_mismatch(op, x, *mask);
}

}  // namespace

Var Graph::softmax(Var logits, std::optional<Tensor> mask) {
  const Tensor& x = value(logits);
  check_mask(OpKind::softmax, x, mask);
  Tensor probs, lse;
  masked_softmax_rows(x, mask, probs, lse);
  Tensor aux = probs;
  return push(Node{.op = OpKind::softmax, .inputs = {logits.id}, .value = std::move(probs), .aux = std::move(aux),
                   .mask = std::move(mask), .needs_grad = any_needs_grad({logits})});
}

Var Graph::log_softmax(Var logits, std::optional<Tensor> mask) {
  const Tensor& x = value(logits);
  check_mask(OpKind::log_softmax, x, mask);
  Tensor probs, lse;
  masked_softmax_rows(x, mask, probs, lse);
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(r, c) = (!mask || (*mask)(r, c) != 0.0) ? x(r, c) - lse(r, 0) : 0.0;
  return push(Node{.op = OpKind::log_softmax, .inputs = {logits.id}, .value = std::move(out),
                   .aux = std::move(probs), .mask = std::move(mask), .needs_grad = any_needs_grad({logits})});
}

Var Graph::gaussian_log_density(Var y, Var mean, Var log_std) {
  const Tensor& yv = value(y);
  const Tensor& mv = value(mean);
  const Tensor& sv = value(log_std);
  if (!yv.same_shape(mv)) shape_mismatch(OpKind::gaussian_log_density, yv, mv);
  if (!yv.same_shape(sv)) shape_mismatch(OpKind::gaussian_log_density, yv, sv);
  Tensor out(yv.rows(), 1);
  for (std::size_t r = 0; r < yv.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < yv.cols(); ++c) {
      const double u = (yv(r, c) - mv(r, c)) * std::exp(-sv(r, c));
      acc += -0.5 * kLog2Pi - sv(r, c) - 0.5 * u * u;
    }
    out(r, 0) = acc;
  }
  return push(Node{.op = OpKind::gaussian_log_density, .inputs = {y.id, mean.id, log_std.id},
                   .value = std::move(out), .needs_grad = any_needs_grad({y, mean, log_std})});
}

Var Graph::kl_std_normal(Var mean, Var log_var) {
  const Tensor& m = value(mean);
  const Tensor& lv = value(log_var);
  if (!m.same_shape(lv)) shape_mismatch(OpKind::kl_std_normal, m, lv);
  Tensor out(m.rows(), 1);
  out.mat() = 0.5 * (m.mat().array().square() + lv.mat().array().exp() - 1.0 - lv.mat().array())
                        .matrix()
                        .rowwise()
                        .sum();
  return push(Node{.op = OpKind::kl_std_normal, .inputs = {mean.id, log_var.id}, .value = std::move(out),
                   .needs_grad = any_needs_grad({mean, log_var})});
}

Var Graph::gmm2d_log_density(Var raw_head, Var y, std::size_t components, double min_std) {
  const Tensor& h = value(raw_head);
  const Tensor& yv = value(y);
  const std::size_t M = components;
  if (M == 0 || h.cols() != 6 * M || yv.cols() != 2 || h.rows() != yv.rows())
    shape_mismatch(OpKind::gmm2d_log_density, h, yv);
  Tensor out(h.rows(), 1);
  // aux holds per-row, per-component partials of log p w.r.t. the raw head (6M) then y (2).
  Tensor partials(h.rows(), 6 * M + 2);
  std::vector<double> logc(M);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    double lmax = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < M; ++m) lmax = std::max(lmax, h(r, m));
    double z = 0.0;
    for (std::size_t m = 0; m < M; ++m) z += std::exp(h(r, m) - lmax);
    const double log_z = lmax + std::log(z);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < M; ++m) {
      const double ss = min_std + std::exp(h(r, 3 * M + m));
      const double st = min_std + std::exp(h(r, 4 * M + m));
      const double rho = kCorrScale * std::tanh(h(r, 5 * M + m));
      const double one_m = 1.0 - rho * rho;
      const double u = (yv(r, 0) - h(r, M + m)) / ss;
      const double v = (yv(r, 1) - h(r, 2 * M + m)) / st;
      const double q = u * u - 2.0 * rho * u * v + v * v;
      logc[m] = (h(r, m) - log_z) - kLog2Pi - std::log(ss) - std::log(st) - 0.5 * std::log(one_m) -
                0.5 * q / one_m;
      best = std::max(best, logc[m]);
    }
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) acc += std::exp(logc[m] - best);
    const double lp = best + std::log(acc);
    out(r, 0) = lp;
    double gy_s = 0.0, gy_t = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const double resp = std::exp(logc[m] - lp);
      const double alpha = std::exp(h(r, m) - log_z);
      const double es = std::exp(h(r, 3 * M + m));
      const double et = std::exp(h(r, 4 * M + m));
      const double ss = min_std + es;
      const double st = min_std + et;
      const double th = std::tanh(h(r, 5 * M + m));
      const double rho = kCorrScale * th;
      const double one_m = 1.0 - rho * rho;
      const double u = (yv(r, 0) - h(r, M + m)) / ss;
      const double v = (yv(r, 1) - h(r, 2 * M + m)) / st;
      const double q = u * u - 2.0 * rho * u * v + v * v;
      const double d_mu_s = (u - rho * v) / (one_m * ss);
      const double d_mu_t = (v - rho * u) / (one_m * st);
      const double d_ss = -1.0 / ss + (u * u - rho * u * v) / (one_m * ss);
      const double d_st = -1.0 / st + (v * v - rho * u * v) / (one_m * st);
      const double d_rho = rho / one_m + u * v / one_m - rho * q / (one_m * one_m);
      partials(r, m) = resp - alpha;
      partials(r, M + m) = resp * d_mu_s;
      partials(r, 2 * M + m) = resp * d_mu_t;
      partials(r, 3 * M + m) = resp * d_ss * es;
      partials(r, 4 * M + m) = resp * d_st * et;
      partials(r, 5 * M + m) = resp * d_rho * kCorrScale * (1.0 - th * th);
      gy_s -= resp * d_mu_s;
      gy_t -= resp * d_mu_t;
    }
    partials(r, 6 * M) = gy_s;
    partials(r, 6 * M + 1) = gy_t;
  }
  return push(Node{.op = OpKind::gmm2d_log_density, .inputs = {raw_head.id, y.id}, .value = std::move(out),
                   .aux = std::move(partials), .a0 = M, .needs_grad = any_needs_grad({raw_head, y})});
}

Var Graph::log_weighted_sum_exp(Var log_values, Var weights) {
  const Tensor& l = value(log_values);
  const Tensor& w = value(weights);
  if (!l.same_shape(w)) shape_mismatch(OpKind::log_weighted_sum_exp, l, w);
  Tensor out(l.rows(), 1);
  Tensor partials(l.rows(), l.cols());
  for (std::size_t r = 0; r < l.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < l.cols(); ++c)
      if (w(r, c) > 0.0) mx = std::max(mx, l(r, c));
    if (!std::isfinite(mx)) throw NumericError("log_weighted_sum_exp: row " + std::to_string(r) + " has no positive weight");
    double z = 0.0;
    for (std::size_t c = 0; c < l.cols(); ++c)
      if (w(r, c) > 0.0) z += w(r, c) * std::exp(l(r, c) - mx);
    out(r, 0) = mx + std::log(z);
    for (std::size_t c = 0; c < l.cols(); ++c)
      partials(r, c) = w(r, c) > 0.0 ? w(r, c) * std::exp(l(r, c) - out(r, 0)) : 0.0;
  }
  return push(Node{.op = OpKind::log_weighted_sum_exp, .inputs = {log_values.id, weights.id},
                   .value = std::move(out), .aux = std::move(partials), .needs_grad = any_needs_grad({log_values})});
}

void Graph::accumulate(std::size_t id, const RowMatrix& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.grad.empty()) {
    const Tensor& v = n.external ? *n.external : n.value;
    n.grad = Tensor(v.rows(), v.cols());
  }
  n.grad.mat() += g;
}

void Graph::backprop(Node& n) {
  const ConstMatrixMap g = std::as_const(n.grad).mat();
  auto in = [&](std::size_t k) -> const Tensor& {
    const Node& src = nodes_[n.inputs[k]];
    return src.external ? *src.external : src.value;
  };
  switch (n.op) {
    case OpKind::input:
    case OpKind::parameter:
      break;
    case OpKind::matmul:
      accumulate(n.inputs[0], g * in(1).mat().transpose());
      accumulate(n.inputs[1], in(0).mat().transpose() * g);
      break;
    case OpKind::add:
      accumulate(n.inputs[0], g);
      if (in(1).same_shape(n.value)) {
        accumulate(n.inputs[1], g);
      } else {
        accumulate(n.inputs[1], g.colwise().sum());
      }
      break;
    case OpKind::sub:
      accumulate(n.inputs[0], g);
      accumulate(n.inputs[1], -g);
      break;
    case OpKind::mul:
      accumulate(n.inputs[0], g.cwiseProduct(in(1).mat()));
      accumulate(n.inputs[1], g.cwiseProduct(in(0).mat()));
      break;
    case OpKind::scale:
      accumulate(n.inputs[0], g * n.scalar);
      break;
    case OpKind::tanh:
      accumulate(n.inputs[0], g.cwiseProduct((1.0 - n.value.mat().array().square()).matrix()));
      break;
    case OpKind::exp:
      accumulate(n.inputs[0], g.cwiseProduct(n.value.mat()));
      break;
    case OpKind::log:
      accumulate(n.inputs[0], g.cwiseQuotient(in(0).mat()));
      break;
    case OpKind::square:
      accumulate(n.inputs[0], 2.0 * g.cwiseProduct(in(0).mat()));
      break;
    case OpKind::sum: {
      const Tensor& x = in(0);
      accumulate(n.inputs[0], RowMatrix::Constant(static_cast<Eigen::Index>(x.rows()),
                                                  static_cast<Eigen::Index>(x.cols()), g(0, 0)));
      break;
    }
    case OpKind::mean: {
      const Tensor& x = in(0);
      accumulate(n.inputs[0], RowMatrix::Constant(static_cast<Eigen::Index>(x.rows()),
                                                  static_cast<Eigen::Index>(x.cols()),
                                                  g(0, 0) / static_cast<double>(x.size())));
      break;
    }
    case OpKind::row_sum: {
      const Tensor& x = in(0);
      accumulate(n.inputs[0], g.col(0).replicate(1, static_cast<Eigen::Index>(x.cols())));
      break;
    }
    case OpKind::concat: {
      Eigen::Index offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto c = static_cast<Eigen::Index>(in(k).cols());
        accumulate(n.inputs[k], g.middleCols(offset, c));
        offset += c;
      }
      break;
    }
    case OpKind::slice: {
      const Tensor& x = in(0);
      RowMatrix full = RowMatrix::Zero(static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols()));
      full.middleCols(static_cast<Eigen::Index>(n.a0), static_cast<Eigen::Index>(n.a1 - n.a0)) = g;
      accumulate(n.inputs[0], full);
      break;
    }
    case OpKind::dropout:
      accumulate(n.inputs[0], g.cwiseProduct(n.aux.mat()));
      break;
    case OpKind::softmax: {
      const auto p = n.aux.mat();
      RowMatrix dx(p.rows(), p.cols());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double dot = p.row(r).dot(g.row(r));
        dx.row(r) = p.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
      }
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::log_softmax: {
      const auto p = n.aux.mat();
      RowMatrix dx(p.rows(), p.cols());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        double gs = 0.0;
        for (Eigen::Index c = 0; c < p.cols(); ++c)
          if (!n.mask || (*n.mask)(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != 0.0) gs += g(r, c);
        for (Eigen::Index c = 0; c < p.cols(); ++c) {
          const bool live = !n.mask || (*n.mask)(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != 0.0;
          dx(r, c) = live ? g(r, c) - p(r, c) * gs : 0.0;
        }
      }
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::gaussian_log_density: {
      const auto y = in(0).mat();
      const auto m = in(1).mat();
      const auto s = in(2).mat();
      const RowMatrix inv_var = (-2.0 * s.array()).exp().matrix();
      const RowMatrix diff = y - m;
      const RowMatrix gcol = g.col(0).replicate(1, y.cols());
      const RowMatrix d_mean = diff.cwiseProduct(inv_var);
      accumulate(n.inputs[0], -gcol.cwiseProduct(d_mean));
      accumulate(n.inputs[1], gcol.cwiseProduct(d_mean));
      accumulate(n.inputs[2],
                 gcol.cwiseProduct((diff.array().square() * inv_var.array() - 1.0).matrix()));
      break;
    }
    case OpKind::kl_std_normal: {
      const auto m = in(0).mat();
      const auto lv = in(1).mat();
      const RowMatrix gcol = g.col(0).replicate(1, m.cols());
      accumulate(n.inputs[0], gcol.cwiseProduct(m));
      accumulate(n.inputs[1], gcol.cwiseProduct((0.5 * (lv.array().exp() - 1.0)).matrix()));
      break;
    }
    case OpKind::gmm2d_log_density: {
      const std::size_t M = n.a0;
      const auto p = n.aux.mat();
      const RowMatrix gcol_h = g.col(0).replicate(1, static_cast<Eigen::Index>(6 * M));
      accumulate(n.inputs[0], gcol_h.cwiseProduct(p.leftCols(static_cast<Eigen::Index>(6 * M))));
      accumulate(n.inputs[1], g.col(0).replicate(1, 2).cwiseProduct(p.rightCols(2)));
      break;
    }
    case OpKind::log_weighted_sum_exp: {
      const auto p = n.aux.mat();
      accumulate(n.inputs[0], g.col(0).replicate(1, p.cols()).cwiseProduct(p));
      break;
    }
  }
}

Gradients Graph::backward(Var output) {
  Node& out = nodes_.at(output.id);
  if (out.value.size() != 1 || out.external) {
    throw ShapeError(std::string("backward: output must be a scalar, got ") + value(output).shape_string());
  }
  for (Node& n : nodes_) n.grad = Tensor();
  Gradients grads;
  for (const auto& [name, t] : params_) grads.try_emplace(name, Tensor(t->rows(), t->cols()));
  if (out.needs_grad) {
    out.grad = Tensor::scalar(1.0);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.op == OpKind::parameter) {
        grads[n.name].mat() += n.grad.mat();
      } else {
        backprop(n);
      }
    }
  }
  return grads;
}

}  // namespace scenepred::nn
