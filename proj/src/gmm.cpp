#include "scenepred/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace scenepred::gmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

double component_log_density(const Component2D& c, const Point& y) {
  const double rho = c.correlation;
  const double one_m = 1.0 - rho * rho;
  const double u = (y[0] - c.mean[0]) / c.stddev[0];
  const double v = (y[1] - c.mean[1]) / c.stddev[1];
  const double q = u * u - 2.0 * rho * u * v + v * v;
  return -kLog2Pi - std::log(c.stddev[0]) - std::log(c.stddev[1]) - 0.5 * std::log(one_m) - 0.5 * q / one_m;
}

template <typename C>
std::size_t pick_component(const std::vector<C>& comps, std::mt19937_64& rng) {
  if (comps.size() == 1) return 0;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double u = u01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < comps.size(); ++i) {
    acc += comps[i].weight;
    if (u < acc) return i;
  }
  return comps.size() - 1;
}

}  // namespace

std::array<double, 4> Component2D::covariance() const {
  const double off = correlation * stddev[0] * stddev[1];
  return {stddev[0] * stddev[0], off, off, stddev[1] * stddev[1]};
}

Gmm1D::Gmm1D(std::vector<Component1D> components) : components_(std::move(components)) {
  if (components_.empty()) throw std::invalid_argument("Gmm1D: no components");
  double total = 0.0;
  for (const auto& c : components_) {
    if (!(c.stddev > 0.0) || !(c.weight >= 0.0)) throw std::invalid_argument("Gmm1D: invalid component");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("Gmm1D: weights sum to " + std::to_string(total));
}

double Gmm1D::log_density(double x) const {
  std::vector<double> terms;
  terms.reserve(components_.size());
  for (const auto& c : components_) {
    const double z = (x - c.mean) / c.stddev;
    terms.push_back(std::log(c.weight) - 0.5 * std::log(2.0 * std::numbers::pi) - std::log(c.stddev) - 0.5 * z * z);
  }
  return log_sum_exp(terms);
}

double Gmm1D::density(double x) const {
  double acc = 0.0;
  for (const auto& c : components_) {
    const double z = (x - c.mean) / c.stddev;
    acc += c.weight * std::exp(-0.5 * z * z) / (std::sqrt(2.0 * std::numbers::pi) * c.stddev);
  }
  return acc;
}

double Gmm1D::cdf(double x) const {
  double acc = 0.0;
  for (const auto& c : components_) acc += c.weight * 0.5 * std::erfc(-(x - c.mean) / (c.stddev * std::numbers::sqrt2));
  return acc;
}

double Gmm1D::mean() const {
  double acc = 0.0;
  for (const auto& c : components_) acc += c.weight * c.mean;
  return acc;
}

double Gmm1D::sample(std::mt19937_64& rng) const {
  const auto& c = components_[pick_component(components_, rng)];
  std::normal_distribution<double> n01(0.0, 1.0);
  return c.mean + c.stddev * n01(rng);
}

double Gmm1D::peak_density() const {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double best_x = components_.front().mean;
  double best = 0.0;
  for (const auto& c : components_) {
    lo = std::min(lo, c.mean - 5.0 * c.stddev);
    hi = std::max(hi, c.mean + 5.0 * c.stddev);
    const double d = density(c.mean);
    if (d > best) best = d, best_x = c.mean;
  }
  constexpr int kGrid = 4000;
  const double step = (hi - lo) / kGrid;
  for (int i = 0; i <= kGrid; ++i) {
    const double x = lo + step * i;
    const double d = density(x);
    if (d > best) best = d, best_x = x;
  }
  // Golden-section refinement around the best grid point.
  double a = best_x - step, b = best_x + step;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 60; ++it) {
    const double x1 = b - phi * (b - a);
    const double x2 = a + phi * (b - a);
    if (density(x1) < density(x2)) a = x1; else b = x2;
  }
  return std::max(best, density(0.5 * (a + b)));
}

double Gmm1D::quantile(double p) const {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile: p must be in (0, 1)");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& c : components_) {
    lo = std::min(lo, c.mean - 12.0 * c.stddev);
    hi = std::max(hi, c.mean + 12.0 * c.stddev);
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (cdf(mid) < p) lo = mid; else hi = mid;
  }
  return 0.5 * (lo + hi);
}

Gmm2D::Gmm2D(std::vector<Component2D> components) : components_(std::move(components)) {
  if (components_.empty()) throw std::invalid_argument("Gmm2D: no components");
  double total = 0.0;
  for (std::size_t i = 0; i < components_.size(); ++i) {
    const auto& c = components_[i];
    const bool ok = c.weight >= 0.0 && c.stddev[0] > 0.0 && c.stddev[1] > 0.0 && std::abs(c.correlation) < 1.0 &&
                    std::isfinite(c.mean[0]) && std::isfinite(c.mean[1]) && std::isfinite(c.stddev[0]) &&
                    std::isfinite(c.stddev[1]);
    if (!ok) throw std::invalid_argument("Gmm2D: component " + std::to_string(i) + " is not a valid Gaussian");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("Gmm2D: weights sum to " + std::to_string(total));
}

Gmm2D Gmm2D::from_moments(std::span<const double> weights, std::span<const Point> means,
                          std::span<const std::array<double, 4>> covariances) {
  if (weights.size() != means.size() || weights.size() != covariances.size() || weights.empty()) {
    throw std::invalid_argument("Gmm2D::from_moments: mismatched component arrays");
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("Gmm2D::from_moments: weights must have positive sum");
  std::vector<Component2D> comps;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& s = covariances[i];
    Component2D c;
    c.weight = weights[i] / total;
    c.mean = means[i];
    c.stddev = {std::max(std::sqrt(std::max(s[0], 0.0)), kMinStd), std::max(std::sqrt(std::max(s[3], 0.0)), kMinStd)};
    const double off = 0.5 * (s[1] + s[2]);
    c.correlation = std::clamp(off / (c.stddev[0] * c.stddev[1]), -kMaxCorrelation, kMaxCorrelation);
    comps.push_back(c);
  }
  return Gmm2D(std::move(comps));
}

Gmm2D Gmm2D::from_raw(std::span<const double> raw, std::size_t components, double min_std) {
  const std::size_t M = components;
  if (M == 0 || raw.size() != 6 * M) throw std::invalid_argument("Gmm2D::from_raw: expected 6*M values");
  const double mx = *std::max_element(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(M));
  double z = 0.0;
  for (std::size_t m = 0; m < M; ++m) z += std::exp(raw[m] - mx);
  std::vector<Component2D> comps(M);
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    auto& c = comps[m];
    c.weight = std::exp(raw[m] - mx) / z;
    total += c.weight;
    c.mean = {raw[M + m], raw[2 * M + m]};
    c.stddev = {min_std + std::exp(raw[3 * M + m]), min_std + std::exp(raw[4 * M + m])};
    c.correlation = kMaxCorrelation * std::tanh(raw[5 * M + m]);
  }
  for (auto& c : comps) c.weight /= total;
  return Gmm2D(std::move(comps));
}

double Gmm2D::log_density(const Point& y) const {
  std::vector<double> terms;
  terms.reserve(components_.size());
  for (const auto& c : components_) terms.push_back(std::log(c.weight) + component_log_density(c, y));
  return log_sum_exp(terms);
}

double Gmm2D::density(const Point& y) const {
  double acc = 0.0;
  for (const auto& c : components_) acc += c.weight * std::exp(component_log_density(c, y));
  return acc;
}

Point Gmm2D::sample(std::mt19937_64& rng) const {
  const auto& c = components_[pick_component(components_, rng)];
  std::normal_distribution<double> n01(0.0, 1.0);
  const double e1 = n01(rng);
  const double e2 = n01(rng);
  const double rho = c.correlation;
  return {c.mean[0] + c.stddev[0] * e1,
          c.mean[1] + c.stddev[1] * (rho * e1 + std::sqrt(1.0 - rho * rho) * e2)};
}

Point Gmm2D::mean() const {
  Point m{0.0, 0.0};
  for (const auto& c : components_) {
    m[0] += c.weight * c.mean[0];
    m[1] += c.weight * c.mean[1];
  }
  return m;
}

Gmm1D Gmm2D::marginal(Axis axis) const {
  const auto k = static_cast<std::size_t>(axis);
  std::vector<Component1D> out;
  out.reserve(components_.size());
  for (const auto& c : components_) out.push_back({c.weight, c.mean[k], c.stddev[k]});
  return Gmm1D(std::move(out));
}

Gmm2D Gmm2D::affine(const Point& scale, const Point& shift) const {
  std::vector<Component2D> out = components_;
  for (auto& c : out) {
    for (std::size_t k = 0; k < 2; ++k) {
      c.mean[k] = scale[k] * c.mean[k] + shift[k];
      c.stddev[k] = std::abs(scale[k]) * c.stddev[k];
    }
    if (scale[0] * scale[1] < 0.0) c.correlation = -c.correlation;
  }
  return Gmm2D(std::move(out));
}

}  // namespace scenepred::gmm
