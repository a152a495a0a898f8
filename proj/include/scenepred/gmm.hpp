#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

namespace scenepred::gmm {

// Lower bound on per-dimension standard deviation for heads decoded from network outputs.
inline constexpr double kHeadMinStd = 1e-3;
// Degeneracy guard for explicitly constructed mixtures (e.g. a zero covariance).
inline constexpr double kMinStd = 1e-4;
inline constexpr double kMaxCorrelation = 0.999;

enum class Axis { location = 0, time = 1 };

using Point = std::array<double, 2>;  // (y_s [m], y_t [s])

struct Component2D {
  double weight = 1.0;
  Point mean{0.0, 0.0};
  Point stddev{1.0, 1.0};
  double correlation = 0.0;

  std::array<double, 4> covariance() const;  // row-major 2x2
};

struct Component1D {
  double weight = 1.0;
  double mean = 0.0;
  double stddev = 1.0;
};

// One-dimensional Gaussian mixture (a marginal of Gmm2D).
class Gmm1D {
 public:
  explicit Gmm1D(std::vector<Component1D> components);

  const std::vector<Component1D>& components() const { return components_; }
  double density(double x) const;
  double log_density(double x) const;
  double cdf(double x) const;
  double mean() const;
  double sample(std::mt19937_64& rng) const;
  // Largest density value, located by a dense scan around the component means.
  double peak_density() const;
  // Inverse CDF by bisection.
  double quantile(double p) const;

 private:
  std::vector<Component1D> components_;
};

// Mixture of bivariate normals over (location, time).
class Gmm2D {
 public:
  // Validates: weights sum to 1 within 1e-9, std > 0, |correlation| < 1.
  explicit Gmm2D(std::vector<Component2D> components);

  // Builds from explicit covariance matrices, flooring the standard deviations at kMinStd and
  // clamping the correlation into (-kMaxCorrelation, kMaxCorrelation). Weights are renormalized.
  static Gmm2D from_moments(std::span<const double> weights, std::span<const Point> means,
                            std::span<const std::array<double, 4>> covariances);

  // Maps an unconstrained head [logits | mean_s | mean_t | log_std_s | log_std_t | corr_pre]
  // (each block `components` wide) to a valid mixture.
  static Gmm2D from_raw(std::span<const double> raw, std::size_t components, double min_std = kHeadMinStd);

  const std::vector<Component2D>& components() const { return components_; }
  std::size_t size() const { return components_.size(); }

  double density(const Point& y) const;
  double log_density(const Point& y) const;
  Point sample(std::mt19937_64& rng) const;
  Point mean() const;
  Gmm1D marginal(Axis axis) const;
  // Applies y -> scale * y + shift per axis (used to map normalized heads to physical units).
  Gmm2D affine(const Point& scale, const Point& shift) const;

 private:
  std::vector<Component2D> components_;
};

}  // namespace scenepred::gmm
