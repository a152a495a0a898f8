#include "scenepred/datagen.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace scenepred::datagen {

namespace {

using Mat5 = Eigen::Matrix<double, 5, 5>;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat25 = Eigen::Matrix<double, 2, 5>;

// State order (x, y, vx, vy, ax).
enum : int { X = 0, Y = 1, VX = 2, VY = 3, AX = 4 };

}  // namespace

SmootherOutput smooth_track(std::span<const TrackSample> track, const SmootherConfig& config) {
  if (track.size() < 3) throw std::invalid_argument("smooth_track: need at least 3 samples, got " + std::to_string(track.size()));
  if (!(config.jerk_noise > 0.0 && config.lateral_accel_noise > 0.0 && config.measurement_noise_x > 0.0 &&
        config.measurement_noise_y > 0.0))
    throw std::invalid_argument("smooth_track: noise scales must be positive");
  const double dt = track[1].t - track[0].t;
  if (!(dt > 0.0)) throw std::invalid_argument("smooth_track: timestamps must increase");
  for (std::size_t k = 1; k < track.size(); ++k) {
    const double step = track[k].t - track[k - 1].t;
    if (std::abs(step - dt) > 1e-6 * std::max(1.0, dt))
      throw std::invalid_argument("smooth_track: non-uniform timestamps at sample " + std::to_string(k));
  }

  Mat5 F = Mat5::Identity();
  F(X, VX) = dt;
  F(X, AX) = 0.5 * dt * dt;
  F(VX, AX) = dt;
  F(Y, VY) = dt;

  const double d2 = dt * dt, d3 = d2 * dt, d4 = d3 * dt, d5 = d4 * dt;
  Mat5 Q = Mat5::Zero();
  const double qj = config.jerk_noise, qa = config.lateral_accel_noise;
  Q(X, X) = qj * d5 / 20.0;
  Q(X, VX) = Q(VX, X) = qj * d4 / 8.0;
  Q(X, AX) = Q(AX, X) = qj * d3 / 6.0;
  Q(VX, VX) = qj * d3 / 3.0;
  Q(VX, AX) = Q(AX, VX) = qj * d2 / 2.0;
  Q(AX, AX) = qj * dt;
  Q(Y, Y) = qa * d3 / 3.0;
  Q(Y, VY) = Q(VY, Y) = qa * d2 / 2.0;
  Q(VY, VY) = qa * dt;

  Mat25 H = Mat25::Zero();
  H(0, X) = 1.0;
  H(1, Y) = 1.0;
  Eigen::Matrix2d R = Eigen::Matrix2d::Zero();
  R(0, 0) = config.measurement_noise_x * config.measurement_noise_x;
  R(1, 1) = config.measurement_noise_y * config.measurement_noise_y;

  // Exact three-point initialization at sample 2; the covariance propagates measurement noise
  // through the difference formulas.
  const auto& z0 = track[0];
  const auto& z1 = track[1];
  const auto& z2 = track[2];
  Vec5 s;
  s(AX) = (z2.x - 2.0 * z1.x + z0.x) / d2;
  s(X) = z2.x;
  s(VX) = (z2.x - z1.x) / dt + 0.5 * s(AX) * dt;
  s(Y) = z2.y;
  s(VY) = (z2.y - z1.y) / dt;
  Mat5 P = Mat5::Zero();
  {
    const double rx = R(0, 0), ry = R(1, 1);
    // Rows express (x, vx, ax) as combinations of (z0, z1, z2).
    Eigen::Matrix3d J;
    J << 0.0, 0.0, 1.0,
         0.5 / dt, -2.0 / dt, 1.5 / dt,
         1.0 / d2, -2.0 / d2, 1.0 / d2;
    const Eigen::Matrix3d Px = rx * J * J.transpose();
    const int idx[3] = {X, VX, AX};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) P(idx[a], idx[b]) = Px(a, b);
    P(Y, Y) = ry;
    P(Y, VY) = P(VY, Y) = ry / dt;
    P(VY, VY) = 2.0 * ry / d2;
  }

  SmootherOutput out;
  out.states.reserve(track.size());
  auto emit = [&](double t, const Vec5& v) { out.states.push_back({t, v(X), v(Y), v(VX), v(VY), v(AX)}); };
  // Samples before the initialization point report the back-propagated initial state.
  for (int k = 0; k < 2; ++k) {
    const double back = (2 - k) * dt;
    Vec5 b = s;
    b(X) = s(X) - s(VX) * back + 0.5 * s(AX) * back * back;
    b(VX) = s(VX) - s(AX) * back;
    b(Y) = s(Y) - s(VY) * back;
    emit(track[static_cast<std::size_t>(k)].t, b);
  }
  emit(z2.t, s);

  for (std::size_t k = 3; k < track.size(); ++k) {
    s = F * s;
    P = F * P * F.transpose() + Q;
    const Eigen::Vector2d z(track[k].x, track[k].y);
    const Eigen::Vector2d innov = z - H * s;
    const Eigen::Matrix2d S = H * P * H.transpose() + R;
    const Eigen::LLT<Eigen::Matrix2d> llt(S);
    const Eigen::Matrix<double, 5, 2> K = P * H.transpose() * llt.solve(Eigen::Matrix2d::Identity());
    s += K * innov;
    // Joseph form keeps P symmetric positive-definite.
    const Mat5 IKH = Mat5::Identity() - K * H;
    P = IKH * P * IKH.transpose() + K * R * K.transpose();
    const Eigen::Vector2d w = llt.matrixL().solve(innov);
    out.normalized_innovations.push_back({w(0), w(1)});
    emit(track[k].t, s);
  }
  return out;
}

}  // namespace scenepred::datagen
