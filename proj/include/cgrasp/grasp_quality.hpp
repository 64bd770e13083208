#pragma once

// Force-closure quality (Q1), diversity statistics, and the static
// stability proxy.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "cgrasp/error.hpp"
#include "cgrasp/geometry.hpp"
#include "cgrasp/hand_model.hpp"

namespace cgrasp {

using Wrench = Eigen::Matrix<double, 6, 1>;

struct WrenchSet {
  std::vector<Wrench> wrenches;
  double mu = 0.5;
  std::size_t pyramid_edges = 8;
};

struct FrictionModel {
  double mu = 0.5;
  std::size_t pyramid_edges = 8;
  /// Torque scale in 1/m; <= 0 selects 1 / (object bounding-sphere radius).
  double torque_scale = 0.0;
};

/// Outward normals approximated by the direction from the cloud centroid to
/// each point. Only valid for star-shaped objects.
inline std::vector<Vec3> centroid_normals(const PointCloud& cloud) {
  const Vec3 c = cloud.centroid();
  std::vector<Vec3> out;
  out.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    const Vec3 d = p - c;
    out.push_back(d.norm() > 0.0 ? Vec3(d.normalized()) : Vec3(Vec3::UnitZ()));
  }
  return out;
}

/// Friction-pyramid edge forces around the inward normal at each contact,
/// with torques lambda * (p - centroid) x f.
inline WrenchSet build_wrench_set(const ContactSet& contacts, const PointCloud& object, const FrictionModel& fm) {
  if (!object.has_normals()) throw Error(ErrorKind::NormalsRequired, "object cloud has no normals");
  if (fm.mu < 0.0) throw Error(ErrorKind::InvalidArgument, "friction coefficient must be >= 0");
  if (fm.pyramid_edges < 3) throw Error(ErrorKind::InvalidArgument, "friction pyramid needs >= 3 edges");
  constexpr double kPi = 3.14159265358979323846;
  const Vec3 c = object.centroid();
  const double lambda = fm.torque_scale > 0.0 ? fm.torque_scale : 1.0 / object.bounding_radius(c);
  const KdTree tree(object.points);

  WrenchSet ws{{}, fm.mu, fm.pyramid_edges};
  for (const auto& rec : contacts) {
    const Vec3 n = -object.normals[tree.nearest(rec.position).index];
    const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 t1 = n.cross(helper).normalized();
    const Vec3 t2 = n.cross(t1);
    const Vec3 arm = rec.position - c;
    auto push = [&](const Vec3& f) {
      Wrench w;
      w.head<3>() = f;
      w.tail<3>() = lambda * arm.cross(f);
      ws.wrenches.push_back(w);
    };
    if (fm.mu == 0.0) {
      push(n);
      continue;
    }
    for (std::size_t j = 0; j < fm.pyramid_edges; ++j) {
      const double th = 2.0 * kPi * static_cast<double>(j) / static_cast<double>(fm.pyramid_edges);
      push((n + fm.mu * (std::cos(th) * t1 + std::sin(th) * t2)).normalized());
    }
  }
  return ws;
}

/// Quasi-uniform unit directions in R^6: Halton points in the unit 6-cube
/// mapped through Box-Muller pairs and normalized.
inline std::vector<Wrench> sphere6_directions(std::size_t n) {
  constexpr double kPi = 3.14159265358979323846;
  constexpr int kPrimes[6] = {2, 3, 5, 7, 11, 13};
  std::vector<Wrench> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double h[6];
    for (int d = 0; d < 6; ++d) {
      double f = 1.0, r = 0.0;
      for (std::size_t k = i + 1; k > 0; k /= static_cast<std::size_t>(kPrimes[d])) {
        f /= kPrimes[d];
        r += f * static_cast<double>(k % static_cast<std::size_t>(kPrimes[d]));
      }
      h[d] = r;
    }
    Wrench z;
    for (int p = 0; p < 3; ++p) {
      const double rad = std::sqrt(-2.0 * std::log(h[2 * p]));
      z[2 * p] = rad * std::cos(2.0 * kPi * h[2 * p + 1]);
      z[2 * p + 1] = rad * std::sin(2.0 * kPi * h[2 * p + 1]);
    }
    out.push_back(z.normalized());
  }
  return out;
}

enum class Q1Status { Ok, EmptyWrenchSet };

struct Q1Result {
  double value = 0.0;
  Q1Status status = Q1Status::Ok;
};

struct Q1Options {
  std::size_t n_directions = 4096;
  /// Best sampled directions polished by local descent.
  std::size_t refine_seeds = 8;
};

namespace detail {

inline double support(const std::vector<Wrench>& ws, const Wrench& u) {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& w : ws) m = std::max(m, u.dot(w));
  return m;
}

// Riemannian gradient descent on a log-sum-exp smoothing of the support
// function, annealing the sharpness. Returns the best exact support seen.
inline double refine_direction(const std::vector<Wrench>& ws, Wrench u) {
  double best = support(ws, u);
  std::vector<double> s(ws.size());
  for (double beta = 30.0; beta <= 1e6; beta *= 3.0) {
    const double step = std::min(0.5, 10.0 / beta);
    for (int it = 0; it < 300; ++it) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < ws.size(); ++i) m = std::max(m, s[i] = u.dot(ws[i]));
      Wrench g = Wrench::Zero();
      double z = 0.0;
      for (std::size_t i = 0; i < ws.size(); ++i) {
        const double e = std::exp(beta * (s[i] - m));
        z += e;
        g += e * ws[i];
      }
      g /= z;
      g -= g.dot(u) * u;
      u = (u - step * g).normalized();
      best = std::min(best, support(ws, u));
    }
  }
  return best;
}

}  // namespace detail

/// Radius of the largest origin-centred ball inside the convex hull of the
/// wrenches, approximated as min over unit directions u of max_w u.w.
/// Sampled directions seed a local refinement; the returned value is an
/// upper bound on the exact radius. Zero when some sampled direction has a
/// non-positive support value (origin not strictly inside).
inline Q1Result q1_metric(const WrenchSet& ws, const Q1Options& opts = {}) {
  if (ws.wrenches.empty()) return {0.0, Q1Status::EmptyWrenchSet};
  if (opts.n_directions < 100) throw Error(ErrorKind::InvalidArgument, "q1 needs >= 100 directions");
  const auto dirs = sphere6_directions(opts.n_directions);
  std::vector<std::pair<double, std::size_t>> supports;
  supports.reserve(dirs.size());
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const double s = detail::support(ws.wrenches, dirs[i]);
    if (s <= 0.0) return {0.0, Q1Status::Ok};
    supports.emplace_back(s, i);
  }
  const std::size_t k = std::min(opts.refine_seeds, supports.size());
  std::partial_sort(supports.begin(), supports.begin() + static_cast<std::ptrdiff_t>(k), supports.end());
  double best = supports.front().first;
  for (std::size_t i = 0; i < k; ++i)
    best = std::min(best, detail::refine_direction(ws.wrenches, dirs[supports[i].second]));
  return {std::max(best, 0.0), Q1Status::Ok};
}

// ---- diversity -----------------------------------------------------------------

struct DiversityStats {
  double delta_t = 0.0;  ///< cm
  double delta_r = 0.0;  ///< degrees
  double delta_q = 0.0;  ///< degrees
};

/// Per-dimension population standard deviation, averaged within the
/// translation, rotation, and joint groups.
inline DiversityStats diversity(std::span<const GraspPose> grasps) {
  if (grasps.size() < 2) throw Error(ErrorKind::InsufficientSamples, "diversity needs at least 2 grasps");
  const std::size_t dim = grasps.front().dim();
  for (const auto& g : grasps)
    if (g.dim() != dim) throw Error(ErrorKind::InvalidPose, "grasps differ in dimension");
  const double n = static_cast<double>(grasps.size());
  std::vector<double> stds(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    double mean = 0.0;
    for (const auto& g : grasps) mean += g.to_vector()[d];
    mean /= n;
    double var = 0.0;
    for (const auto& g : grasps) {
      const double x = g.to_vector()[d] - mean;
      var += x * x;
    }
    stds[d] = std::sqrt(var / n);
  }
  auto group_mean = [&](std::size_t lo, std::size_t hi) {
    if (hi <= lo) return 0.0;
    return std::accumulate(stds.begin() + static_cast<std::ptrdiff_t>(lo),
                           stds.begin() + static_cast<std::ptrdiff_t>(hi), 0.0) /
           static_cast<double>(hi - lo);
  };
  constexpr double kDeg = 180.0 / 3.14159265358979323846;
  return {group_mean(0, 3) * 100.0, group_mean(3, 6) * kDeg, group_mean(6, dim) * kDeg};
}

// ---- stability proxy --------------------------------------------------------------

struct StabilityThresholds {
  double q1_min = 0.0;
  double pen_max = 0.005;
};

/// Static stand-in for simulated success; reports label it "proxy".
inline bool stability_proxy(double q1, double pen, const StabilityThresholds& t = {}) {
  if (t.q1_min < 0.0 || t.pen_max < 0.0) throw Error(ErrorKind::InvalidArgument, "thresholds must be >= 0");
  return q1 > t.q1_min && pen < t.pen_max;
}

}  // namespace cgrasp
