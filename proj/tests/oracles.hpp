#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance run. Each one avoids the data structure or shortcut that the
// library version relies on.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "cgrasp/geometry.hpp"
#include "cgrasp/grasp_quality.hpp"
#include "cgrasp/hand_model.hpp"
#include "cgrasp/synthetic_data.hpp"

namespace oracles {

using namespace cgrasp;

using Mat4 = Eigen::Matrix4d;

// Rodrigues rotation written out by hand, independent of Eigen::AngleAxis.
inline Mat4 rotation4(const Vec3& axis, double q) {
  const double c = std::cos(q), s = std::sin(q), t = 1.0 - c;
  const double x = axis.x(), y = axis.y(), z = axis.z();
  Mat4 m = Mat4::Identity();
  m(0, 0) = t * x * x + c, m(0, 1) = t * x * y - s * z, m(0, 2) = t * x * z + s * y;
  m(1, 0) = t * x * y + s * z, m(1, 1) = t * y * y + c, m(1, 2) = t * y * z - s * x;
  m(2, 0) = t * x * z - s * y, m(2, 1) = t * y * z + s * x, m(2, 2) = t * z * z + c;
  return m;
}

inline Mat4 translation4(const Vec3& v) {
  Mat4 m = Mat4::Identity();
  m.block<3, 1>(0, 3) = v;
  return m;
}

// Homogeneous-matrix FK: world = parent * T(offset) * R(joint_1) * ... * R(joint_k).
inline std::vector<Mat4> oracle_fk(const HandModel& hand, const GraspPose& pose) {
  std::vector<Mat4> out(hand.num_links());
  out[0] = translation4(pose.translation) * rotation4(Vec3::UnitX(), pose.rotation.x()) *
           rotation4(Vec3::UnitY(), pose.rotation.y()) * rotation4(Vec3::UnitZ(), pose.rotation.z());
  for (std::size_t i = 1; i < hand.num_links(); ++i) {
    Mat4 m = out[static_cast<std::size_t>(hand.links()[i].parent)] * translation4(hand.links()[i].origin_offset);
    for (std::size_t j = 0; j < hand.dof(); ++j) {
      const auto& js = hand.joints()[j];
      if (js.child_link != i) continue;
      m = m * rotation4(js.axis, std::clamp(pose.joint_angles[j], js.lo, js.hi));
    }
    out[i] = m;
  }
  return out;
}

inline double oracle_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  auto one_way = [](const std::vector<Vec3>& x, const std::vector<Vec3>& y) {
    double s = 0.0;
    for (const auto& p : x) {
      double m = std::numeric_limits<double>::infinity();
      for (const auto& q : y) m = std::min(m, (p - q).norm());
      s += m;
    }
    return s / static_cast<double>(x.size());
  };
  return one_way(a, b) + one_way(b, a);
}

// Every (point, link) pair examined; per link the lowest signed distance
// wins, ties to the lowest point index.
inline std::vector<ContactRecord> oracle_contacts(const HandModel& hand, const GraspPose& pose, const PointCloud& obj,
                                           double threshold) {
  const auto poses = forward_kinematics(hand, pose);
  std::vector<ContactRecord> out;
  for (std::size_t l : hand.canonical_order()) {
    const auto [a, b] = world_capsule(hand, poses, l);
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < obj.size(); ++i) {
      const double sd = capsule_signed_distance(obj.points[i], a, b, hand.links()[l].capsule.radius);
      if (sd < best) best = sd, arg = i;
    }
    if (best <= threshold) out.push_back({l, obj.points[arg], best});
  }
  return out;
}

inline double oracle_penetration(const HandModel& hand, const GraspPose& pose, const PointCloud& obj) {
  const auto poses = forward_kinematics(hand, pose);
  double depth = 0.0;
  for (const auto& p : obj.points) {
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < hand.num_links(); ++l) {
      const auto [a, b] = world_capsule(hand, poses, l);
      nearest = std::min(nearest, capsule_signed_distance(p, a, b, hand.links()[l].capsule.radius));
    }
    depth = std::max(depth, -nearest);
  }
  return depth;
}

struct OracleCase {
  PointCloud object;
  GraspPose pose;
};

inline std::vector<OracleCase> oracle_cases(std::size_t n) {
  const HandModel hand = default_hand();
  std::vector<OracleCase> out;
  Rng rng(77);
  for (std::size_t i = 0; out.size() < n; ++i) {
    const ObjectSpec spec = sample_object(i % 5, 512, rng);
    const PointCloud obj = generate_object(spec, 1000 + i);
    const auto fam = kAllFamilies[i % kAllFamilies.size()];
    try {
      out.push_back({obj, oracle_grasp(hand, obj, fam, 2000 + i).pose});
    } catch (const Error&) {
    }
  }
  return out;
}

constexpr double kPi = 3.14159265358979323846;

/// Sphere of radius r with exact outward normals.
inline PointCloud sphere_cloud(double r, std::size_t n, Rng& rng) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 d(normal(rng), normal(rng), normal(rng));
    d.normalize();
    c.points.push_back(r * d);
    c.normals.push_back(d);
  }
  return c;
}

inline ContactSet contacts_at(const HandModel& hand, const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  std::vector<ContactRecord> recs;
  for (std::size_t i = 0; i < idx.size(); ++i) recs.push_back({i, cloud.points[idx[i]], 0.0});
  return ContactSet(hand, std::move(recs));
}

// Exact Q1 by facet enumeration: every 6-subset spanning a hyperplane that
// supports the whole set is a facet; Q1 is the smallest outward offset,
// clamped at 0 when the origin is not strictly inside.
inline double exact_q1(const std::vector<Wrench>& ws) {
  const std::size_t n = ws.size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> pick(6);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t start, std::size_t depth) {
    if (depth == 6) {
      Eigen::MatrixXd a(5, 6);
      for (int r = 0; r < 5; ++r) a.row(r) = (ws[pick[static_cast<std::size_t>(r + 1)]] - ws[pick[0]]).transpose();
      const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
      if (svd.singularValues()(4) < 1e-9) return;
      const Wrench u = svd.matrixV().col(5);
      const double b = u.dot(ws[pick[0]]);
      bool below = true, above = true;
      for (const auto& w : ws) {
        below = below && u.dot(w) <= b + 1e-9;
        above = above && u.dot(w) >= b - 1e-9;
      }
      // Offset along the outward normal; negative when the origin is outside.
      if (below) best = std::min(best, b);
      if (above) best = std::min(best, -b);
      return;
    }
    for (std::size_t i = start; i + (6 - depth) <= n; ++i) {
      pick[depth] = i;
      rec(i + 1, depth + 1);
    }
  };
  rec(0, 0);
  return std::isfinite(best) ? std::max(best, 0.0) : 0.0;
}

inline double rel_err(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

struct ThreeContactCase {
  PointCloud cloud;
  WrenchSet ws;
};

// Three contacts spread around the sphere so most sets are in force closure.
inline std::vector<ThreeContactCase> three_contact_cases(std::size_t n, std::uint64_t seed) {
  const HandModel hand = default_hand();
  Rng rng(seed);
  std::vector<ThreeContactCase> out;
  for (std::size_t t = 0; t < n; ++t) {
    ThreeContactCase c;
    c.cloud = sphere_cloud(0.04, 600, rng);
    const Vec3 axis = Vec3(normal(rng), normal(rng), normal(rng)).normalized();
    const Vec3 e1 = axis.cross(std::abs(axis.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY()).normalized();
    const Vec3 e2 = axis.cross(e1);
    std::vector<std::size_t> idx;
    for (int k = 0; k < 3; ++k) {
      const double th = 2.0 * kPi * k / 3.0 + uniform(rng, -0.5, 0.5);
      const Vec3 target = (std::cos(th) * e1 + std::sin(th) * e2 + uniform(rng, -0.4, 0.4) * axis).normalized() * 0.04;
      idx.push_back(KdTree(c.cloud.points).nearest(target).index);
    }
    c.ws = build_wrench_set(contacts_at(hand, c.cloud, idx), c.cloud, {0.5, 8, 0.0});
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace oracles
