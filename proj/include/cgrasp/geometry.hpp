#pragma once

// Point clouds, exact nearest-neighbour search, and the proximity-based
// hand/object metrics: Chamfer distance, contact extraction, penetration
// depth, and contact maps.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cgrasp/error.hpp"
#include "cgrasp/hand_model.hpp"

namespace cgrasp {

struct PointCloud {
  std::vector<Vec3> points;
  /// Empty when the cloud carries no normals.
  std::vector<Vec3> normals;

  std::size_t size() const { return points.size(); }
  bool has_normals() const { return !normals.empty(); }

  /// Throws Error(EmptyInput / InvalidArgument) when the cloud is malformed.
  void validate() const {
    if (points.empty()) throw Error(ErrorKind::EmptyInput, "point cloud is empty");
    for (const auto& p : points)
      if (!p.allFinite()) throw Error(ErrorKind::InvalidArgument, "point cloud has non-finite coordinates");
    if (has_normals()) {
      if (normals.size() != points.size())
        throw Error(ErrorKind::InvalidArgument, "normal count differs from point count");
      for (const auto& n : normals)
        if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-6)
          throw Error(ErrorKind::InvalidArgument, "normals must be unit length");
    }
  }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return c / static_cast<double>(points.size());
  }

  double bounding_radius(const Vec3& center) const {
    double r = 0.0;
    for (const auto& p : points) r = std::max(r, (p - center).norm());
    return r;
  }
};

// ---- xyz files ---------------------------------------------------------------
//
// One point per line: "x y z" in meters, optionally followed by "nx ny nz".
// Blank lines and lines starting with '#' are ignored.

inline PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open point cloud " + path);
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<double> vals;
    std::string tok;
    while (ss >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0' || !std::isfinite(v))
        throw Error(ErrorKind::Format, path + ":" + std::to_string(lineno) + ": bad or non-finite value '" + tok + "'");
      vals.push_back(v);
    }
    if (vals.empty()) continue;
    if (vals.size() != 3 && vals.size() != 6)
      throw Error(ErrorKind::Format, path + ":" + std::to_string(lineno) + ": expected 3 or 6 columns");
    if (!cloud.points.empty() && (vals.size() == 6) != cloud.has_normals())
      throw Error(ErrorKind::Format, path + ":" + std::to_string(lineno) + ": inconsistent column count");
    cloud.points.emplace_back(vals[0], vals[1], vals[2]);
    if (vals.size() == 6) cloud.normals.emplace_back(vals[3], vals[4], vals[5]);
  }
  cloud.validate();
  return cloud;
}

/// Points are written with 17 significant digits so that reload is exact.
inline void save_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Format, "cannot write " + path);
  char buf[256];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    int n = std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g", p.x(), p.y(), p.z());
    out.write(buf, n);
    if (cloud.has_normals()) {
      const auto& q = cloud.normals[i];
      n = std::snprintf(buf, sizeof buf, " %.17g %.17g %.17g", q.x(), q.y(), q.z());
      out.write(buf, n);
    }
    out.put('\n');
  }
}

// ---- k-d tree ----------------------------------------------------------------

struct Neighbor {
  std::size_t index = 0;
  double distance = std::numeric_limits<double>::infinity();
};

/// Exact nearest-neighbour index over a fixed point set. Equal distances
/// resolve to the lowest point index, matching a linear scan.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 8)
      : points_(points.begin(), points.end()), leaf_size_(std::max<std::size_t>(1, leaf_size)) {
    if (points_.empty()) throw Error(ErrorKind::EmptyInput, "k-d tree over an empty point set");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * points_.size() / leaf_size_ + 2);
    build(0, order_.size());
  }

  std::size_t size() const { return points_.size(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }

  Neighbor nearest(const Vec3& q) const {
    Neighbor best;
    double best2 = std::numeric_limits<double>::infinity();
    search(0, q, best, best2);
    best.distance = std::sqrt(best2);
    return best;
  }

  /// Indices of all points with |p - center| <= radius, ascending.
  std::vector<std::size_t> within(const Vec3& center, double radius) const {
    std::vector<std::size_t> out;
    collect(0, center, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
    Vec3 lo = Vec3::Zero(), hi = Vec3::Zero();  // bounding box of the node's points
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({});
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    Node node;
    node.begin = begin;
    node.end = end;
    node.lo = lo;
    node.hi = hi;
    if (end - begin > leaf_size_) {
      int axis = 0;
      (hi - lo).maxCoeff(&axis);
      const std::size_t mid = begin + (end - begin) / 2;
      std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                       order_.begin() + static_cast<std::ptrdiff_t>(mid),
                       order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                         return points_[a][axis] < points_[b][axis];
                       });
      node.axis = axis;
      node.split = points_[order_[mid]][axis];
      node.left = build(begin, mid);
      node.right = build(mid, end);
    }
    nodes_[id] = node;
    return id;
  }

  static double box_distance2(const Node& n, const Vec3& q) {
    const Vec3 d = (n.lo - q).cwiseMax(q - n.hi).cwiseMax(0.0);
    return d.squaredNorm();
  }

  void search(std::size_t id, const Vec3& q, Neighbor& best, double& best2) const {
    const Node& n = nodes_[id];
    if (box_distance2(n, q) > best2) return;
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (d2 < best2 || (d2 == best2 && idx < best.index)) {
          best2 = d2;
          best.index = idx;
        }
      }
      return;
    }
    const bool go_left = q[n.axis] < n.split;
    search(go_left ? n.left : n.right, q, best, best2);
    search(go_left ? n.right : n.left, q, best, best2);
  }

  void collect(std::size_t id, const Vec3& c, double r2, std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    if (box_distance2(n, c) > r2) return;
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i)
        if ((points_[order_[i]] - c).squaredNorm() <= r2) out.push_back(order_[i]);
      return;
    }
    collect(n.left, c, r2, out);
    collect(n.right, c, r2, out);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::size_t leaf_size_;
};

// ---- Chamfer distance -----------------------------------------------------------

/// Mean nearest-neighbour distance from a to b plus mean from b to a, in the
/// input units (meters). Reports multiply by 1000 for millimeters.
inline double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw Error(ErrorKind::EmptyInput, "chamfer distance of an empty set");
  const KdTree ta(a), tb(b);
  double sab = 0.0, sba = 0.0;
  for (const auto& p : a) sab += tb.nearest(p).distance;
  for (const auto& p : b) sba += ta.nearest(p).distance;
  return sab / static_cast<double>(a.size()) + sba / static_cast<double>(b.size());
}

// ---- contacts --------------------------------------------------------------------

struct ContactRecord {
  std::size_t link = 0;
  Vec3 position = Vec3::Zero();
  double signed_distance = 0.0;

  bool operator==(const ContactRecord&) const = default;
};

/// Contact records sorted by the hand's canonical link order, at most one per link.
class ContactSet {
 public:
  ContactSet() = default;

  /// Sorts canonically; throws InvalidArgument on duplicate or unknown links.
  ContactSet(const HandModel& model, std::vector<ContactRecord> records) : records_(std::move(records)) {
    for (const auto& r : records_)
      if (r.link >= model.num_links()) throw Error(ErrorKind::UnknownLink, "contact link index out of range");
    std::sort(records_.begin(), records_.end(), [&](const ContactRecord& a, const ContactRecord& b) {
      return model.canonical_rank(a.link) < model.canonical_rank(b.link);
    });
    for (std::size_t i = 1; i < records_.size(); ++i)
      if (records_[i].link == records_[i - 1].link)
        throw Error(ErrorKind::InvalidArgument, "duplicate contact for link " + model.links()[records_[i].link].name);
  }

  const std::vector<ContactRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

  std::vector<std::size_t> links() const {
    std::vector<std::size_t> out;
    for (const auto& r : records_) out.push_back(r.link);
    return out;
  }

  bool operator==(const ContactSet&) const = default;

 private:
  std::vector<ContactRecord> records_;
};

inline constexpr double kDefaultContactThreshold = 0.001;

/// Per link, the object point closest to the link capsule; emitted when its
/// signed distance is within `threshold`. Equal distances keep the lowest
/// point index. Candidate points come from a ball query around each capsule.
inline ContactSet extract_contacts(const HandModel& model, const LinkPoseSet& poses, const KdTree& object,
                                   double threshold = kDefaultContactThreshold) {
  if (!(threshold > 0.0)) throw Error(ErrorKind::InvalidArgument, "contact threshold must be > 0");
  std::vector<ContactRecord> records;
  for (std::size_t l = 0; l < model.num_links(); ++l) {
    const auto [a, b] = world_capsule(model, poses, l);
    const double r = model.links()[l].capsule.radius;
    const Vec3 center = 0.5 * (a + b);
    const double reach = 0.5 * (b - a).norm() + r + threshold;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    for (std::size_t idx : object.within(center, reach)) {
      const double sd = capsule_signed_distance(object.point(idx), a, b, r);
      if (sd < best) {
        best = sd;
        best_idx = idx;
      }
    }
    if (best <= threshold) records.push_back({l, object.point(best_idx), best});
  }
  return ContactSet(model, std::move(records));
}

inline ContactSet extract_contacts(const HandModel& model, const GraspPose& pose, const PointCloud& object,
                                   double threshold = kDefaultContactThreshold) {
  const KdTree tree(object.points);
  return extract_contacts(model, forward_kinematics(model, pose), tree, threshold);
}

/// Deepest object point inside any link capsule, in meters (0 when none).
inline double penetration_depth(const HandModel& model, const LinkPoseSet& poses, const KdTree& object) {
  double depth = 0.0;
  for (std::size_t l = 0; l < model.num_links(); ++l) {
    const auto [a, b] = world_capsule(model, poses, l);
    const double r = model.links()[l].capsule.radius;
    for (std::size_t idx : object.within(0.5 * (a + b), 0.5 * (b - a).norm() + r))
      depth = std::max(depth, -capsule_signed_distance(object.point(idx), a, b, r));
  }
  return depth;
}

inline double penetration_depth(const HandModel& model, const GraspPose& pose, const PointCloud& object) {
  const KdTree tree(object.points);
  return penetration_depth(model, forward_kinematics(model, pose), tree);
}

// ---- contact maps -----------------------------------------------------------------

inline constexpr double kDefaultContactMapTau = 0.005;

/// exp(-d_i / tau) with d_i the distance from object point i to the nearest hand surface sample.
inline std::vector<double> contact_map(const PointCloud& object, std::span<const Vec3> hand_points,
                                       double tau = kDefaultContactMapTau) {
  if (!(tau > 0.0)) throw Error(ErrorKind::InvalidArgument, "contact map tau must be > 0");
  const KdTree hand(hand_points);
  std::vector<double> out;
  out.reserve(object.size());
  for (const auto& p : object.points) out.push_back(std::exp(-hand.nearest(p).distance / tau));
  return out;
}

/// Con. metric: root-mean-square difference between two contact maps.
inline double contact_map_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty())
    throw Error(ErrorKind::InvalidArgument, "contact maps must be nonempty and equally sized");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace cgrasp
