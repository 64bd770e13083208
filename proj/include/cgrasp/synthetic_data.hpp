#pragma once

// Procedural objects, a close-until-contact grasp oracle, templated
// instructions, and the split-tagged JSONL dataset.
//
// Objects are centered at the origin and axis-aligned (z up). The oracle
// places the object at a family-specific location in the palm frame, backs
// the open hand off along the approach direction until it clears the object,
// then closes each active finger until first touch.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/geometry.hpp"
#include "cgrasp/hand_model.hpp"
#include "cgrasp/random.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

// ---- objects ------------------------------------------------------------------------

enum class Shape { Box, Cylinder, Sphere, Capsule };

inline std::string to_string(Shape s) {
  switch (s) {
    case Shape::Box: return "box";
    case Shape::Cylinder: return "cylinder";
    case Shape::Sphere: return "sphere";
    case Shape::Capsule: return "capsule";
  }
  return "?";
}

inline Shape shape_from_string(std::string_view s) {
  if (s == "box") return Shape::Box;
  if (s == "cylinder") return Shape::Cylinder;
  if (s == "sphere") return Shape::Sphere;
  if (s == "capsule") return Shape::Capsule;
  throw Error(ErrorKind::Format, "unknown shape '" + std::string(s) + "'");
}

/// dims: box (x, y, z side lengths); cylinder (diameter, height); sphere
/// (diameter); capsule (diameter, end-to-end length).
struct ObjectSpec {
  Shape shape = Shape::Sphere;
  std::vector<double> dims;
  std::size_t n_points = 512;
  std::uint64_t pose_seed = 0;

  void validate() const {
    const std::size_t want = shape == Shape::Box ? 3 : shape == Shape::Sphere ? 1 : 2;
    if (dims.size() != want)
      throw Error(ErrorKind::InvalidArgument, to_string(shape) + " needs " + std::to_string(want) + " dimensions");
    for (double d : dims)
      if (!(d >= 0.02 && d <= 0.3)) throw Error(ErrorKind::InvalidArgument, "object dimensions must lie in [0.02, 0.3] m");
    if (shape == Shape::Capsule && dims[1] < dims[0])
      throw Error(ErrorKind::InvalidArgument, "capsule length must be >= its diameter");
    if (n_points < 512) throw Error(ErrorKind::InvalidArgument, "objects need at least 512 surface points");
  }
};

namespace detail {

struct Patch {
  double area;
  std::function<std::pair<Vec3, Vec3>(double, double)> map;  // (u, v) in [0,1)^2 -> (point, normal)
};

inline std::vector<Patch> surface_patches(const ObjectSpec& s) {
  constexpr double kPi = 3.14159265358979323846;
  std::vector<Patch> out;
  auto sphere_cap = [&](double r, double z0, double sign) {
    // Hemisphere of radius r centred at (0, 0, z0) bulging toward sign * z.
    out.push_back({2.0 * kPi * r * r, [=](double u, double v) {
                     const double cz = u, sz = std::sqrt(std::max(0.0, 1.0 - cz * cz)), ph = 2.0 * kPi * v;
                     const Vec3 n(sz * std::cos(ph), sz * std::sin(ph), sign * cz);
                     return std::pair<Vec3, Vec3>(Vec3(0, 0, z0) + r * n, n.normalized());
                   }});
  };
  auto tube = [&](double r, double h) {
    out.push_back({2.0 * kPi * r * h, [=](double u, double v) {
                     const double ph = 2.0 * kPi * v;
                     const Vec3 n(std::cos(ph), std::sin(ph), 0.0);
                     return std::pair<Vec3, Vec3>(Vec3(r * n.x(), r * n.y(), (u - 0.5) * h), n);
                   }});
  };
  switch (s.shape) {
    case Shape::Sphere: {
      const double r = 0.5 * s.dims[0];
      out.push_back({4.0 * kPi * r * r, [=](double u, double v) {
                       const double cz = 1.0 - 2.0 * u, sz = std::sqrt(std::max(0.0, 1.0 - cz * cz));
                       const double ph = 2.0 * kPi * v;
                       const Vec3 n = Vec3(sz * std::cos(ph), sz * std::sin(ph), cz).normalized();
                       return std::pair<Vec3, Vec3>(r * n, n);
                     }});
      break;
    }
    case Shape::Cylinder: {
      const double r = 0.5 * s.dims[0], h = s.dims[1];
      tube(r, h);
      for (double sign : {1.0, -1.0})
        out.push_back({kPi * r * r, [=](double u, double v) {
                         const double rho = r * std::sqrt(u), ph = 2.0 * kPi * v;
                         return std::pair<Vec3, Vec3>(Vec3(rho * std::cos(ph), rho * std::sin(ph), sign * 0.5 * h),
                                                      Vec3(0, 0, sign));
                       }});
      break;
    }
    case Shape::Capsule: {
      const double r = 0.5 * s.dims[0], h = s.dims[1] - s.dims[0];
      if (h > 0.0) tube(r, h);
      sphere_cap(r, 0.5 * h, 1.0);
      sphere_cap(r, -0.5 * h, -1.0);
      break;
    }
    case Shape::Box: {
      const Vec3 half(0.5 * s.dims[0], 0.5 * s.dims[1], 0.5 * s.dims[2]);
      for (int axis = 0; axis < 3; ++axis)
        for (double sign : {1.0, -1.0}) {
          const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
          out.push_back({4.0 * half[a1] * half[a2], [=](double u, double v) {
                           Vec3 p, n = Vec3::Zero();
                           p[axis] = sign * half[axis];
                           p[a1] = (2.0 * u - 1.0) * half[a1];
                           p[a2] = (2.0 * v - 1.0) * half[a2];
                           n[axis] = sign;
                           return std::pair<Vec3, Vec3>(p, n);
                         }});
        }
      break;
    }
  }
  return out;
}

}  // namespace detail

/// Quasi-uniform surface samples with analytic unit normals. Each patch gets
/// an area-proportional share (largest remainder) of a randomly shifted
/// Fibonacci lattice; the shift comes from `seed`.
inline PointCloud generate_object(const ObjectSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto patches = detail::surface_patches(spec);
  double total = 0.0;
  for (const auto& p : patches) total += p.area;
  std::vector<std::size_t> count(patches.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const double exact = static_cast<double>(spec.n_points) * patches[i].area / total;
    count[i] = static_cast<std::size_t>(std::floor(exact));
    used += count[i];
    rem.emplace_back(-(exact - std::floor(exact)), i);
  }
  std::sort(rem.begin(), rem.end());
  for (std::size_t i = 0; used < spec.n_points; ++i, ++used) ++count[rem[i % rem.size()].second];

  constexpr double kGolden = 0.6180339887498949;
  Rng rng(derive_seed(seed, 0x0b1));
  PointCloud cloud;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const double su = uniform01(rng), sv = uniform01(rng);
    for (std::size_t j = 0; j < count[i]; ++j) {
      const double u = std::fmod((static_cast<double>(j) + 0.5) / static_cast<double>(count[i]) + su, 1.0);
      const double v = std::fmod(static_cast<double>(j) * kGolden + sv, 1.0);
      auto [p, n] = patches[i].map(u, v);
      cloud.points.push_back(p);
      cloud.normals.push_back(n);
    }
  }
  return cloud;
}

// ---- grasp families --------------------------------------------------------------------

enum class GraspFamily { PowerWrap, TipPinch, Tripod, Quadpod };

inline constexpr std::array<GraspFamily, 4> kAllFamilies = {GraspFamily::PowerWrap, GraspFamily::TipPinch,
                                                           GraspFamily::Tripod, GraspFamily::Quadpod};

inline std::string to_string(GraspFamily f) {
  switch (f) {
    case GraspFamily::PowerWrap: return "power_wrap";
    case GraspFamily::TipPinch: return "tip_pinch";
    case GraspFamily::Tripod: return "tripod";
    case GraspFamily::Quadpod: return "quadpod";
  }
  return "?";
}

inline GraspFamily family_from_string(std::string_view s) {
  for (auto f : kAllFamilies)
    if (to_string(f) == s) return f;
  throw Error(ErrorKind::Format, "unknown grasp family '" + std::string(s) + "'");
}

/// Words used in instructions ("power wrap", not the identifier).
inline std::string family_words(GraspFamily f) {
  switch (f) {
    case GraspFamily::PowerWrap: return "power wrap";
    case GraspFamily::TipPinch: return "tip pinch";
    case GraspFamily::Tripod: return "tripod";
    case GraspFamily::Quadpod: return "quadpod";
  }
  return "?";
}

struct FamilyPrior {
  std::vector<std::string> fingers;  ///< closing fingers, thumb included
  bool top_approach = false;  ///< palm faces down; otherwise it faces sideways
  Vec3 center;  ///< object centre in the palm frame (y is found by standoff search)
  double standoff = 0.0;  ///< extra clearance added after first palm-side touch
  double thumb_swing_lo = 0.0, thumb_swing_hi = 0.0;  ///< THJ5 range
  /// Approach azimuth (world frame) is uniform in center +- half_width.
  double azimuth_center = 1.5707963267948966;
  double azimuth_half_width = 1.0;
};

inline FamilyPrior family_prior(GraspFamily f) {
  switch (f) {
    case GraspFamily::PowerWrap: return {{"th", "ff", "mf", "rf", "lf"}, false, {0.0, 0.0, 0.085}, 0.0, 1.0, 1.3};
    case GraspFamily::TipPinch: return {{"th", "ff"}, true, {0.03, 0.0, 0.15}, 0.012, 1.1, 1.4};
    case GraspFamily::Tripod: return {{"th", "ff", "mf"}, true, {0.02, 0.0, 0.15}, 0.012, 1.1, 1.4};
    case GraspFamily::Quadpod: return {{"th", "ff", "mf", "rf"}, true, {0.01, 0.0, 0.15}, 0.012, 1.1, 1.4};
  }
  return {};
}

// ---- oracle -------------------------------------------------------------------------------

struct OracleOptions {
  std::size_t max_retries = 24;
  double gap = 0.0005;  ///< first-touch target, meters
  double max_penetration = 0.002;
  std::size_t min_contacts = 2;
  double contact_threshold = kDefaultContactThreshold;
};

struct OracleGrasp {
  GraspPose pose;
  ContactSet contacts;
  std::size_t attempts = 0;
};

namespace detail {

struct FingerChain {
  std::vector<std::size_t> joints;  // flexion joints, proximal first
  std::vector<std::size_t> links;  // links moved by each joint, same order
};

inline FingerChain finger_chain(const HandModel& hand, const std::string& f) {
  auto link = [&](const std::string& n) {
    auto i = hand.link_index(n);
    if (!i) throw Error(ErrorKind::UnknownLink, "hand has no link " + n);
    return *i;
  };
  FingerChain c;
  const std::vector<std::string> names =
      f == "th" ? std::vector<std::string>{"thproximal", "thmiddle", "thdistal"}
                : std::vector<std::string>{f + "proximal", f + "middle", f + "distal"};
  for (const auto& n : names) {
    const std::size_t l = link(n);
    c.links.push_back(l);
    c.joints.push_back(hand.joints_of_link(l).front());
  }
  return c;
}

class ClosureSearch {
 public:
  ClosureSearch(const HandModel& hand, const PointCloud& object) : hand_(hand), tree_(object.points) {}

  /// Smallest signed distance between the object and the given links.
  double min_distance(const GraspPose& pose, const std::vector<std::size_t>& links) const {
    const auto poses = forward_kinematics(hand_, pose);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t l : links) {
      const auto [a, b] = world_capsule(hand_, poses, l);
      const double r = hand_.links()[l].capsule.radius;
      const Vec3 c = 0.5 * (a + b);
      const double reach = 0.5 * (b - a).norm() + r + 0.01;
      for (std::size_t i : tree_.within(c, reach)) best = std::min(best, capsule_signed_distance(tree_.point(i), a, b, r));
    }
    return best;
  }

  double min_distance_all(const GraspPose& pose) const {
    std::vector<std::size_t> all(hand_.num_links());
    std::iota(all.begin(), all.end(), 0);
    return min_distance(pose, all);
  }

  /// Drives `joints` from their current values toward their upper limits by a
  /// shared fraction s in [0, 1]; stops at the first s where `links` come
  /// within `target` of the object. Returns false when already penetrating.
  bool close(GraspPose& pose, const std::vector<std::size_t>& joints, const std::vector<std::size_t>& links,
             double target) const {
    const GraspPose start = pose;
    auto at = [&](double s) {
      GraspPose p = start;
      for (std::size_t j : joints) {
        const double q0 = start.joint_angles[j], hi = hand_.joints()[j].hi;
        p.joint_angles[j] = q0 + s * (hi - q0);
      }
      return p;
    };
    if (min_distance(start, links) < 0.0) return false;
    if (min_distance(start, links) <= target) return true;
    constexpr int kScan = 48;
    double lo = 0.0, hi = -1.0;
    for (int i = 1; i <= kScan; ++i) {
      const double s = static_cast<double>(i) / kScan;
      if (min_distance(at(s), links) <= target) {
        hi = s;
        break;
      }
      lo = s;
    }
    if (hi < 0.0) {
      pose = at(1.0);
      return true;
    }
    for (int it = 0; it < 40; ++it) {
      const double mid = 0.5 * (lo + hi);
      (min_distance(at(mid), links) <= target ? hi : lo) = mid;
    }
    pose = at(hi);
    return true;
  }

  const KdTree& tree() const { return tree_; }

 private:
  const HandModel& hand_;
  KdTree tree_;
};

inline std::size_t joint_index(const HandModel& hand, const std::string& name) {
  for (std::size_t j = 0; j < hand.dof(); ++j)
    if (hand.joints()[j].name == name) return j;
  throw Error(ErrorKind::InvalidArgument, "hand has no joint " + name);
}

inline Mat3 axis_angle(const Vec3& axis, double angle) { return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(); }

}  // namespace detail

/// Requires the default hand's joint naming (THJ5, <finger>J4, flexion chains).
inline OracleGrasp oracle_grasp(const HandModel& hand, const PointCloud& object, GraspFamily family, std::uint64_t seed,
                                const OracleOptions& opts = {}) {
  object.validate();
  const Vec3 centroid = object.centroid();
  if (object.bounding_radius(centroid) > 0.15)
    throw Error(ErrorKind::InvalidArgument, "object exceeds the hand's reach (bounding radius > 0.15 m)");
  const FamilyPrior prior = family_prior(family);
  const detail::ClosureSearch search(hand, object);
  Rng rng(derive_seed(seed, 0x04ac));
  const std::vector<std::string> all_fingers = {"ff", "mf", "rf", "lf"};

  for (std::size_t attempt = 1; attempt <= opts.max_retries; ++attempt) {
    // Palm frame in world coordinates: y toward the object, z along the fingers.
    const double az = prior.azimuth_center + uniform(rng, -prior.azimuth_half_width, prior.azimuth_half_width);
    const Vec3 horiz(std::cos(az), std::sin(az), 0.0);
    Vec3 y_w = prior.top_approach ? Vec3(0, 0, -1) : horiz;
    Vec3 z_w = prior.top_approach ? horiz : Vec3(0, 0, 1);
    const Mat3 tilt = detail::axis_angle(Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)),
                                         uniform(rng, 0.0, 0.15));
    y_w = tilt * y_w;
    z_w = tilt * z_w;
    Mat3 R;
    R.col(0) = y_w.cross(z_w);
    R.col(1) = y_w;
    R.col(2) = z_w;

    GraspPose pose = hand.zero_pose();
    pose.rotation = matrix_to_euler_xyz(R);
    const Mat3 Rq = euler_xyz_to_matrix(pose.rotation);
    for (const auto& f : all_fingers) {
      std::string up = f;
      for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      pose.joint_angles[detail::joint_index(hand, up + "J4")] = uniform(rng, -0.1, 0.1);
      const bool active = std::find(prior.fingers.begin(), prior.fingers.end(), f) != prior.fingers.end();
      if (!active)
        for (std::size_t j : detail::finger_chain(hand, f).joints) pose.joint_angles[j] = 0.3;
    }
    pose.joint_angles[detail::joint_index(hand, "THJ5")] = uniform(rng, prior.thumb_swing_lo, prior.thumb_swing_hi);

    // Object centre in the palm frame; back off along y until the open hand clears it.
    Vec3 c_palm = prior.center + Vec3(uniform(rng, -0.008, 0.008), 0.0, uniform(rng, -0.01, 0.01));
    auto place = [&](double cy) {
      const Vec3 c(c_palm.x(), cy, c_palm.z());
      pose.translation = centroid - Rq * c;
    };
    double lo = 0.0, hi = 0.3;
    place(hi);
    if (search.min_distance_all(pose) <= opts.gap) continue;
    for (int it = 0; it < 50; ++it) {
      const double mid = 0.5 * (lo + hi);
      place(mid);
      (search.min_distance_all(pose) > opts.gap ? hi : lo) = mid;
    }
    place(hi + prior.standoff);

    bool ok = true;
    for (const auto& f : prior.fingers) {
      const auto chain = detail::finger_chain(hand, f);
      // Close the whole chain, then keep closing the joints beyond the first
      // touching link so the finger wraps.
      std::size_t first = 0;
      while (ok && first < chain.joints.size()) {
        const std::vector<std::size_t> joints(chain.joints.begin() + static_cast<std::ptrdiff_t>(first), chain.joints.end());
        const std::vector<std::size_t> links(chain.links.begin() + static_cast<std::ptrdiff_t>(first), chain.links.end());
        if (!search.close(pose, joints, links, 0.5 * opts.gap)) {
          ok = false;
          break;
        }
        std::size_t touching = chain.links.size();
        for (std::size_t k = first; k < chain.links.size(); ++k)
          if (search.min_distance(pose, {chain.links[k]}) <= opts.gap) {
            touching = k;
            break;
          }
        if (touching == chain.links.size()) break;
        first = touching + 1;
      }
      if (!ok) break;
    }
    if (!ok) continue;

    const auto poses = forward_kinematics(hand, pose);
    if (penetration_depth(hand, poses, search.tree()) > opts.max_penetration) continue;
    ContactSet contacts = extract_contacts(hand, poses, search.tree(), opts.contact_threshold);
    if (contacts.size() < opts.min_contacts) continue;
    return {pose, std::move(contacts), attempt};
  }
  throw Error(ErrorKind::OracleFailure, "no valid " + to_string(family) + " grasp after " +
                                            std::to_string(opts.max_retries) + " attempts");
}

// ---- instructions ------------------------------------------------------------------------

/// Fingers (th, ff, mf, rf, lf) with at least one contacting link.
inline std::size_t contacted_fingers(const HandModel& hand, const ContactSet& contacts) {
  std::array<bool, 5> seen{};
  const std::array<const char*, 5> prefix = {"th", "ff", "mf", "rf", "lf"};
  for (const auto& r : contacts)
    for (std::size_t f = 0; f < 5; ++f)
      if (hand.links()[r.link].name.rfind(prefix[f], 0) == 0) seen[f] = true;
  return static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
}

inline const std::array<std::string, 6>& number_words() {
  static const std::array<std::string, 6> w = {"no", "one", "two", "three", "four", "five"};
  return w;
}

inline const std::vector<std::string>& instruction_templates() {
  static const std::vector<std::string> t = {
      "Grasp the {shape} with {k} {fingers} using a {family} grip.",
      "Pick up the {shape} in a {family} grip with {k} {fingers}.",
      "Use a {family} grip and {k} {fingers} to hold the {shape}.",
      "Hold the {shape} using {k} {fingers} in a {family} grip.",
  };
  return t;
}

inline std::string generate_instruction(Shape shape, GraspFamily family, std::size_t fingers, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7e47));
  std::string s = instruction_templates()[uniform_index(rng, instruction_templates().size())];
  auto sub = [&](const std::string& key, const std::string& val) {
    for (auto p = s.find(key); p != std::string::npos; p = s.find(key)) s.replace(p, key.size(), val);
  };
  sub("{shape}", to_string(shape));
  sub("{family}", family_words(family));
  sub("{k}", number_words()[std::min<std::size_t>(fingers, 5)]);
  sub("{fingers}", fingers == 1 ? "finger" : "fingers");
  return s;
}

/// Every word an instruction can contain.
inline std::vector<std::string> instruction_words() {
  std::vector<std::string> out;
  auto add = [&](const std::string& text) {
    for (auto& w : split_words(text))
      if (w.front() != '{' && w.back() != '}') out.push_back(w);
  };
  for (const auto& t : instruction_templates()) {
    std::string clean = t;
    for (const char* key : {"{shape}", "{family}", "{k}", "{fingers}"})
      for (auto p = clean.find(key); p != std::string::npos; p = clean.find(key)) clean.replace(p, std::strlen(key), " ");
    add(clean);
  }
  for (auto s : {Shape::Box, Shape::Cylinder, Shape::Sphere, Shape::Capsule}) add(to_string(s));
  for (auto f : kAllFamilies) add(family_words(f));
  for (const auto& n : number_words()) add(n);
  add("finger fingers");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---- dataset -------------------------------------------------------------------------------

inline constexpr std::array<const char*, 5> kSplits = {"train", "seen", "unseen_object", "unseen_grasp", "unseen_both"};

struct DatasetConfig {
  std::size_t train = 2000;
  std::size_t per_validation_split = 200;
  std::size_t grasps_per_object = 8;
  std::size_t n_points = 512;
  std::uint64_t seed = 0;
  /// Object width buckets of 1 cm starting at 4 cm; held-out buckets form the unseen-object pool.
  std::vector<std::size_t> seen_buckets = {0, 1, 3, 4};
  std::vector<std::size_t> unseen_buckets = {2};
  std::vector<GraspFamily> seen_families = {GraspFamily::PowerWrap, GraspFamily::TipPinch, GraspFamily::Tripod};
  std::vector<GraspFamily> unseen_families = {GraspFamily::Quadpod};
};

inline constexpr double kBucketOrigin = 0.04;
inline constexpr double kBucketWidth = 0.01;

/// Bucket of the object's width parameter (first dimension).
inline std::size_t size_bucket(const ObjectSpec& s) {
  return static_cast<std::size_t>(std::floor((s.dims[0] - kBucketOrigin) / kBucketWidth + 1e-9));
}

struct DatasetRecord {
  std::string id;
  std::string split;
  ObjectSpec object;
  std::string cloud_file;  ///< relative to the dataset directory
  std::string instruction;
  GraspFamily family = GraspFamily::PowerWrap;
  ContactSet contacts;
  GraspPose pose;
  std::uint64_t seed = 0;
};

/// Sample an object whose width lies in `bucket`.
inline ObjectSpec sample_object(std::size_t bucket, std::size_t n_points, Rng& rng) {
  ObjectSpec s;
  s.shape = static_cast<Shape>(uniform_index(rng, 4));
  const double w = kBucketOrigin + kBucketWidth * (static_cast<double>(bucket) + uniform(rng, 0.05, 0.95));
  switch (s.shape) {
    case Shape::Box: s.dims = {w, w, uniform(rng, 0.05, 0.12)}; break;
    case Shape::Cylinder: s.dims = {w, uniform(rng, 0.06, 0.14)}; break;
    case Shape::Sphere: s.dims = {w}; break;
    case Shape::Capsule: s.dims = {w, std::max(w, uniform(rng, 0.08, 0.15))}; break;
  }
  s.n_points = n_points;
  s.pose_seed = rng();
  return s;
}

inline nlohmann::json record_to_json(const HandModel& hand, const DatasetRecord& r) {
  nlohmann::json contacts = nlohmann::json::array();
  for (const auto& c : r.contacts)
    contacts.push_back({{"link", hand.links()[c.link].name}, {"pos", {c.position.x(), c.position.y(), c.position.z()}}});
  return {{"id", r.id},
          {"split", r.split},
          {"object", {{"shape", to_string(r.object.shape)}, {"dims", r.object.dims}, {"cloud_file", r.cloud_file}}},
          {"instruction", r.instruction},
          {"family", to_string(r.family)},
          {"contacts", contacts},
          {"pose", r.pose.to_vector()},
          {"seed", r.seed}};
}

/// Parses one record; contact signed distances are recomputed from the pose.
inline DatasetRecord record_from_json(const HandModel& hand, const nlohmann::json& j) {
  try {
    DatasetRecord r;
    r.id = j.at("id").get<std::string>();
    r.split = j.at("split").get<std::string>();
    const auto& o = j.at("object");
    r.object.shape = shape_from_string(o.at("shape").get<std::string>());
    r.object.dims = o.at("dims").get<std::vector<double>>();
    r.cloud_file = o.at("cloud_file").get<std::string>();
    r.instruction = j.at("instruction").get<std::string>();
    if (j.contains("family")) r.family = family_from_string(j.at("family").get<std::string>());
    const auto v = j.at("pose").get<std::vector<double>>();
    r.pose = GraspPose::from_vector(v);
    hand.check_dimension(r.pose);
    const auto poses = forward_kinematics(hand, r.pose);
    std::vector<ContactRecord> recs;
    for (const auto& c : j.at("contacts")) {
      const auto name = c.at("link").get<std::string>();
      const auto l = hand.link_index(name);
      if (!l) throw Error(ErrorKind::UnknownLink, "unknown link '" + name + "'");
      const auto p = c.at("pos").get<std::vector<double>>();
      if (p.size() != 3) throw Error(ErrorKind::Format, "contact position needs 3 values");
      const Vec3 pos(p[0], p[1], p[2]);
      const auto [a, b] = world_capsule(hand, poses, *l);
      recs.push_back({*l, pos, capsule_signed_distance(pos, a, b, hand.links()[*l].capsule.radius)});
    }
    r.contacts = ContactSet(hand, std::move(recs));
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad dataset record: ") + e.what());
  }
}

inline std::vector<DatasetRecord> load_split(const HandModel& hand, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open " + path);
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(hand, nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, path + ":" + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Clouds referenced by a split, loaded once each (keyed by cloud_file).
class CloudCache {
 public:
  explicit CloudCache(std::filesystem::path base) : base_(std::move(base)) {}

  const PointCloud& get(const std::string& file) {
    auto it = clouds_.find(file);
    if (it == clouds_.end()) it = clouds_.emplace(file, load_xyz((base_ / file).string())).first;
    return it->second;
  }

 private:
  std::filesystem::path base_;
  std::map<std::string, PointCloud> clouds_;
};

struct DatasetSummary {
  std::map<std::string, std::size_t> counts;
  std::size_t oracle_failures = 0;
  std::map<std::string, std::map<std::size_t, std::size_t>> contact_histogram;  ///< family -> |C| -> count
};

/// Writes <split>.jsonl files, clouds/obj_NNNNN.xyz, and manifest.json under `dir`.
inline DatasetSummary build_dataset(const HandModel& hand, const DatasetConfig& cfg, const std::filesystem::path& dir,
                                    const nlohmann::json& echo_config = {}) {
  namespace fs = std::filesystem;
  for (auto b : cfg.seen_buckets)
    if (std::find(cfg.unseen_buckets.begin(), cfg.unseen_buckets.end(), b) != cfg.unseen_buckets.end())
      throw Error(ErrorKind::InvalidArgument, "seen and unseen size buckets overlap");
  for (auto f : cfg.seen_families)
    if (std::find(cfg.unseen_families.begin(), cfg.unseen_families.end(), f) != cfg.unseen_families.end())
      throw Error(ErrorKind::InvalidArgument, "seen and unseen grasp families overlap");
  if (cfg.seen_buckets.empty() || cfg.unseen_buckets.empty() || cfg.seen_families.empty() ||
      cfg.unseen_families.empty() || cfg.grasps_per_object == 0)
    throw Error(ErrorKind::InvalidArgument, "dataset config needs non-empty pools and grasps_per_object >= 1");
  fs::create_directories(dir / "clouds");

  DatasetSummary summary;
  std::size_t object_counter = 0;
  nlohmann::json split_seeds = nlohmann::json::object();
  for (std::size_t si = 0; si < kSplits.size(); ++si) {
    const std::string split = kSplits[si];
    const bool unseen_obj = split == "unseen_object" || split == "unseen_both";
    const bool unseen_fam = split == "unseen_grasp" || split == "unseen_both";
    const auto& buckets = unseen_obj ? cfg.unseen_buckets : cfg.seen_buckets;
    const auto& families = unseen_fam ? cfg.unseen_families : cfg.seen_families;
    const std::size_t target = split == "train" ? cfg.train : cfg.per_validation_split;
    const std::uint64_t split_seed = derive_seed(cfg.seed, si + 1);
    split_seeds[split] = split_seed;
    Rng rng(split_seed);

    const fs::path out_path = dir / (split + ".jsonl");
    const fs::path partial = dir / (split + ".jsonl.partial");
    std::ofstream out(partial);
    if (!out) throw Error(ErrorKind::Format, "cannot write " + partial.string());
    std::size_t written = 0;
    while (written < target) {
      const ObjectSpec spec = sample_object(buckets[uniform_index(rng, buckets.size())], cfg.n_points, rng);
      const PointCloud cloud = generate_object(spec, spec.pose_seed);
      char name[32];
      std::snprintf(name, sizeof(name), "clouds/obj_%05zu.xyz", object_counter++);
      bool used = false;
      for (std::size_t g = 0; g < cfg.grasps_per_object && written < target; ++g) {
        const GraspFamily fam = families[uniform_index(rng, families.size())];
        const std::uint64_t sample_seed = rng();
        OracleGrasp og;
        try {
          og = oracle_grasp(hand, cloud, fam, sample_seed);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::OracleFailure) throw;
          ++summary.oracle_failures;
          continue;
        }
        DatasetRecord r;
        char id[32];
        std::snprintf(id, sizeof(id), "%s-%05zu", split.c_str(), written);
        r.id = id;
        r.split = split;
        r.object = spec;
        r.cloud_file = name;
        r.family = fam;
        r.contacts = std::move(og.contacts);
        r.pose = og.pose;
        r.seed = sample_seed;
        r.instruction = generate_instruction(spec.shape, fam, contacted_fingers(hand, r.contacts), sample_seed);
        out << record_to_json(hand, r).dump() << '\n';
        ++summary.contact_histogram[to_string(fam)][r.contacts.size()];
        ++written;
        used = true;
      }
      if (used) save_xyz(cloud, (dir / name).string());
    }
    out.close();
    fs::rename(partial, out_path);
    summary.counts[split] = written;
  }

  nlohmann::json manifest = {{"seed", cfg.seed},
                             {"split_seeds", split_seeds},
                             {"counts", summary.counts},
                             {"oracle_failures", summary.oracle_failures},
                             {"objects", object_counter},
                             {"grasps_per_object", cfg.grasps_per_object},
                             {"n_points", cfg.n_points},
                             {"seen_buckets", cfg.seen_buckets},
                             {"unseen_buckets", cfg.unseen_buckets},
                             {"bucket_origin_m", kBucketOrigin},
                             {"bucket_width_m", kBucketWidth},
                             {"config", echo_config}};
  nlohmann::json fams = nlohmann::json::object();
  for (const auto& [f, hist] : summary.contact_histogram) {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [k, n] : hist) h[std::to_string(k)] = n;
    fams[f] = h;
  }
  manifest["contact_count_histogram"] = fams;
  std::vector<std::string> sf, uf;
  for (auto f : cfg.seen_families) sf.push_back(to_string(f));
  for (auto f : cfg.unseen_families) uf.push_back(to_string(f));
  manifest["seen_families"] = sf;
  manifest["unseen_families"] = uf;
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
  return summary;
}

}  // namespace cgrasp
