#pragma once

// Articulated multi-finger hand: kinematic tree, forward kinematics, and
// per-link capsule collision geometry.
//
// Palm rotation is parameterized as intrinsic XYZ Euler angles,
// R = Rx(rx) * Ry(ry) * Rz(rz), so a grasp vector is
// [tx ty tz | rx ry rz | joint angles...] with dimension 6 + dof.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"

namespace cgrasp {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr int kHandFormatVersion = 1;

struct Capsule {
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.01;
};

/// Closest point on segment [a, b] to p.
inline Vec3 closest_point_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return a;
  double t = (p - a).dot(ab) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return a + t * ab;
}

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  return (p - closest_point_on_segment(p, a, b)).norm();
}

/// Signed distance from p to a capsule surface (negative inside).
inline double capsule_signed_distance(const Vec3& p, const Vec3& a, const Vec3& b, double radius) {
  return point_segment_distance(p, a, b) - radius;
}

struct LinkSpec {
  std::string name;
  int parent = -1;
  Vec3 origin_offset = Vec3::Zero();
  Capsule capsule;
};

struct JointSpec {
  std::string name;
  std::size_t child_link = 0;
  Vec3 axis = Vec3::UnitX();
  double lo = 0.0;
  double hi = 0.0;
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
};

using LinkPoseSet = std::vector<RigidTransform>;

inline Mat3 euler_xyz_to_matrix(const Vec3& rpy) {
  return (Eigen::AngleAxisd(rpy.x(), Vec3::UnitX()) * Eigen::AngleAxisd(rpy.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(rpy.z(), Vec3::UnitZ()))
      .toRotationMatrix();
}

/// Inverse of euler_xyz_to_matrix; the middle angle is returned in [-pi/2, pi/2].
inline Vec3 matrix_to_euler_xyz(const Mat3& r) {
  const double sy = std::clamp(r(0, 2), -1.0, 1.0);
  const double ry = std::asin(sy);
  if (std::abs(sy) < 1.0 - 1e-12) {
    return {std::atan2(-r(1, 2), r(2, 2)), ry, std::atan2(-r(0, 1), r(0, 0))};
  }
  // Gimbal lock: fold the third angle into the first.
  return {std::atan2(r(2, 1), r(1, 1)), ry, 0.0};
}

struct GraspPose {
  Vec3 translation = Vec3::Zero();
  Vec3 rotation = Vec3::Zero();
  std::vector<double> joint_angles;

  std::size_t dim() const { return 6 + joint_angles.size(); }

  std::vector<double> to_vector() const {
    std::vector<double> v;
    v.reserve(dim());
    for (int i = 0; i < 3; ++i) v.push_back(translation[i]);
    for (int i = 0; i < 3; ++i) v.push_back(rotation[i]);
    v.insert(v.end(), joint_angles.begin(), joint_angles.end());
    return v;
  }

  static GraspPose from_vector(std::span<const double> v) {
    if (v.size() < 6) throw Error(ErrorKind::InvalidPose, "grasp vector shorter than 6");
    GraspPose g;
    g.translation = {v[0], v[1], v[2]};
    g.rotation = {v[3], v[4], v[5]};
    g.joint_angles.assign(v.begin() + 6, v.end());
    return g;
  }

  bool operator==(const GraspPose& o) const {
    return translation == o.translation && rotation == o.rotation && joint_angles == o.joint_angles;
  }
};

class HandModel {
 public:
  HandModel() = default;

  /// Validates the tree, joint axes, and limits. Throws Error(InvalidArgument).
  HandModel(std::vector<LinkSpec> links, std::vector<JointSpec> joints,
            std::vector<std::string> canonical_link_order)
      : links_(std::move(links)), joints_(std::move(joints)) {
    if (links_.empty()) throw Error(ErrorKind::InvalidArgument, "hand has no links");
    for (std::size_t i = 0; i < links_.size(); ++i) {
      const auto& l = links_[i];
      if (i == 0 && l.parent != -1) throw Error(ErrorKind::InvalidArgument, "link 0 must be the root");
      if (i > 0 && (l.parent < 0 || static_cast<std::size_t>(l.parent) >= i))
        throw Error(ErrorKind::InvalidArgument, "link '" + l.name + "' parent index must precede it");
      if (!(l.capsule.radius > 0.0))
        throw Error(ErrorKind::InvalidArgument, "link '" + l.name + "' capsule radius must be > 0");
      for (std::size_t j = 0; j < i; ++j)
        if (links_[j].name == l.name) throw Error(ErrorKind::InvalidArgument, "duplicate link name " + l.name);
    }
    if (links_[0].origin_offset != Vec3::Zero())
      throw Error(ErrorKind::InvalidArgument, "root link offset must be zero");
    joints_of_link_.assign(links_.size(), {});
    for (std::size_t j = 0; j < joints_.size(); ++j) {
      const auto& js = joints_[j];
      if (js.child_link == 0 || js.child_link >= links_.size())
        throw Error(ErrorKind::InvalidArgument, "joint " + js.name + " has an invalid child link");
      if (std::abs(js.axis.norm() - 1.0) > 1e-9)
        throw Error(ErrorKind::InvalidArgument, "joint " + js.name + " axis is not unit length");
      if (!(js.lo <= js.hi)) throw Error(ErrorKind::InvalidArgument, "joint " + js.name + " has lo > hi");
      joints_of_link_[js.child_link].push_back(j);
    }
    if (canonical_link_order.empty()) {
      for (const auto& l : links_) canonical_link_order.push_back(l.name);
    }
    if (canonical_link_order.size() != links_.size())
      throw Error(ErrorKind::InvalidArgument, "canonical order must list every link once");
    rank_.assign(links_.size(), links_.size());
    for (std::size_t r = 0; r < canonical_link_order.size(); ++r) {
      auto idx = link_index(canonical_link_order[r]);
      if (!idx || rank_[*idx] != links_.size())
        throw Error(ErrorKind::InvalidArgument, "canonical order is not a permutation of link names");
      rank_[*idx] = r;
      canonical_.push_back(*idx);
    }
  }

  const std::vector<LinkSpec>& links() const { return links_; }
  const std::vector<JointSpec>& joints() const { return joints_; }
  std::size_t num_links() const { return links_.size(); }
  std::size_t dof() const { return joints_.size(); }
  std::size_t action_dim() const { return joints_.size() + 6; }

  /// Link indices in canonical order.
  const std::vector<std::size_t>& canonical_order() const { return canonical_; }
  /// Position of a link within the canonical order.
  std::size_t canonical_rank(std::size_t link) const { return rank_.at(link); }
  const std::vector<std::size_t>& joints_of_link(std::size_t link) const { return joints_of_link_.at(link); }

  std::optional<std::size_t> link_index(std::string_view name) const {
    for (std::size_t i = 0; i < links_.size(); ++i)
      if (links_[i].name == name) return i;
    return std::nullopt;
  }

  /// All links whose ancestor chain passes through `link` (including itself).
  std::vector<std::size_t> subtree(std::size_t link) const {
    std::vector<bool> in(links_.size(), false);
    in[link] = true;
    std::vector<std::size_t> out{link};
    for (std::size_t i = link + 1; i < links_.size(); ++i) {
      if (in[static_cast<std::size_t>(links_[i].parent)]) {
        in[i] = true;
        out.push_back(i);
      }
    }
    return out;
  }

  GraspPose clamp(GraspPose pose) const {
    check_dimension(pose);
    for (std::size_t j = 0; j < joints_.size(); ++j)
      pose.joint_angles[j] = std::clamp(pose.joint_angles[j], joints_[j].lo, joints_[j].hi);
    return pose;
  }

  GraspPose zero_pose() const {
    GraspPose g;
    g.joint_angles.assign(dof(), 0.0);
    return clamp(g);
  }

  void check_dimension(const GraspPose& pose) const {
    if (pose.joint_angles.size() != dof())
      throw Error(ErrorKind::InvalidPose, "expected " + std::to_string(dof()) + " joint angles, got " +
                                              std::to_string(pose.joint_angles.size()));
  }

 private:
  std::vector<LinkSpec> links_;
  std::vector<JointSpec> joints_;
  std::vector<std::vector<std::size_t>> joints_of_link_;
  std::vector<std::size_t> canonical_;
  std::vector<std::size_t> rank_;
};

struct FkOptions {
  /// Reject out-of-limit joint angles instead of clamping them.
  bool strict = false;
};

inline LinkPoseSet forward_kinematics(const HandModel& model, const GraspPose& pose, FkOptions opts = {}) {
  model.check_dimension(pose);
  for (int i = 0; i < 3; ++i)
    if (!std::isfinite(pose.translation[i]) || !std::isfinite(pose.rotation[i]))
      throw Error(ErrorKind::InvalidPose, "palm pose is not finite");
  const auto& joints = model.joints();
  for (std::size_t j = 0; j < joints.size(); ++j) {
    const double q = pose.joint_angles[j];
    if (!std::isfinite(q)) throw Error(ErrorKind::InvalidPose, "joint angle is not finite");
    if (opts.strict && (q < joints[j].lo || q > joints[j].hi))
      throw Error(ErrorKind::InvalidPose, "joint " + joints[j].name + " outside limits");
  }

  const auto& links = model.links();
  LinkPoseSet out(links.size());
  out[0] = {euler_xyz_to_matrix(pose.rotation), pose.translation};
  for (std::size_t i = 1; i < links.size(); ++i) {
    const auto& parent = out[static_cast<std::size_t>(links[i].parent)];
    Mat3 local = Mat3::Identity();
    for (std::size_t j : model.joints_of_link(i)) {
      const double q = std::clamp(pose.joint_angles[j], joints[j].lo, joints[j].hi);
      local = local * Eigen::AngleAxisd(q, joints[j].axis).toRotationMatrix();
    }
    out[i] = {parent.rotation * local, parent.apply(links[i].origin_offset)};
  }
  return out;
}

/// World-frame capsule endpoints of one link.
inline std::pair<Vec3, Vec3> world_capsule(const HandModel& model, const LinkPoseSet& poses, std::size_t link) {
  const auto& c = model.links()[link].capsule;
  return {poses[link].apply(c.a), poses[link].apply(c.b)};
}

/// Deterministic quasi-uniform samples on a capsule surface in its own frame.
/// Samples are stratified by area over the two hemispherical caps and the
/// cylinder; azimuths follow a golden-ratio sequence.
inline std::vector<Vec3> capsule_surface_samples(const Capsule& cap, std::size_t n) {
  constexpr double kPi = 3.14159265358979323846;
  constexpr double kGolden = 0.6180339887498948482;
  const double r = cap.radius;
  const Vec3 ab = cap.b - cap.a;
  const double len = ab.norm();
  const Vec3 e = len > 0.0 ? Vec3(ab / len) : Vec3(Vec3::UnitZ());
  const Vec3 helper = std::abs(e.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 e1 = e.cross(helper).normalized();
  const Vec3 e2 = e.cross(e1);
  const double cap_area = 2.0 * kPi * r * r;
  const double cyl_area = 2.0 * kPi * r * len;
  const double total = 2.0 * cap_area + cyl_area;

  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(n) * total;
    double frac = static_cast<double>(i) * kGolden;
    frac -= std::floor(frac);
    const double phi = 2.0 * kPi * frac;
    const Vec3 radial = std::cos(phi) * e1 + std::sin(phi) * e2;
    if (u < cap_area) {
      const double ct = 1.0 - u / cap_area;
      const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
      out.push_back(cap.a + r * (-ct * e + st * radial));
    } else if (u < cap_area + cyl_area) {
      const double t = (u - cap_area) / (2.0 * kPi * r);
      out.push_back(cap.a + t * e + r * radial);
    } else {
      const double ct = 1.0 - (u - cap_area - cyl_area) / cap_area;
      const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
      out.push_back(cap.b + r * (ct * e + st * radial));
    }
  }
  return out;
}

/// Surface samples of every link, transformed to the world frame, link-major order.
inline std::vector<Vec3> link_surface_points(const HandModel& model, const LinkPoseSet& poses,
                                             std::size_t samples_per_link) {
  if (samples_per_link < 1) throw Error(ErrorKind::InvalidArgument, "samples_per_link must be >= 1");
  std::vector<Vec3> out;
  out.reserve(model.num_links() * samples_per_link);
  for (std::size_t l = 0; l < model.num_links(); ++l) {
    for (const Vec3& p : capsule_surface_samples(model.links()[l].capsule, samples_per_link))
      out.push_back(poses[l].apply(p));
  }
  return out;
}

/// Built-in 22-dof five-finger hand with Shadow-hand link names.
///
/// Palm frame: fingers extend along +z, the grasping side of the palm faces +y,
/// the first finger sits on the +x side. Flexion rotates about -x so positive
/// angles curl fingers toward +y.
inline HandModel default_hand() {
  std::vector<LinkSpec> links;
  std::vector<JointSpec> joints;
  auto add_link = [&](std::string name, int parent, Vec3 offset, Vec3 a, Vec3 b, double r) {
    links.push_back({std::move(name), parent, offset, {a, b, r}});
    return static_cast<int>(links.size() - 1);
  };
  auto add_joint = [&](std::string name, int child, Vec3 axis, double lo, double hi) {
    joints.push_back({std::move(name), static_cast<std::size_t>(child), axis.normalized(), lo, hi});
  };

  const int palm = add_link("palm", -1, Vec3::Zero(), {-0.02, 0.0, 0.05}, {0.02, 0.0, 0.05}, 0.03);
  const int wrist = add_link("wrist", palm, Vec3::Zero(), {0.0, 0.0, -0.012}, {0.0, 0.0, -0.04}, 0.025);
  add_joint("WRJ2", wrist, Vec3::UnitY(), -0.524, 0.175);
  add_joint("WRJ1", wrist, -Vec3::UnitX(), -0.698, 0.489);

  // Thumb chain points up and outward at rest; its flexion axis is chosen so
  // positive angles curl the chain toward the palm front.
  const Vec3 th_dir = Vec3(1.0, 0.0, 1.0).normalized();
  const Vec3 th_flex = Vec3(-1.0, 0.0, 1.0).normalized();
  const int thbase =
      add_link("thbase", palm, {0.034, 0.009, 0.029}, Vec3::Zero(), 0.038 * th_dir, 0.012);
  add_joint("THJ5", thbase, Vec3::UnitZ(), -0.2, 1.4);
  const int thprox = add_link("thproximal", thbase, 0.038 * th_dir, Vec3::Zero(), 0.038 * th_dir, 0.011);
  add_joint("THJ4", thprox, th_flex, 0.0, 1.22);
  const int thmid = add_link("thmiddle", thprox, 0.038 * th_dir, Vec3::Zero(), 0.032 * th_dir, 0.010);
  add_joint("THJ2", thmid, th_flex, -0.524, 0.698);
  const int thdist = add_link("thdistal", thmid, 0.032 * th_dir, Vec3::Zero(), 0.027 * th_dir, 0.009);
  add_joint("THJ1", thdist, th_flex, -0.262, 1.571);

  struct FingerBase {
    const char* prefix;
    double x;
    double z;
  };
  const FingerBase fingers[] = {{"ff", 0.033, 0.095}, {"mf", 0.011, 0.099}, {"rf", -0.011, 0.095},
                                {"lf", -0.033, 0.086}};
  const Vec3 flex = -Vec3::UnitX();
  for (const auto& f : fingers) {
    const std::string p = f.prefix;
    std::string up = p;
    for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    const int knuckle = add_link(p + "knuckle", palm, {f.x, 0.0, f.z}, Vec3::Zero(), Vec3::Zero(), 0.009);
    add_joint(up + "J4", knuckle, Vec3::UnitY(), -0.349, 0.349);
    const int prox = add_link(p + "proximal", knuckle, Vec3::Zero(), Vec3::Zero(), {0.0, 0.0, 0.045}, 0.010);
    add_joint(up + "J3", prox, flex, -0.262, 1.571);
    const int mid = add_link(p + "middle", prox, {0.0, 0.0, 0.045}, Vec3::Zero(), {0.0, 0.0, 0.025}, 0.009);
    add_joint(up + "J2", mid, flex, 0.0, 1.571);
    const int dist = add_link(p + "distal", mid, {0.0, 0.0, 0.025}, Vec3::Zero(), {0.0, 0.0, 0.022}, 0.008);
    add_joint(up + "J1", dist, flex, 0.0, 1.571);
  }

  std::vector<std::string> order = {"thbase",     "thproximal", "thmiddle", "thdistal",   "ffknuckle",
                                    "ffproximal", "ffmiddle",   "ffdistal", "mfknuckle",  "mfproximal",
                                    "mfmiddle",   "mfdistal",   "rfknuckle", "rfproximal", "rfmiddle",
                                    "rfdistal",   "lfknuckle",  "lfproximal", "lfmiddle",  "lfdistal",
                                    "palm",       "wrist"};
  return HandModel(std::move(links), std::move(joints), std::move(order));
}

// ---- hand description file (JSON, versioned) -------------------------------

namespace detail {
inline nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Vec3 json_vec(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::Format, std::string(what) + " must be a 3-array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
}  // namespace detail

inline nlohmann::json hand_to_json(const HandModel& model) {
  nlohmann::json j;
  j["hand_format_version"] = kHandFormatVersion;
  auto& links = j["links"] = nlohmann::json::array();
  for (const auto& l : model.links()) {
    links.push_back({{"name", l.name},
                     {"parent", l.parent},
                     {"offset", detail::vec_json(l.origin_offset)},
                     {"capsule",
                      {{"a", detail::vec_json(l.capsule.a)},
                       {"b", detail::vec_json(l.capsule.b)},
                       {"radius", l.capsule.radius}}}});
  }
  auto& joints = j["joints"] = nlohmann::json::array();
  for (const auto& js : model.joints()) {
    joints.push_back({{"name", js.name},
                      {"child", model.links()[js.child_link].name},
                      {"axis", detail::vec_json(js.axis)},
                      {"limits", {js.lo, js.hi}}});
  }
  auto& order = j["canonical_link_order"] = nlohmann::json::array();
  for (std::size_t idx : model.canonical_order()) order.push_back(model.links()[idx].name);
  return j;
}

inline HandModel hand_from_json(const nlohmann::json& j) {
  try {
    if (j.value("hand_format_version", 0) != kHandFormatVersion)
      throw Error(ErrorKind::Format, "unsupported hand_format_version");
    std::vector<LinkSpec> links;
    for (const auto& jl : j.at("links")) {
      LinkSpec l;
      l.name = jl.at("name").get<std::string>();
      l.parent = jl.at("parent").get<int>();
      l.origin_offset = detail::json_vec(jl.at("offset"), "offset");
      const auto& jc = jl.at("capsule");
      l.capsule = {detail::json_vec(jc.at("a"), "capsule.a"), detail::json_vec(jc.at("b"), "capsule.b"),
                   jc.at("radius").get<double>()};
      links.push_back(std::move(l));
    }
    std::vector<JointSpec> joints;
    for (const auto& jj : j.at("joints")) {
      JointSpec js;
      js.name = jj.value("name", std::string("joint") + std::to_string(joints.size()));
      const auto& child = jj.at("child");
      if (child.is_number_integer()) {
        js.child_link = child.get<std::size_t>();
      } else {
        const auto name = child.get<std::string>();
        auto it = std::find_if(links.begin(), links.end(), [&](const LinkSpec& l) { return l.name == name; });
        if (it == links.end()) throw Error(ErrorKind::Format, "joint child '" + name + "' is not a link");
        js.child_link = static_cast<std::size_t>(it - links.begin());
      }
      js.axis = detail::json_vec(jj.at("axis"), "axis");
      const auto& lim = jj.at("limits");
      js.lo = lim.at(0).get<double>();
      js.hi = lim.at(1).get<double>();
      joints.push_back(std::move(js));
    }
    std::vector<std::string> order;
    if (j.contains("canonical_link_order")) order = j["canonical_link_order"].get<std::vector<std::string>>();
    return HandModel(std::move(links), std::move(joints), std::move(order));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("hand description: ") + e.what());
  }
}

inline HandModel load_hand(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open hand description " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ": " + e.what());
  }
  return hand_from_json(j);
}

inline void save_hand(const HandModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Format, "cannot write " + path);
  out << hand_to_json(model).dump(2) << '\n';
}

}  // namespace cgrasp
