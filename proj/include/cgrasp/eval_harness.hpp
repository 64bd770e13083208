#pragma once

// Contact-prediction quality, per-sample geometric metrics, the report
// aggregate, the steering sweep, and random baselines.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/geometry.hpp"
#include "cgrasp/grasp_quality.hpp"
#include "cgrasp/hand_model.hpp"
#include "cgrasp/pipeline.hpp"

namespace cgrasp {

struct ContactQuality {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Set metrics over link indices. Both empty: all 1. Empty prediction with a
/// non-empty ground truth: precision 0 (and recall 0).
inline ContactQuality contact_link_quality(const HandModel& hand, std::span<const std::size_t> pred,
                                           std::span<const std::size_t> gt) {
  for (auto l : pred)
    if (l >= hand.num_links()) throw Error(ErrorKind::UnknownLink, "predicted link index out of range");
  for (auto l : gt)
    if (l >= hand.num_links()) throw Error(ErrorKind::UnknownLink, "ground-truth link index out of range");
  const std::set<std::size_t> p(pred.begin(), pred.end()), g(gt.begin(), gt.end());
  if (p.empty() && g.empty()) return {1.0, 1.0, 1.0, 1.0};
  std::size_t inter = 0;
  for (auto l : p) inter += g.count(l);
  const double uni = static_cast<double>(p.size() + g.size() - inter);
  ContactQuality q;
  q.iou = static_cast<double>(inter) / uni;
  q.precision = p.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(p.size());
  q.recall = g.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(g.size());
  q.f1 = q.precision + q.recall > 0.0 ? 2.0 * q.precision * q.recall / (q.precision + q.recall) : 0.0;
  return q;
}

inline ContactQuality contact_link_quality(const HandModel& hand, const std::vector<std::string>& pred,
                                           const std::vector<std::string>& gt) {
  auto resolve = [&](const std::vector<std::string>& names) {
    std::vector<std::size_t> out;
    for (const auto& n : names) {
      const auto l = hand.link_index(n);
      if (!l) throw Error(ErrorKind::UnknownLink, "unknown link '" + n + "'");
      out.push_back(*l);
    }
    return out;
  };
  const auto p = resolve(pred), g = resolve(gt);
  return contact_link_quality(hand, std::span<const std::size_t>(p), std::span<const std::size_t>(g));
}

enum class PositionReference { Surface, Origin };

inline constexpr double kDefaultPositionThreshold = 0.01;

/// Fraction of positioned contacts lying within `threshold` of their link
/// (capsule surface or link origin) under FK of the predicted pose;
/// nullopt when no contact carries a position.
inline std::optional<double> contact_position_accuracy(const HandModel& hand, std::span<const PredictedContact> pred,
                                                       const GraspPose& pose,
                                                       double threshold = kDefaultPositionThreshold,
                                                       PositionReference ref = PositionReference::Surface) {
  if (!(threshold > 0.0)) throw Error(ErrorKind::InvalidArgument, "position threshold must be > 0");
  const auto poses = forward_kinematics(hand, pose);
  std::size_t hits = 0, total = 0;
  for (const auto& c : pred) {
    if (!c.position) continue;
    if (c.link >= hand.num_links()) throw Error(ErrorKind::UnknownLink, "contact link index out of range");
    ++total;
    double d = 0.0;
    if (ref == PositionReference::Surface) {
      const auto [a, b] = world_capsule(hand, poses, c.link);
      d = std::abs(capsule_signed_distance(*c.position, a, b, hand.links()[c.link].capsule.radius));
    } else {
      d = (*c.position - poses[c.link].translation).norm();
    }
    if (d < threshold) ++hits;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(total);
}

inline std::vector<PredictedContact> as_predicted(const ContactSet& contacts) {
  std::vector<PredictedContact> out;
  for (const auto& r : contacts) out.push_back({r.link, r.position});
  return out;
}

// ---- per-sample metrics -------------------------------------------------------------------

struct EvalOptions {
  std::size_t samples_per_link = 32;
  double contact_map_tau = kDefaultContactMapTau;
  FrictionModel friction;
  Q1Options q1;
  StabilityThresholds stability;
  double position_threshold = kDefaultPositionThreshold;
  PositionReference position_reference = PositionReference::Surface;
  GenerateOptions generation;
};

struct GeometricMetrics {
  double cd_mm = 0.0;
  double con = 0.0;
  double q1 = 0.0;
  double pen_m = 0.0;
  bool proxy_stable = false;
};

/// Compares a predicted pose against the ground-truth pose on `object`.
inline GeometricMetrics geometric_metrics(const HandModel& hand, const PointCloud& object, const KdTree& tree,
                                          const GraspPose& pred, const GraspPose& gt, const EvalOptions& opts) {
  GeometricMetrics m;
  const auto pp = forward_kinematics(hand, pred), gp = forward_kinematics(hand, gt);
  const auto ps = link_surface_points(hand, pp, opts.samples_per_link);
  const auto gs = link_surface_points(hand, gp, opts.samples_per_link);
  m.cd_mm = 1000.0 * chamfer_distance(ps, gs);
  m.con = contact_map_distance(contact_map(object, ps, opts.contact_map_tau),
                               contact_map(object, gs, opts.contact_map_tau));
  const ContactSet physical = extract_contacts(hand, pp, tree);
  m.q1 = physical.empty() ? 0.0 : q1_metric(build_wrench_set(physical, object, opts.friction), opts.q1).value;
  m.pen_m = penetration_depth(hand, pp, tree);
  m.proxy_stable = stability_proxy(m.q1, m.pen_m, opts.stability);
  return m;
}

struct EvalRow {
  std::string id;
  bool valid = false;
  GenerationStatus status = GenerationStatus::Complete;
  std::string violation;
  GeometricMetrics geo;
  ContactQuality quality;
  std::optional<double> pos_acc;
  std::optional<GraspPose> pose;
  std::vector<TokenId> tokens;
};

/// Metrics for one decoded assistant span against its record.
inline EvalRow evaluate_assistant(const Codec& codec, const DatasetRecord& rec, const PointCloud& object,
                                  const KdTree& tree, std::span<const TokenId> assistant, const EvalOptions& opts) {
  EvalRow row;
  row.id = rec.id;
  row.tokens.assign(assistant.begin(), assistant.end());
  const DecodedGrasp d = decode_assistant(codec, assistant);
  if (!d.grammar.ok()) {
    row.violation = d.grammar.violations.empty() ? "invalid" : d.grammar.violations.front().message;
    return row;
  }
  row.valid = true;
  row.pose = *d.pose;
  row.geo = geometric_metrics(codec.hand, object, tree, *d.pose, rec.pose, opts);
  std::vector<std::size_t> pred_links;
  for (const auto& c : d.contacts) pred_links.push_back(c.link);
  const auto gt_links = rec.contacts.links();
  row.quality = contact_link_quality(codec.hand, std::span<const std::size_t>(pred_links),
                                     std::span<const std::size_t>(gt_links));
  row.pos_acc = contact_position_accuracy(codec.hand, d.contacts, *d.pose, opts.position_threshold,
                                          opts.position_reference);
  return row;
}

/// The record's own annotation scored as a prediction, bypassing the token
/// codec so no quantization enters.
inline EvalRow evaluate_ground_truth(const HandModel& hand, const DatasetRecord& rec, const PointCloud& object,
                                    const KdTree& tree, const EvalOptions& opts) {
  EvalRow row;
  row.id = rec.id;
  row.valid = true;
  row.pose = rec.pose;
  row.geo = geometric_metrics(hand, object, tree, rec.pose, rec.pose, opts);
  const auto links = rec.contacts.links();
  row.quality = contact_link_quality(hand, std::span<const std::size_t>(links), std::span<const std::size_t>(links));
  row.pos_acc = contact_position_accuracy(hand, as_predicted(rec.contacts), rec.pose, opts.position_threshold,
                                          opts.position_reference);
  return row;
}

// ---- report ------------------------------------------------------------------------------------

struct EvalAggregate {
  std::size_t n = 0;
  std::size_t n_valid = 0;
  double invalid_rate = 0.0;
  double cd_mm = 0.0, con = 0.0, q1 = 0.0, pen_m = 0.0, proxy_rate = 0.0;
  ContactQuality quality;
  std::optional<double> pos_acc;  ///< mean over rows that carry positions
  std::optional<DiversityStats> diversity;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalAggregate aggregate;
  std::string fingerprint;
};

/// Means over grammar-valid rows; invalid rows count only toward invalid_rate.
inline EvalAggregate aggregate_rows(std::span<const EvalRow> rows) {
  EvalAggregate a;
  a.n = rows.size();
  double pos_sum = 0.0;
  std::size_t pos_n = 0;
  std::vector<GraspPose> poses;
  for (const auto& r : rows) {
    if (!r.valid) continue;
    ++a.n_valid;
    a.cd_mm += r.geo.cd_mm;
    a.con += r.geo.con;
    a.q1 += r.geo.q1;
    a.pen_m += r.geo.pen_m;
    a.proxy_rate += r.geo.proxy_stable ? 1.0 : 0.0;
    a.quality.iou += r.quality.iou;
    a.quality.precision += r.quality.precision;
    a.quality.recall += r.quality.recall;
    a.quality.f1 += r.quality.f1;
    if (r.pos_acc) pos_sum += *r.pos_acc, ++pos_n;
    poses.push_back(*r.pose);
  }
  a.invalid_rate = a.n ? static_cast<double>(a.n - a.n_valid) / static_cast<double>(a.n) : 0.0;
  if (a.n_valid) {
    const double k = static_cast<double>(a.n_valid);
    a.cd_mm /= k, a.con /= k, a.q1 /= k, a.pen_m /= k, a.proxy_rate /= k;
    a.quality.iou /= k, a.quality.precision /= k, a.quality.recall /= k, a.quality.f1 /= k;
  }
  if (pos_n) a.pos_acc = pos_sum / static_cast<double>(pos_n);
  if (poses.size() >= 2) a.diversity = diversity(poses);
  return a;
}

/// Generates for every record and evaluates; rows come back in record order.
inline EvalReport full_report(const GraspModel& model, const Codec& codec, std::span<const DatasetRecord> records,
                              CloudCache& clouds, const EvalOptions& opts) {
  check_vocabulary(model.checkpoint(), codec.vocab);
  EvalReport report;
  std::map<std::string, std::pair<std::shared_ptr<EncoderInput>, std::shared_ptr<KdTree>>> prepared;
  for (const auto& rec : records) {
    const PointCloud& cloud = clouds.get(rec.cloud_file);
    auto& prep = prepared[rec.cloud_file];
    if (!prep.first) {
      prep.first = std::make_shared<EncoderInput>(prepare_encoder_input(cloud, model.config().encoder));
      prep.second = std::make_shared<KdTree>(cloud.points);
    }
    GenerateOptions g = opts.generation;
    g.seed = derive_seed(opts.generation.seed, rec.seed);
    const Generation gen =
        generate_grasp(model, codec, *prep.first, rec.instruction, meta_prompt_for(rec, codec.prompt), {}, g);
    EvalRow row = evaluate_assistant(codec, rec, cloud, *prep.second, gen.assistant, opts);
    row.status = gen.status;
    if (gen.status == GenerationStatus::IncompleteGeneration && row.violation.empty()) row.violation = "incomplete";
    report.rows.push_back(std::move(row));
  }
  report.aggregate = aggregate_rows(report.rows);
  return report;
}

// ---- steering sweep ---------------------------------------------------------------------

struct SweepRow {
  std::size_t k = 0;
  std::size_t n = 0;
  std::size_t invalid = 0;
  double cd_mm = 0.0;
  double q1 = 0.0;
  double proxy_rate = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t skipped = 0;  ///< records with fewer ground-truth contacts than max(k)
};

/// Generation seeded with the first k ground-truth contacts, for each k.
inline SweepResult steering_sweep(const GraspModel& model, const Codec& codec, std::span<const DatasetRecord> records,
                                  CloudCache& clouds, std::span<const std::size_t> k_values, const EvalOptions& opts) {
  check_vocabulary(model.checkpoint(), codec.vocab);
  SweepResult out;
  if (k_values.empty()) return out;
  const std::size_t kmax = *std::max_element(k_values.begin(), k_values.end());
  std::vector<const DatasetRecord*> usable;
  for (const auto& r : records) (r.contacts.size() >= kmax ? usable.push_back(&r) : void(++out.skipped));
  for (std::size_t k : k_values) {
    SweepRow row;
    row.k = k;
    std::size_t valid = 0;
    for (const auto* rec : usable) {
      const PointCloud& cloud = clouds.get(rec->cloud_file);
      const auto enc = prepare_encoder_input(cloud, model.config().encoder);
      const KdTree tree(cloud.points);
      const auto prefix = build_steering_prefix(codec.vocab, rec->contacts, k, codec.params.bounds);
      GenerateOptions g = opts.generation;
      g.seed = derive_seed(opts.generation.seed, rec->seed);
      const Generation gen =
          generate_grasp(model, codec, enc, rec->instruction, meta_prompt_for(*rec, codec.prompt), prefix, g);
      ++row.n;
      const DecodedGrasp d = decode_assistant(codec, gen.assistant);
      if (!d.grammar.ok()) {
        ++row.invalid;
        continue;
      }
      const auto m = geometric_metrics(codec.hand, cloud, tree, *d.pose, rec->pose, opts);
      row.cd_mm += m.cd_mm;
      row.q1 += m.q1;
      row.proxy_rate += m.proxy_stable ? 1.0 : 0.0;
      ++valid;
    }
    if (valid) {
      row.cd_mm /= static_cast<double>(valid);
      row.q1 /= static_cast<double>(valid);
      row.proxy_rate /= static_cast<double>(valid);
    }
    out.rows.push_back(row);
  }
  return out;
}

// ---- baselines --------------------------------------------------------------------------

/// Expected F1 of a uniformly random link subset whose size follows
/// `pred_size_counts` (size -> frequency), against each ground-truth size g
/// in `gt_sizes`, with L registered links: E[2 k g / (L (k + g))].
inline double random_link_f1(std::span<const std::size_t> gt_sizes, const std::map<std::size_t, std::size_t>& pred_size_counts,
                             std::size_t n_links) {
  double total_w = 0.0;
  for (const auto& [k, c] : pred_size_counts) total_w += static_cast<double>(c);
  if (gt_sizes.empty() || total_w == 0.0) return 0.0;
  const double L = static_cast<double>(n_links);
  double sum = 0.0;
  for (std::size_t g : gt_sizes) {
    double e = 0.0;
    for (const auto& [k, c] : pred_size_counts) {
      const double kk = static_cast<double>(k), gg = static_cast<double>(g);
      e += (kk + gg > 0.0 ? 2.0 * kk * gg / (L * (kk + gg)) : 1.0) * static_cast<double>(c) / total_w;
    }
    sum += e;
  }
  return sum / static_cast<double>(gt_sizes.size());
}

/// Pose with every normalized dimension uniform in [-1, 1].
inline GraspPose random_pose(const QuantileNormalizer& norm, Rng& rng) {
  std::vector<double> v(norm.dim());
  for (std::size_t d = 0; d < v.size(); ++d) v[d] = norm.denormalize(d, uniform(rng, -1.0, 1.0));
  return GraspPose::from_vector(v);
}

struct RandomBaseline {
  double cd_mm = 0.0;
  double con = 0.0;
  double q1 = 0.0;
  double proxy_rate = 0.0;
  double pos_acc = 0.0;
};

/// Random poses and random positioned contacts (links from the ground truth
/// count, positions uniform in the bounds), scored like model outputs.
inline RandomBaseline random_baseline(const Codec& codec, std::span<const DatasetRecord> records, CloudCache& clouds,
                                      const EvalOptions& opts, std::uint64_t seed) {
  RandomBaseline b;
  if (records.empty()) return b;
  Rng rng(derive_seed(seed, 0xba5e));
  std::size_t pos_n = 0;
  for (const auto& rec : records) {
    const PointCloud& cloud = clouds.get(rec.cloud_file);
    const KdTree tree(cloud.points);
    const GraspPose pose = random_pose(codec.params.normalizer, rng);
    const auto m = geometric_metrics(codec.hand, cloud, tree, pose, rec.pose, opts);
    b.cd_mm += m.cd_mm;
    b.con += m.con;
    b.q1 += m.q1;
    b.proxy_rate += m.proxy_stable ? 1.0 : 0.0;
    std::vector<PredictedContact> pred;
    for (std::size_t i = 0; i < std::max<std::size_t>(1, rec.contacts.size()); ++i) {
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = uniform(rng, codec.params.bounds.min[a], codec.params.bounds.max[a]);
      pred.push_back({uniform_index(rng, codec.hand.num_links()), p});
    }
    if (auto acc = contact_position_accuracy(codec.hand, pred, pose, opts.position_threshold, opts.position_reference)) {
      b.pos_acc += *acc;
      ++pos_n;
    }
  }
  const double n = static_cast<double>(records.size());
  b.cd_mm /= n, b.con /= n, b.q1 /= n, b.proxy_rate /= n;
  if (pos_n) b.pos_acc /= static_cast<double>(pos_n);
  return b;
}

// ---- output -----------------------------------------------------------------------------

inline nlohmann::json row_to_json(const Vocabulary& vocab, const EvalRow& r) {
  nlohmann::json j = {{"id", r.id}, {"valid", r.valid}};
  if (!r.valid) {
    j["violation"] = r.violation;
  } else {
    j["cd_mm"] = r.geo.cd_mm;
    j["con"] = r.geo.con;
    j["q1"] = r.geo.q1;
    j["pen_m"] = r.geo.pen_m;
    j["proxy_stable"] = r.geo.proxy_stable;
    j["iou"] = r.quality.iou;
    j["precision"] = r.quality.precision;
    j["recall"] = r.quality.recall;
    j["f1"] = r.quality.f1;
    j["pos_acc"] = r.pos_acc ? nlohmann::json(*r.pos_acc) : nlohmann::json(nullptr);
    j["pose"] = r.pose->to_vector();
  }
  j["tokens"] = tokens_to_text(vocab, r.tokens);
  return j;
}

inline nlohmann::json aggregate_to_json(const EvalAggregate& a) {
  nlohmann::json j = {{"n", a.n},
                      {"n_valid", a.n_valid},
                      {"invalid_rate", a.invalid_rate},
                      {"cd_mm", a.cd_mm},
                      {"con", a.con},
                      {"q1", a.q1},
                      {"pen_m", a.pen_m},
                      {"proxy_rate", a.proxy_rate},
                      {"iou", a.quality.iou},
                      {"precision", a.quality.precision},
                      {"recall", a.quality.recall},
                      {"f1", a.quality.f1},
                      {"pos_acc", a.pos_acc ? nlohmann::json(*a.pos_acc) : nlohmann::json(nullptr)},
                      {"p_fid", "n/a"}};
  if (a.diversity) {
    j["delta_t_cm"] = a.diversity->delta_t;
    j["delta_r_deg"] = a.diversity->delta_r;
    j["delta_q_deg"] = a.diversity->delta_q;
  }
  return j;
}

inline void print_report_table(std::ostream& os, const EvalAggregate& a) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%8s %10s %8s %8s %9s %10s %7s %7s %7s %7s %7s %7s %6s\n", "n", "CD(mm)", "Con.", "Q1", "Pen.(mm)",
                "proxy", "IoU", "P", "R", "F1", "posacc", "invalid", "P-FID");
  os << buf;
  std::snprintf(buf, sizeof(buf), "%8zu %10.3f %8.4f %8.4f %9.3f %10.3f %7.3f %7.3f %7.3f %7.3f %7s %7.3f %6s\n", a.n,
                a.cd_mm, a.con, a.q1, 1000.0 * a.pen_m, a.proxy_rate, a.quality.iou, a.quality.precision,
                a.quality.recall, a.quality.f1,
                a.pos_acc ? (std::to_string(*a.pos_acc).substr(0, 5)).c_str() : "n/a", a.invalid_rate, "n/a");
  os << buf;
  if (a.diversity) {
    std::snprintf(buf, sizeof(buf), "diversity: delta_t %.3f cm, delta_r %.3f deg, delta_q %.3f deg\n",
                  a.diversity->delta_t, a.diversity->delta_r, a.diversity->delta_q);
    os << buf;
  }
}

inline void print_sweep_table(std::ostream& os, const SweepResult& s) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%6s %8s %10s %8s %10s %8s\n", "links", "n", "CD(mm)", "Q1", "proxy", "invalid");
  os << buf;
  for (const auto& r : s.rows) {
    std::snprintf(buf, sizeof(buf), "%6zu %8zu %10.3f %8.4f %10.3f %8zu\n", r.k, r.n, r.cd_mm, r.q1, r.proxy_rate,
                  r.invalid);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "skipped (too few contacts): %zu\n", s.skipped);
  os << buf;
}

}  // namespace cgrasp
