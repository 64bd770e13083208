#pragma once

// Run configuration: flat "key = value" text with "include <path>" lines.
// Later assignments win, so a file can include defaults and override a few
// keys. Command-line overrides are applied last with the same parser.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/eval_harness.hpp"
#include "cgrasp/model/config.hpp"
#include "cgrasp/synthetic_data.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

/// Ordered key/value assignments plus the raw text of every file read, in
/// read order, so manifests can echo the configuration verbatim.
struct ConfigSource {
  std::vector<std::pair<std::string, std::string>> assignments;
  std::vector<std::pair<std::string, std::string>> files;  ///< path, contents
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline void read_config_file(const std::filesystem::path& path, ConfigSource& out, std::vector<std::string>& stack) {
  const std::string key = std::filesystem::weakly_canonical(path).string();
  for (const auto& s : stack)
    if (s == key) throw Error(ErrorKind::Format, "config include cycle at " + path.string());
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  out.files.emplace_back(path.string(), text);
  stack.push_back(key);
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (body.rfind("include", 0) == 0 && (body.size() == 7 || body[7] == ' ' || body[7] == '\t')) {
      const std::string inc = trim(std::string_view(body).substr(7));
      if (inc.empty()) throw Error(ErrorKind::Format, where + ": include needs a path");
      std::filesystem::path p(inc);
      if (p.is_relative()) p = path.parent_path() / p;
      read_config_file(p, out, stack);
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Format, where + ": expected key = value");
    const std::string k = trim(std::string_view(body).substr(0, eq));
    const std::string v = trim(std::string_view(body).substr(eq + 1));
    if (k.empty()) throw Error(ErrorKind::Format, where + ": empty key");
    // Relative paths are relative to the file that sets them.
    if (k.rfind("paths.", 0) == 0 && !v.empty() && std::filesystem::path(v).is_relative())
      out.assignments.emplace_back(k, (path.parent_path() / v).lexically_normal().string());
    else
      out.assignments.emplace_back(k, v);
  }
  stack.pop_back();
}

}  // namespace detail

inline ConfigSource read_config_file(const std::filesystem::path& path) {
  ConfigSource src;
  std::vector<std::string> stack;
  detail::read_config_file(path, src, stack);
  return src;
}

/// Parses "key=value" override strings (the form used on the command line).
inline std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& items) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : items) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error(ErrorKind::InvalidArgument, "override must be key=value: " + s);
    out.emplace_back(detail::trim(std::string_view(s).substr(0, eq)), detail::trim(std::string_view(s).substr(eq + 1)));
  }
  return out;
}

struct RunPaths {
  std::string dataset = "data/synthetic";
  std::string checkpoints = "runs/checkpoints";
  std::string reports = "runs/reports";
  std::string meta_prompts;  ///< empty = built-in variants
};

struct CodecSettings {
  std::size_t n_action_bins = kDefaultBins;
  std::size_t n_pos_bins = kDefaultBins;
  double bounds_margin = kDefaultBoundsMargin;
};

struct EvalSettings {
  EvalOptions options;
  double invalid_rate_ceiling = 0.05;
  std::size_t random_baseline_seed = 1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  RunPaths paths;
  DatasetConfig data;
  CodecSettings codec;
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;
  ConfigSource source;  ///< what was read, for echoing

  RunConfig() {
    model.max_sequence_length = 224;
    eval.options.generation.constrain = true;
  }

  void set(const std::string& key, const std::string& value);
  void apply(const std::vector<std::pair<std::string, std::string>>& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }
  /// Every key with its effective value, one "key = value" per line.
  std::string effective_text() const;
  nlohmann::json manifest_json() const;
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  std::istringstream in(v);
  in >> out;
  if (!in || !(in >> std::ws).eof()) throw Error(ErrorKind::InvalidArgument, "bad value for " + key + ": '" + v + "'");
  if constexpr (std::is_unsigned_v<T>)
    if (v.find('-') != std::string::npos) throw Error(ErrorKind::InvalidArgument, key + " must be >= 0");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorKind::InvalidArgument, "bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::size_t> parse_index_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
  }
  return out;
}

inline std::vector<GraspFamily> parse_family_list(const std::string& v) {
  std::vector<GraspFamily> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(family_from_string(item));
  }
  return out;
}

template <typename L>
std::string join(const L& items, auto&& fmt) {
  std::string out;
  for (const auto& x : items) out += (out.empty() ? "" : ",") + fmt(x);
  return out;
}

/// Key table shared by set() and effective_text(): each entry reads and
/// writes one field as text.
struct ConfigKey {
  const char* name;
  std::function<void(RunConfig&, const std::string&, const std::string&)> write;
  std::function<std::string(const RunConfig&)> read;
};

template <typename T>
std::string num_text(T v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

inline const std::vector<ConfigKey>& config_keys() {
  using R = RunConfig;
  using S = const std::string&;
#define CGRASP_KEY(NAME, FIELD, TYPE)                                                   \
  ConfigKey {                                                                           \
    NAME, [](R& c, S k, S v) { c.FIELD = parse_number<TYPE>(k, v); },                   \
        [](const R& c) { return num_text(c.FIELD); }                                    \
  }
#define CGRASP_BOOL(NAME, FIELD)                                                        \
  ConfigKey {                                                                           \
    NAME, [](R& c, S k, S v) { c.FIELD = parse_bool(k, v); },                           \
        [](const R& c) { return std::string(c.FIELD ? "true" : "false"); }              \
  }
#define CGRASP_STR(NAME, FIELD) \
  ConfigKey { NAME, [](R& c, S, S v) { c.FIELD = v; }, [](const R& c) { return c.FIELD; } }
  static const std::vector<ConfigKey> keys = {
      ConfigKey{"seed",
                [](R& c, S k, S v) {
                  c.seed = parse_number<std::uint64_t>(k, v);
                  c.data.seed = c.seed;
                  c.train.seed = c.seed;
                },
                [](const R& c) { return num_text(c.seed); }},
      CGRASP_STR("paths.dataset", paths.dataset),
      CGRASP_STR("paths.checkpoints", paths.checkpoints),
      CGRASP_STR("paths.reports", paths.reports),
      CGRASP_STR("paths.meta_prompts", paths.meta_prompts),
      CGRASP_KEY("data.train", data.train, std::size_t),
      CGRASP_KEY("data.per_validation_split", data.per_validation_split, std::size_t),
      CGRASP_KEY("data.grasps_per_object", data.grasps_per_object, std::size_t),
      CGRASP_KEY("data.n_points", data.n_points, std::size_t),
      CGRASP_KEY("data.seed", data.seed, std::uint64_t),
      ConfigKey{"data.seen_buckets", [](R& c, S k, S v) { c.data.seen_buckets = parse_index_list(k, v); },
                [](const R& c) { return join(c.data.seen_buckets, [](auto x) { return num_text(x); }); }},
      ConfigKey{"data.unseen_buckets", [](R& c, S k, S v) { c.data.unseen_buckets = parse_index_list(k, v); },
                [](const R& c) { return join(c.data.unseen_buckets, [](auto x) { return num_text(x); }); }},
      ConfigKey{"data.seen_families", [](R& c, S, S v) { c.data.seen_families = parse_family_list(v); },
                [](const R& c) { return join(c.data.seen_families, [](auto f) { return to_string(f); }); }},
      ConfigKey{"data.unseen_families", [](R& c, S, S v) { c.data.unseen_families = parse_family_list(v); },
                [](const R& c) { return join(c.data.unseen_families, [](auto f) { return to_string(f); }); }},
      CGRASP_KEY("codec.n_action_bins", codec.n_action_bins, std::size_t),
      CGRASP_KEY("codec.n_pos_bins", codec.n_pos_bins, std::size_t),
      CGRASP_KEY("codec.bounds_margin", codec.bounds_margin, double),
      CGRASP_KEY("codec.p_drop", train.p_drop, double),
      ConfigKey{"codec.dropout_granularity",
                [](R& c, S k, S v) {
                  if (v == "contact") c.train.dropout_granularity = DropoutGranularity::Contact;
                  else if (v == "sequence") c.train.dropout_granularity = DropoutGranularity::Sequence;
                  else throw Error(ErrorKind::InvalidArgument, k + " must be contact or sequence");
                },
                [](const R& c) {
                  return std::string(c.train.dropout_granularity == DropoutGranularity::Contact ? "contact"
                                                                                               : "sequence");
                }},
      CGRASP_KEY("model.d_model", model.d_model, std::size_t),
      CGRASP_KEY("model.n_heads", model.n_heads, std::size_t),
      CGRASP_KEY("model.n_layers", model.n_layers, std::size_t),
      CGRASP_KEY("model.mlp_ratio", model.mlp_ratio, std::size_t),
      CGRASP_KEY("model.max_sequence_length", model.max_sequence_length, std::size_t),
      CGRASP_KEY("model.encoder.n_centroids", model.encoder.n_centroids, std::size_t),
      CGRASP_KEY("model.encoder.neighborhood", model.encoder.neighborhood, std::size_t),
      CGRASP_KEY("model.encoder.feature_width", model.encoder.feature_width, std::size_t),
      CGRASP_KEY("model.encoder.coord_scale", model.encoder.coord_scale, double),
      CGRASP_KEY("train.steps", train.total_steps, std::size_t),
      CGRASP_KEY("train.batch_size", train.batch_size, std::size_t),
      CGRASP_KEY("train.learning_rate", train.learning_rate, double),
      CGRASP_KEY("train.warmup_steps", train.warmup_steps, std::size_t),
      CGRASP_KEY("train.beta1", train.beta1, double),
      CGRASP_KEY("train.beta2", train.beta2, double),
      CGRASP_KEY("train.weight_decay", train.weight_decay, double),
      CGRASP_KEY("train.grad_clip", train.grad_clip, double),
      CGRASP_BOOL("train.loss_on_prompt", train.loss_on_prompt),
      CGRASP_BOOL("train.strip_contacts", train.strip_contacts),
      CGRASP_KEY("train.threads", train.threads, std::size_t),
      CGRASP_KEY("train.log_every", train.log_every, std::size_t),
      CGRASP_KEY("eval.samples_per_link", eval.options.samples_per_link, std::size_t),
      CGRASP_KEY("eval.contact_map_tau", eval.options.contact_map_tau, double),
      CGRASP_KEY("eval.mu", eval.options.friction.mu, double),
      CGRASP_KEY("eval.pyramid_edges", eval.options.friction.pyramid_edges, std::size_t),
      CGRASP_KEY("eval.torque_scale", eval.options.friction.torque_scale, double),
      CGRASP_KEY("eval.n_directions", eval.options.q1.n_directions, std::size_t),
      CGRASP_KEY("eval.q1_refine_seeds", eval.options.q1.refine_seeds, std::size_t),
      CGRASP_KEY("eval.stable_q1_min", eval.options.stability.q1_min, double),
      CGRASP_KEY("eval.stable_pen_max", eval.options.stability.pen_max, double),
      CGRASP_KEY("eval.position_threshold", eval.options.position_threshold, double),
      ConfigKey{"eval.position_reference",
                [](R& c, S k, S v) {
                  if (v == "surface") c.eval.options.position_reference = PositionReference::Surface;
                  else if (v == "origin") c.eval.options.position_reference = PositionReference::Origin;
                  else throw Error(ErrorKind::InvalidArgument, k + " must be surface or origin");
                },
                [](const R& c) {
                  return std::string(c.eval.options.position_reference == PositionReference::Surface ? "surface"
                                                                                                    : "origin");
                }},
      CGRASP_BOOL("eval.constrain", eval.options.generation.constrain),
      CGRASP_KEY("eval.invalid_rate_ceiling", eval.invalid_rate_ceiling, double),
      CGRASP_KEY("eval.random_baseline_seed", eval.random_baseline_seed, std::size_t),
  };
#undef CGRASP_KEY
#undef CGRASP_BOOL
#undef CGRASP_STR
  return keys;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (key == k.name) return k.write(*this, key, value);
  throw Error(ErrorKind::InvalidArgument, "unknown config key '" + key + "'");
}

inline std::string RunConfig::effective_text() const {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.read(*this) + "\n";
  return out;
}

inline nlohmann::json RunConfig::manifest_json() const {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& [p, text] : source.files) files.push_back({{"path", p}, {"text", text}});
  nlohmann::json eff = nlohmann::json::object();
  for (const auto& k : detail::config_keys()) eff[k.name] = k.read(*this);
  return {{"effective", eff}, {"sources", files}};
}

/// Defaults, then the file (if any), then overrides.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  RunConfig c;
  if (!path.empty()) {
    c.source = read_config_file(path);
    c.apply(c.source.assignments);
  }
  c.apply(overrides);
  c.source.assignments.insert(c.source.assignments.end(), overrides.begin(), overrides.end());
  return c;
}

}  // namespace cgrasp
