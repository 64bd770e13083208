#pragma once

// Discrete grammar shared by training and decoding: vocabulary, quantile
// normalization, action/position binning, contact sequences with position
// dropout, steering prefixes, and grammar validation.
//
// Bin convention (actions in normalized space, positions per axis):
//   index  = clamp(floor(t * N), 0, N - 1)   with t in [0, 1]
//   decode = bin center, (index + 0.5) / N
//
// Assistant-span grammar:
//   contact_start (link (pos pos pos)?)* contact_end action_start action_bin{D} action_end
// Each link appears at most once.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/geometry.hpp"
#include "cgrasp/hand_model.hpp"
#include "cgrasp/random.hpp"

namespace cgrasp {

using TokenId = std::uint32_t;

inline constexpr std::size_t kDefaultBins = 256;
inline constexpr int kCodecFormatVersion = 1;

enum class TokenKind { Special, Text, ActionBin, PosBin, Link };

namespace tok {
inline constexpr std::string_view kUnk = "<|unk|>";
inline constexpr std::string_view kImStart = "<|im_start|>";
inline constexpr std::string_view kImEnd = "<|im_end|>";
inline constexpr std::string_view kVisionStart = "<|vision_start|>";
inline constexpr std::string_view kVisionPad = "<|vision_pad|>";
inline constexpr std::string_view kVisionEnd = "<|vision_end|>";
inline constexpr std::string_view kContactStart = "<|contact_start|>";
inline constexpr std::string_view kContactEnd = "<|contact_end|>";
inline constexpr std::string_view kActionStart = "<|action_start|>";
inline constexpr std::string_view kActionEnd = "<|action_end|>";
}  // namespace tok

/// Lowercased word-level split: alphanumeric runs and single punctuation marks.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '_' || ch == '-') {
      cur.push_back(static_cast<char>(std::tolower(c)));
      continue;
    }
    if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    if (!std::isspace(c)) out.emplace_back(1, ch);
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string link_token_name(std::string_view link) { return "<|rh_" + std::string(link) + "|>"; }

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Special tokens, then sorted unique words, action bins, position bins, and one token per hand link.
  Vocabulary(const HandModel& hand, std::vector<std::string> words, std::size_t n_action_bins = kDefaultBins,
             std::size_t n_pos_bins = kDefaultBins)
      : n_action_(n_action_bins), n_pos_(n_pos_bins) {
    if (n_action_ < 2 || n_pos_ < 2) throw Error(ErrorKind::InvalidArgument, "need at least 2 bins");
    for (auto s : {tok::kUnk, tok::kImStart, tok::kImEnd, tok::kVisionStart, tok::kVisionPad, tok::kVisionEnd,
                   tok::kContactStart, tok::kContactEnd, tok::kActionStart, tok::kActionEnd})
      add(std::string(s), TokenKind::Special, 0);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto& w : words) {
      if (w.empty() || w.find("<|") != std::string::npos)
        throw Error(ErrorKind::InvalidArgument, "invalid text token '" + w + "'");
      add(std::move(w), TokenKind::Text, 0);
    }
    action_base_ = static_cast<TokenId>(names_.size());
    for (std::size_t i = 0; i < n_action_; ++i)
      add("<|action_bin_" + std::to_string(i) + "|>", TokenKind::ActionBin, i);
    pos_base_ = static_cast<TokenId>(names_.size());
    for (std::size_t i = 0; i < n_pos_; ++i) add("<|pos_bin_" + std::to_string(i) + "|>", TokenKind::PosBin, i);
    link_base_ = static_cast<TokenId>(names_.size());
    for (std::size_t l = 0; l < hand.num_links(); ++l)
      add(link_token_name(hand.links()[l].name), TokenKind::Link, l);
  }

  std::size_t size() const { return names_.size(); }
  std::size_t n_action_bins() const { return n_action_; }
  std::size_t n_pos_bins() const { return n_pos_; }
  std::size_t n_links() const { return names_.size() - link_base_; }

  const std::string& name(TokenId id) const { return names_.at(id); }
  TokenKind kind(TokenId id) const { return kinds_.at(id); }
  /// Bin index for bin tokens, link index for link tokens.
  std::size_t payload(TokenId id) const { return payload_.at(id); }

  std::optional<TokenId> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view name) const {
    auto f = find(name);
    if (!f) throw Error(ErrorKind::GrammarError, "unknown token " + std::string(name));
    return *f;
  }

  TokenId action_bin(std::size_t i) const { return action_base_ + static_cast<TokenId>(i); }
  TokenId pos_bin(std::size_t i) const { return pos_base_ + static_cast<TokenId>(i); }
  TokenId link_token(std::size_t link) const {
    if (link >= n_links()) throw Error(ErrorKind::UnknownLink, "no token for link " + std::to_string(link));
    return link_base_ + static_cast<TokenId>(link);
  }

  TokenId unk() const { return 0; }
  TokenId im_start() const { return 1; }
  TokenId im_end() const { return 2; }
  TokenId vision_start() const { return 3; }
  TokenId vision_pad() const { return 4; }
  TokenId vision_end() const { return 5; }
  TokenId contact_start() const { return 6; }
  TokenId contact_end() const { return 7; }
  TokenId action_start() const { return 8; }
  TokenId action_end() const { return 9; }

  std::vector<TokenId> encode_text(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& w : split_words(text)) out.push_back(find(w).value_or(unk()));
    return out;
  }

  bool covers(std::string_view text) const {
    for (const auto& w : split_words(text))
      if (!find(w)) return false;
    return true;
  }

  /// FNV-1a over all token names in id order.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& n : names_) {
      for (unsigned char c : n) h = (h ^ c) * 0x100000001b3ULL;
      h = (h ^ 0xffU) * 0x100000001b3ULL;
    }
    return h;
  }

  const std::vector<std::string>& names() const { return names_; }

 private:
  void add(std::string name, TokenKind kind, std::size_t payload) {
    if (index_.count(name)) throw Error(ErrorKind::InvalidArgument, "duplicate token " + name);
    index_.emplace(name, static_cast<TokenId>(names_.size()));
    names_.push_back(std::move(name));
    kinds_.push_back(kind);
    payload_.push_back(payload);
  }

  std::vector<std::string> names_;
  std::vector<TokenKind> kinds_;
  std::vector<std::size_t> payload_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t n_action_ = kDefaultBins, n_pos_ = kDefaultBins;
  TokenId action_base_ = 0, pos_base_ = 0, link_base_ = 0;
};

// ---- binning -------------------------------------------------------------------

inline std::size_t bin_index(double t, std::size_t n) {
  const double f = std::floor(t * static_cast<double>(n));
  if (!(f >= 0.0)) return 0;  // also catches NaN
  return std::min(static_cast<std::size_t>(f), n - 1);
}

inline double bin_center(std::size_t bin, std::size_t n) {
  return (static_cast<double>(bin) + 0.5) / static_cast<double>(n);
}

// ---- quantile normalizer ---------------------------------------------------------

/// Linear-interpolation percentile of an ascending-sorted sample
/// (position p * (n - 1) between order statistics).
inline double sorted_percentile(std::span<const double> sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct QuantileNormalizer {
  std::vector<double> q01;
  std::vector<double> q99;

  std::size_t dim() const { return q01.size(); }

  double normalize(std::size_t d, double x) const {
    return std::clamp(2.0 * (x - q01[d]) / (q99[d] - q01[d]) - 1.0, -1.0, 1.0);
  }
  double denormalize(std::size_t d, double v) const { return q01[d] + 0.5 * (v + 1.0) * (q99[d] - q01[d]); }
};

struct NormalizerFit {
  QuantileNormalizer normalizer;
  std::vector<std::string> warnings;
};

inline NormalizerFit fit_action_normalizer(std::span<const GraspPose> dataset) {
  if (dataset.size() < 2) throw Error(ErrorKind::InsufficientSamples, "normalizer fit needs >= 2 grasps");
  const std::size_t dim = dataset.front().dim();
  NormalizerFit fit;
  if (dataset.size() < 100) fit.warnings.push_back("fewer than 100 samples; percentiles are coarse");
  std::vector<std::vector<double>> cols(dim);
  for (const auto& g : dataset) {
    if (g.dim() != dim) throw Error(ErrorKind::InvalidPose, "grasps differ in dimension");
    const auto v = g.to_vector();
    for (std::size_t d = 0; d < dim; ++d) cols[d].push_back(v[d]);
  }
  for (std::size_t d = 0; d < dim; ++d) {
    std::sort(cols[d].begin(), cols[d].end());
    double lo = sorted_percentile(cols[d], 0.01);
    double hi = sorted_percentile(cols[d], 0.99);
    if (!(lo < hi)) {
      fit.warnings.push_back("dimension " + std::to_string(d) + " is degenerate; widened by 1e-6");
      lo -= 0.5e-6;
      hi += 0.5e-6;
    }
    fit.normalizer.q01.push_back(lo);
    fit.normalizer.q99.push_back(hi);
  }
  return fit;
}

// ---- position bounds --------------------------------------------------------------

struct PositionBounds {
  Vec3 min = Vec3::Constant(-1.0);
  Vec3 max = Vec3::Constant(1.0);
};

inline constexpr double kDefaultBoundsMargin = 0.05;

/// Training-set min/max per axis, each side expanded by `margin` times the range.
inline PositionBounds fit_position_bounds(std::span<const Vec3> positions, double margin = kDefaultBoundsMargin) {
  if (positions.empty()) throw Error(ErrorKind::EmptyInput, "no contact positions to fit bounds");
  Vec3 lo = positions.front(), hi = positions.front();
  for (const auto& p : positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  for (int a = 0; a < 3; ++a) {
    double pad = margin * (hi[a] - lo[a]);
    if (!(pad > 0.0)) pad = 1e-3;
    lo[a] -= pad;
    hi[a] += pad;
  }
  return {lo, hi};
}

// ---- codec parameter file -----------------------------------------------------------

struct CodecParams {
  QuantileNormalizer normalizer;
  PositionBounds bounds;
  std::size_t n_action_bins = kDefaultBins;
  std::size_t n_pos_bins = kDefaultBins;
};

inline nlohmann::json codec_params_to_json(const CodecParams& p) {
  return {{"format_version", kCodecFormatVersion},
          {"n_action_bins", p.n_action_bins},
          {"n_pos_bins", p.n_pos_bins},
          {"action", {{"q01", p.normalizer.q01}, {"q99", p.normalizer.q99}}},
          {"position",
           {{"min", {p.bounds.min.x(), p.bounds.min.y(), p.bounds.min.z()}},
            {"max", {p.bounds.max.x(), p.bounds.max.y(), p.bounds.max.z()}}}}};
}

inline CodecParams codec_params_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kCodecFormatVersion)
      throw Error(ErrorKind::Format, "unsupported codec format_version");
    CodecParams p;
    p.n_action_bins = j.at("n_action_bins").get<std::size_t>();
    p.n_pos_bins = j.at("n_pos_bins").get<std::size_t>();
    p.normalizer.q01 = j.at("action").at("q01").get<std::vector<double>>();
    p.normalizer.q99 = j.at("action").at("q99").get<std::vector<double>>();
    if (p.normalizer.q01.size() != p.normalizer.q99.size())
      throw Error(ErrorKind::Format, "q01/q99 length mismatch");
    for (std::size_t d = 0; d < p.normalizer.dim(); ++d)
      if (!(p.normalizer.q01[d] < p.normalizer.q99[d])) throw Error(ErrorKind::Format, "q01 must be < q99");
    const auto mn = j.at("position").at("min").get<std::vector<double>>();
    const auto mx = j.at("position").at("max").get<std::vector<double>>();
    if (mn.size() != 3 || mx.size() != 3) throw Error(ErrorKind::Format, "position bounds must be 3-vectors");
    p.bounds = {{mn[0], mn[1], mn[2]}, {mx[0], mx[1], mx[2]}};
    if ((p.bounds.min.array() >= p.bounds.max.array()).any())
      throw Error(ErrorKind::Format, "position min must be < max");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("codec params: ") + e.what());
  }
}

inline void save_codec_params(const CodecParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Format, "cannot write " + path);
  out << codec_params_to_json(p).dump(2) << '\n';
}

inline CodecParams load_codec_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ": " + e.what());
  }
  return codec_params_from_json(j);
}

// ---- action and position tokens ---------------------------------------------------------

inline std::vector<TokenId> encode_action(const Vocabulary& vocab, const GraspPose& pose,
                                          const QuantileNormalizer& norm) {
  const auto v = pose.to_vector();
  if (v.size() != norm.dim()) throw Error(ErrorKind::InvalidPose, "pose dimension differs from normalizer");
  std::vector<TokenId> out;
  out.reserve(v.size());
  for (std::size_t d = 0; d < v.size(); ++d)
    out.push_back(vocab.action_bin(bin_index(0.5 * (norm.normalize(d, v[d]) + 1.0), vocab.n_action_bins())));
  return out;
}

/// Normalized-space value of an action bin center.
inline double action_bin_value(std::size_t bin, std::size_t n) { return 2.0 * bin_center(bin, n) - 1.0; }

inline GraspPose decode_action(const Vocabulary& vocab, std::span<const TokenId> tokens,
                               const QuantileNormalizer& norm) {
  if (tokens.size() != norm.dim())
    throw Error(ErrorKind::GrammarError, "expected " + std::to_string(norm.dim()) + " action tokens, got " +
                                             std::to_string(tokens.size()));
  std::vector<double> v(tokens.size());
  for (std::size_t d = 0; d < tokens.size(); ++d) {
    if (tokens[d] >= vocab.size() || vocab.kind(tokens[d]) != TokenKind::ActionBin)
      throw Error(ErrorKind::GrammarError, "non-action token in action span");
    v[d] = norm.denormalize(d, action_bin_value(vocab.payload(tokens[d]), vocab.n_action_bins()));
  }
  return GraspPose::from_vector(v);
}

inline std::array<TokenId, 3> encode_position(const Vocabulary& vocab, const Vec3& p, const PositionBounds& b) {
  std::array<TokenId, 3> out{};
  for (int a = 0; a < 3; ++a)
    out[a] = vocab.pos_bin(bin_index((p[a] - b.min[a]) / (b.max[a] - b.min[a]), vocab.n_pos_bins()));
  return out;
}

inline Vec3 decode_position(const Vocabulary& vocab, std::span<const TokenId> tokens, const PositionBounds& b) {
  if (tokens.size() != 3) throw Error(ErrorKind::GrammarError, "position needs exactly 3 tokens");
  Vec3 p;
  for (int a = 0; a < 3; ++a) {
    if (tokens[a] >= vocab.size() || vocab.kind(tokens[a]) != TokenKind::PosBin)
      throw Error(ErrorKind::GrammarError, "non-position token in position triple");
    p[a] = b.min[a] + bin_center(vocab.payload(tokens[a]), vocab.n_pos_bins()) * (b.max[a] - b.min[a]);
  }
  return p;
}

// ---- contact tokens ----------------------------------------------------------------------

enum class DropoutGranularity { Contact, Sequence };

/// contact_start, then per contact (canonical order) its link token and,
/// unless dropped, its 3 position tokens; contact_end.
inline std::vector<TokenId> encode_contacts(const Vocabulary& vocab, const ContactSet& contacts,
                                            const PositionBounds& bounds, double p_drop, Rng& rng,
                                            DropoutGranularity granularity = DropoutGranularity::Contact) {
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw Error(ErrorKind::InvalidArgument, "p_drop must lie in [0, 1]");
  std::vector<TokenId> out{vocab.contact_start()};
  const bool drop_all = granularity == DropoutGranularity::Sequence && bernoulli(rng, p_drop);
  for (const auto& rec : contacts) {
    out.push_back(vocab.link_token(rec.link));
    const bool drop = granularity == DropoutGranularity::Sequence ? drop_all : bernoulli(rng, p_drop);
    if (drop) continue;
    const auto pos = encode_position(vocab, rec.position, bounds);
    out.insert(out.end(), pos.begin(), pos.end());
  }
  out.push_back(vocab.contact_end());
  return out;
}

/// contact_start plus the first k contacts with positions; left open so the model continues.
inline std::vector<TokenId> build_steering_prefix(const Vocabulary& vocab, const ContactSet& partial, std::size_t k,
                                                  const PositionBounds& bounds) {
  if (k > partial.size())
    throw Error(ErrorKind::InvalidSteering,
                "requested " + std::to_string(k) + " steering links but only " + std::to_string(partial.size()) +
                    " contacts are available");
  std::vector<TokenId> out{vocab.contact_start()};
  for (std::size_t i = 0; i < k; ++i) {
    const auto& rec = partial.records()[i];
    out.push_back(vocab.link_token(rec.link));
    const auto pos = encode_position(vocab, rec.position, bounds);
    out.insert(out.end(), pos.begin(), pos.end());
  }
  return out;
}

// ---- sequences --------------------------------------------------------------------------

/// Span lengths of [text_pre, pc, text_post, contact, action].
struct SegmentLayout {
  std::size_t text_pre = 0;
  std::size_t pc = 0;
  std::size_t text_post = 0;
  std::size_t contact = 0;
  std::size_t action = 0;

  std::size_t pc_begin() const { return text_pre; }
  std::size_t pc_end() const { return text_pre + pc; }
  std::size_t contact_begin() const { return text_pre + pc + text_post; }
  std::size_t action_begin() const { return contact_begin() + contact; }
  std::size_t total() const { return text_pre + pc + text_post + contact + action; }

  bool operator==(const SegmentLayout&) const = default;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  SegmentLayout layout;

  std::span<const TokenId> assistant() const {
    return std::span<const TokenId>(ids).subspan(layout.contact_begin());
  }
};

struct PromptTemplate {
  std::string system = "You are a helpful assistant for robot grasping.";
  std::vector<std::string> meta_prompts = {
      "First work out which hand links touch the object and where, then output the grasp.",
      "List the contacts between the hand links and the object, then give the hand pose.",
      "Reason about where each finger link meets the surface before you plan the grasp.",
      "Name the touching links with their surface positions, then produce the grasp configuration.",
      "Plan the contacts on the object first and finish with the hand pose.",
  };
  std::size_t visual_tokens = 16;
};

/// One meta-prompt per non-empty line; lines starting with '#' are comments.
inline std::vector<std::string> load_meta_prompts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open meta-prompt file " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  if (out.empty()) throw Error(ErrorKind::Format, "meta-prompt file " + path + " has no prompts");
  return out;
}

/// ChatML-style prompt up to (and including) "assistant"; the layout covers
/// text_pre, pc and text_post.
inline TokenSequence build_prompt(const Vocabulary& vocab, const PromptTemplate& prompt, std::string_view instruction,
                                  std::size_t meta_prompt_id) {
  if (prompt.meta_prompts.empty()) throw Error(ErrorKind::InvalidArgument, "no meta-prompts configured");
  TokenSequence seq;
  auto append = [&](const std::vector<TokenId>& t) { seq.ids.insert(seq.ids.end(), t.begin(), t.end()); };
  seq.ids.push_back(vocab.im_start());
  append(vocab.encode_text("system"));
  append(vocab.encode_text(prompt.system));
  seq.ids.push_back(vocab.im_end());
  seq.ids.push_back(vocab.im_start());
  append(vocab.encode_text("user"));
  seq.ids.push_back(vocab.vision_start());
  seq.layout.text_pre = seq.ids.size();
  seq.ids.insert(seq.ids.end(), prompt.visual_tokens, vocab.vision_pad());
  seq.layout.pc = prompt.visual_tokens;
  const std::size_t post_begin = seq.ids.size();
  seq.ids.push_back(vocab.vision_end());
  append(vocab.encode_text(prompt.meta_prompts[meta_prompt_id % prompt.meta_prompts.size()]));
  append(vocab.encode_text("Query:"));
  append(vocab.encode_text(instruction));
  seq.ids.push_back(vocab.im_end());
  seq.ids.push_back(vocab.im_start());
  append(vocab.encode_text("assistant"));
  seq.layout.text_post = seq.ids.size() - post_begin;
  return seq;
}

/// Words any prompt built from `prompt` can contain (instruction words excluded).
inline std::vector<std::string> prompt_words(const PromptTemplate& prompt) {
  std::vector<std::string> out = {"system", "user", "assistant", "query", ":"};
  for (const auto& w : split_words(prompt.system)) out.push_back(w);
  for (const auto& m : prompt.meta_prompts)
    for (const auto& w : split_words(m)) out.push_back(w);
  return out;
}

struct SequenceOptions {
  double p_drop = 0.0;
  DropoutGranularity granularity = DropoutGranularity::Contact;
  std::size_t meta_prompt_id = 0;
};

inline TokenSequence build_training_sequence(const Vocabulary& vocab, const PromptTemplate& prompt,
                                             std::string_view instruction, const ContactSet& contacts,
                                             const GraspPose& pose, const CodecParams& codec,
                                             const SequenceOptions& opts, Rng& rng) {
  TokenSequence seq = build_prompt(vocab, prompt, instruction, opts.meta_prompt_id);
  const auto ct = encode_contacts(vocab, contacts, codec.bounds, opts.p_drop, rng, opts.granularity);
  seq.ids.insert(seq.ids.end(), ct.begin(), ct.end());
  seq.layout.contact = ct.size();
  seq.ids.push_back(vocab.action_start());
  const auto at = encode_action(vocab, pose, codec.normalizer);
  seq.ids.insert(seq.ids.end(), at.begin(), at.end());
  seq.ids.push_back(vocab.action_end());
  seq.layout.action = at.size() + 2;
  return seq;
}

// ---- grammar -------------------------------------------------------------------------------

struct ParsedContact {
  std::size_t link = 0;
  std::optional<std::array<TokenId, 3>> position;
};

struct GrammarParse {
  std::vector<ParsedContact> contacts;
  std::vector<TokenId> action;
};

struct GrammarViolation {
  std::size_t position = 0;
  std::string message;
};

struct GrammarResult {
  std::optional<GrammarParse> parse;
  std::vector<GrammarViolation> violations;

  bool ok() const { return parse.has_value(); }
};

/// Parses an assistant span; reports the first violation when it does not conform.
inline GrammarResult validate_grammar(const Vocabulary& vocab, std::span<const TokenId> seq, std::size_t action_dim) {
  GrammarResult res;
  auto fail = [&](std::size_t pos, std::string msg) {
    res.violations.push_back({pos, std::move(msg)});
    return res;
  };
  auto kind_at = [&](std::size_t i) -> std::optional<TokenKind> {
    if (i >= seq.size() || seq[i] >= vocab.size()) return std::nullopt;
    return vocab.kind(seq[i]);
  };
  std::size_t i = 0;
  if (seq.empty() || seq[0] != vocab.contact_start()) return fail(0, "expected contact_start");
  ++i;
  GrammarParse parse;
  std::vector<bool> seen(vocab.n_links(), false);
  while (true) {
    if (i >= seq.size()) return fail(i, "unterminated contact block");
    if (seq[i] == vocab.contact_end()) {
      ++i;
      break;
    }
    if (kind_at(i) != TokenKind::Link) return fail(i, "expected link token or contact_end");
    ParsedContact pc{vocab.payload(seq[i]), std::nullopt};
    if (seen[pc.link]) return fail(i, "duplicate link " + vocab.name(seq[i]));
    seen[pc.link] = true;
    ++i;
    std::size_t npos = 0;
    while (npos < 3 && kind_at(i + npos) == TokenKind::PosBin) ++npos;
    if (npos == 3) {
      pc.position = std::array<TokenId, 3>{seq[i], seq[i + 1], seq[i + 2]};
      i += 3;
      if (kind_at(i) == TokenKind::PosBin) return fail(i, "more than 3 position tokens");
    } else if (npos > 0) {
      return fail(i + npos, "incomplete position triple");
    }
    parse.contacts.push_back(pc);
  }
  if (i >= seq.size() || seq[i] != vocab.action_start()) return fail(i, "expected action_start");
  ++i;
  const std::size_t a0 = i;
  while (kind_at(i) == TokenKind::ActionBin) ++i;
  const std::size_t n_action = i - a0;
  if (i >= seq.size() || seq[i] != vocab.action_end()) {
    if (i >= seq.size()) return fail(i, "unterminated action block");
    return fail(i, "unexpected token in action block");
  }
  if (n_action != action_dim)
    return fail(a0, "action length != D (got " + std::to_string(n_action) + ", D = " + std::to_string(action_dim) + ")");
  parse.action.assign(seq.begin() + static_cast<std::ptrdiff_t>(a0), seq.begin() + static_cast<std::ptrdiff_t>(i));
  ++i;
  if (i != seq.size()) return fail(i, "trailing tokens after action_end");
  res.parse = std::move(parse);
  return res;
}

/// Incremental form of the grammar used to constrain decoding.
class GrammarState {
 public:
  GrammarState(const Vocabulary& vocab, std::size_t action_dim)
      : vocab_(&vocab), action_dim_(action_dim), seen_(vocab.n_links(), false) {}

  bool done() const { return phase_ == Phase::Done; }

  bool allows(TokenId t) const {
    if (t >= vocab_->size()) return false;
    const TokenKind k = vocab_->kind(t);
    switch (phase_) {
      case Phase::Start: return t == vocab_->contact_start();
      case Phase::Contacts:
        if (pos_count_ > 0) return k == TokenKind::PosBin;
        if (k == TokenKind::Link) return !seen_[vocab_->payload(t)];
        if (k == TokenKind::PosBin) return after_link_;
        return t == vocab_->contact_end();
      case Phase::ActionStart: return t == vocab_->action_start();
      case Phase::Actions:
        return action_count_ < action_dim_ ? k == TokenKind::ActionBin : t == vocab_->action_end();
      case Phase::Done: return false;
    }
    return false;
  }

  /// Throws GrammarError when t is not allowed.
  void advance(TokenId t) {
    if (!allows(t)) throw Error(ErrorKind::GrammarError, "token not allowed here: " + vocab_->name(t));
    const TokenKind k = vocab_->kind(t);
    switch (phase_) {
      case Phase::Start: phase_ = Phase::Contacts; break;
      case Phase::Contacts:
        if (k == TokenKind::PosBin) {
          pos_count_ = (pos_count_ + 1) % 3;
          after_link_ = false;
        } else if (k == TokenKind::Link) {
          seen_[vocab_->payload(t)] = true;
          after_link_ = true;
        } else {
          phase_ = Phase::ActionStart;
        }
        break;
      case Phase::ActionStart: phase_ = Phase::Actions; break;
      case Phase::Actions:
        if (k == TokenKind::ActionBin) ++action_count_;
        else phase_ = Phase::Done;
        break;
      case Phase::Done: break;
    }
  }

 private:
  enum class Phase { Start, Contacts, ActionStart, Actions, Done };
  const Vocabulary* vocab_;
  std::size_t action_dim_;
  std::vector<bool> seen_;
  Phase phase_ = Phase::Start;
  std::size_t pos_count_ = 0;  // position tokens still owed modulo 3
  bool after_link_ = false;
  std::size_t action_count_ = 0;
};

/// Decoded contact with an optional position (absent when its triple was dropped).
struct PredictedContact {
  std::size_t link = 0;
  std::optional<Vec3> position;
};

inline std::vector<PredictedContact> decode_contacts(const Vocabulary& vocab, const GrammarParse& parse,
                                                     const PositionBounds& bounds) {
  std::vector<PredictedContact> out;
  for (const auto& c : parse.contacts) {
    PredictedContact p{c.link, std::nullopt};
    if (c.position) p.position = decode_position(vocab, *c.position, bounds);
    out.push_back(p);
  }
  return out;
}

// ---- training-time sequence edits --------------------------------------------------------------

/// Drops position triples from the contact span of an already-encoded sequence.
inline TokenSequence apply_position_dropout(const Vocabulary& vocab, const TokenSequence& seq, double p_drop, Rng& rng,
                                            DropoutGranularity granularity = DropoutGranularity::Contact) {
  if (p_drop <= 0.0) return seq;
  TokenSequence out;
  out.layout = seq.layout;
  const std::size_t c0 = seq.layout.contact_begin(), c1 = seq.layout.action_begin();
  out.ids.assign(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(c0));
  const bool drop_all = granularity == DropoutGranularity::Sequence && bernoulli(rng, p_drop);
  for (std::size_t i = c0; i < c1;) {
    const TokenId t = seq.ids[i];
    out.ids.push_back(t);
    ++i;
    if (vocab.kind(t) != TokenKind::Link) continue;
    if (i + 3 <= c1 && vocab.kind(seq.ids[i]) == TokenKind::PosBin) {
      const bool drop = granularity == DropoutGranularity::Sequence ? drop_all : bernoulli(rng, p_drop);
      if (!drop) out.ids.insert(out.ids.end(), seq.ids.begin() + static_cast<std::ptrdiff_t>(i),
                                seq.ids.begin() + static_cast<std::ptrdiff_t>(i + 3));
      i += 3;
    }
  }
  out.layout.contact = out.ids.size() - c0;
  out.ids.insert(out.ids.end(), seq.ids.begin() + static_cast<std::ptrdiff_t>(c1), seq.ids.end());
  return out;
}

/// Replaces the contact span with an empty contact block.
inline TokenSequence strip_contacts(const Vocabulary& vocab, const TokenSequence& seq) {
  TokenSequence out;
  out.layout = seq.layout;
  const std::size_t c0 = seq.layout.contact_begin(), c1 = seq.layout.action_begin();
  out.ids.assign(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(c0));
  out.ids.push_back(vocab.contact_start());
  out.ids.push_back(vocab.contact_end());
  out.layout.contact = 2;
  out.ids.insert(out.ids.end(), seq.ids.begin() + static_cast<std::ptrdiff_t>(c1), seq.ids.end());
  return out;
}

// ---- serialization ------------------------------------------------------------------------------

inline std::string tokens_to_text(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.name(ids[i]);
  }
  return out;
}

inline std::vector<TokenId> tokens_from_text(const Vocabulary& vocab, std::string_view text) {
  std::vector<TokenId> out;
  std::istringstream ss{std::string(text)};
  std::string name;
  while (ss >> name) out.push_back(vocab.id(name));
  return out;
}

/// Little-endian 32-bit unsigned ids.
inline void write_token_ids(std::ostream& out, std::span<const TokenId> ids) {
  for (TokenId id : ids) {
    const unsigned char b[4] = {static_cast<unsigned char>(id), static_cast<unsigned char>(id >> 8),
                                static_cast<unsigned char>(id >> 16), static_cast<unsigned char>(id >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

inline std::vector<TokenId> read_token_ids(std::istream& in, std::size_t count) {
  std::vector<TokenId> out(count);
  for (auto& id : out) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error(ErrorKind::Format, "truncated token id stream");
    id = static_cast<TokenId>(b[0]) | (static_cast<TokenId>(b[1]) << 8) | (static_cast<TokenId>(b[2]) << 16) |
         (static_cast<TokenId>(b[3]) << 24);
  }
  return out;
}

}  // namespace cgrasp
