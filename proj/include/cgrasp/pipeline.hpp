#pragma once

// Glue between dataset records, the token codec, and the model: vocabulary
// assembly, codec fitting, record encoding, and a checkpoint-backed model.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cgrasp/geometry.hpp"
#include "cgrasp/hand_model.hpp"
#include "cgrasp/model/checkpoint.hpp"
#include "cgrasp/model/generate.hpp"
#include "cgrasp/model/network.hpp"
#include "cgrasp/synthetic_data.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

inline Vocabulary make_vocabulary(const HandModel& hand, const PromptTemplate& prompt,
                                  std::size_t n_action_bins = kDefaultBins, std::size_t n_pos_bins = kDefaultBins) {
  auto words = prompt_words(prompt);
  const auto inst = instruction_words();
  words.insert(words.end(), inst.begin(), inst.end());
  return Vocabulary(hand, std::move(words), n_action_bins, n_pos_bins);
}

struct Codec {
  HandModel hand;
  PromptTemplate prompt;
  Vocabulary vocab;
  CodecParams params;

  Codec(HandModel h, PromptTemplate p, CodecParams c)
      : hand(std::move(h)), prompt(std::move(p)),
        vocab(make_vocabulary(hand, prompt, c.n_action_bins, c.n_pos_bins)), params(std::move(c)) {}
};

struct CodecFit {
  CodecParams params;
  std::vector<std::string> warnings;
};

/// Action quantiles over the training poses; position bounds over the
/// training contact positions.
inline CodecFit fit_codec(std::span<const DatasetRecord> train, std::size_t n_action_bins = kDefaultBins,
                          std::size_t n_pos_bins = kDefaultBins, double margin = kDefaultBoundsMargin) {
  std::vector<GraspPose> poses;
  std::vector<Vec3> positions;
  for (const auto& r : train) {
    poses.push_back(r.pose);
    for (const auto& c : r.contacts) positions.push_back(c.position);
  }
  auto nf = fit_action_normalizer(poses);
  CodecFit out;
  out.params.normalizer = std::move(nf.normalizer);
  out.warnings = std::move(nf.warnings);
  out.params.bounds = fit_position_bounds(positions, margin);
  out.params.n_action_bins = n_action_bins;
  out.params.n_pos_bins = n_pos_bins;
  return out;
}

/// Meta-prompt variant assigned to a record.
inline std::size_t meta_prompt_for(const DatasetRecord& r, const PromptTemplate& prompt) {
  return static_cast<std::size_t>(r.seed % prompt.meta_prompts.size());
}

inline TokenSequence encode_record(const Codec& codec, const DatasetRecord& r, const SequenceOptions& opts, Rng& rng) {
  return build_training_sequence(codec.vocab, codec.prompt, r.instruction, r.contacts, r.pose, codec.params, opts, rng);
}

inline TokenSequence encode_record(const Codec& codec, const DatasetRecord& r) {
  Rng rng(0);
  SequenceOptions opts;
  opts.meta_prompt_id = meta_prompt_for(r, codec.prompt);
  return encode_record(codec, r, opts, rng);
}

/// Frozen network built from a checkpoint.
class GraspModel {
 public:
  explicit GraspModel(Checkpoint ck)
      : ck_(std::move(ck)), layout_(ck_.config), net_(std::make_unique<Network<float>>(ck_.config, layout_, ck_.params)) {}
  GraspModel(const GraspModel&) = delete;
  GraspModel& operator=(const GraspModel&) = delete;

  const Checkpoint& checkpoint() const { return ck_; }
  const ModelConfig& config() const { return ck_.config; }
  const Network<float>& network() const { return *net_; }

 private:
  Checkpoint ck_;
  ParamLayout layout_;
  std::unique_ptr<Network<float>> net_;
};

struct DecodedGrasp {
  GrammarResult grammar;
  std::vector<PredictedContact> contacts;  ///< empty unless the grammar parsed
  std::optional<GraspPose> pose;
};

inline DecodedGrasp decode_assistant(const Codec& codec, std::span<const TokenId> assistant) {
  DecodedGrasp d;
  d.grammar = validate_grammar(codec.vocab, assistant, codec.hand.action_dim());
  if (!d.grammar.ok()) return d;
  d.contacts = decode_contacts(codec.vocab, *d.grammar.parse, codec.params.bounds);
  d.pose = decode_action(codec.vocab, d.grammar.parse->action, codec.params.normalizer);
  return d;
}

/// Runs generation for one object and instruction.
inline Generation generate_grasp(const GraspModel& model, const Codec& codec, const EncoderInput& object,
                                 std::string_view instruction, std::size_t meta_prompt_id,
                                 std::span<const TokenId> steering, const GenerateOptions& opts) {
  check_vocabulary(model.checkpoint(), codec.vocab);
  PromptTemplate p = codec.prompt;
  p.visual_tokens = model.config().encoder.n_centroids;
  const TokenSequence prompt = build_prompt(codec.vocab, p, instruction, meta_prompt_id);
  return generate(model.network(), codec.vocab, prompt, object, steering, opts, codec.hand.action_dim());
}

}  // namespace cgrasp
