#pragma once

// Autoregressive decoding of the assistant span with an optional steering
// prefix and optional grammar-constrained token filtering.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "cgrasp/error.hpp"
#include "cgrasp/model/network.hpp"
#include "cgrasp/random.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

enum class DecodeMode { Greedy, Temperature };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  bool constrain = false;
  std::uint64_t seed = 0;
};

enum class GenerationStatus { Complete, IncompleteGeneration };

struct Generation {
  std::vector<TokenId> assistant;  ///< steering prefix included
  GenerationStatus status = GenerationStatus::Complete;
};

namespace detail {

template <typename Row>
TokenId pick_token(const Row& logits, const std::vector<std::uint8_t>* allowed, const GenerateOptions& opts, Rng& rng) {
  const auto n = static_cast<std::size_t>(logits.size());
  double best = -std::numeric_limits<double>::infinity();
  TokenId arg = 0;
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (allowed && !(*allowed)[i]) continue;
    const double v = static_cast<double>(logits(static_cast<Eigen::Index>(i)));
    if (!any || v > best) best = v, arg = static_cast<TokenId>(i), any = true;
  }
  if (!any) throw Error(ErrorKind::GrammarError, "no admissible next token");
  if (opts.mode == DecodeMode::Greedy) return arg;
  if (!(opts.temperature > 0.0)) throw Error(ErrorKind::InvalidArgument, "temperature must be > 0");
  std::vector<double> w(n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (allowed && !(*allowed)[i]) continue;
    w[i] = std::exp((static_cast<double>(logits(static_cast<Eigen::Index>(i))) - best) / opts.temperature);
    z += w[i];
  }
  double u = uniform01(rng) * z;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    if (u < w[i]) return static_cast<TokenId>(i);
    u -= w[i];
  }
  return arg;
}

}  // namespace detail

/// Decodes after `prompt` (a build_prompt result) and the steering prefix.
/// Stops after action_end or at max_sequence_length.
template <typename T>
Generation generate(const Network<T>& net, const Vocabulary& vocab, const TokenSequence& prompt,
                    const EncoderInput& encoder_input, std::span<const TokenId> steering, const GenerateOptions& opts,
                    std::size_t action_dim) {
  const auto& cfg = net.config();
  if (prompt.layout.contact != 0 || prompt.layout.action != 0)
    throw Error(ErrorKind::LayoutError, "prompt must end before the contact span");
  if (prompt.ids.size() + steering.size() > cfg.max_sequence_length)
    throw Error(ErrorKind::TruncationError, "prompt and steering prefix exceed max_sequence_length");
  GrammarState grammar(vocab, action_dim);
  Generation out;
  for (TokenId t : steering) {
    if (opts.constrain) {
      if (!grammar.allows(t)) throw Error(ErrorKind::InvalidSteering, "steering prefix violates the grammar");
      grammar.advance(t);
    }
    out.assistant.push_back(t);
  }
  Rng rng(derive_seed(opts.seed, 0x6e4));
  typename Network<T>::Session session;
  auto logits = net.prefill(prompt, net.encode(encoder_input), session);
  for (TokenId t : steering) logits = net.step(t, session);
  std::vector<std::uint8_t> allowed(vocab.size());
  while (true) {
    if (!out.assistant.empty() && out.assistant.back() == vocab.action_end()) break;
    if (session.length >= cfg.max_sequence_length) {
      out.status = GenerationStatus::IncompleteGeneration;
      break;
    }
    if (opts.constrain)
      for (std::size_t i = 0; i < allowed.size(); ++i) allowed[i] = grammar.allows(static_cast<TokenId>(i)) ? 1 : 0;
    const TokenId next = detail::pick_token(logits, opts.constrain ? &allowed : nullptr, opts, rng);
    if (opts.constrain) grammar.advance(next);
    out.assistant.push_back(next);
    if (next == vocab.action_end()) break;
    if (session.length >= cfg.max_sequence_length) {
      out.status = GenerationStatus::IncompleteGeneration;
      break;
    }
    logits = net.step(next, session);
  }
  return out;
}

}  // namespace cgrasp
