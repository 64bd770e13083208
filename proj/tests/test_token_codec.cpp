#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cgrasp/pipeline.hpp"
#include "test_util.hpp"

using namespace cgrasp;

namespace {

const HandModel& hand() {
  static const HandModel h = default_hand();
  return h;
}

std::size_t link(const char* name) { return hand().link_index(name).value(); }

// Independent percentile: sort a copy, interpolate between the two order
// statistics around p * (n - 1).
double oracle_percentile(std::vector<double> xs, double p) {
  std::sort(xs.begin(), xs.end());
  const double pos = p * static_cast<double>(xs.size() - 1);
  const double lo = std::floor(pos);
  const auto i = static_cast<std::size_t>(lo);
  if (i + 1 >= xs.size()) return xs.back();
  return xs[i] * (1.0 - (pos - lo)) + xs[i + 1] * (pos - lo);
}

CodecParams fitted_params(std::size_t n = 500, std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<GraspPose> poses;
  for (std::size_t i = 0; i < n; ++i) poses.push_back(testing_util::random_pose(hand(), rng));
  CodecParams p;
  p.normalizer = fit_action_normalizer(poses).normalizer;
  p.bounds = {Vec3(-0.2, -0.1, -0.05), Vec3(0.2, 0.3, 0.15)};
  return p;
}

Vec3 random_in(const PositionBounds& b, Rng& rng) {
  Vec3 p;
  for (int a = 0; a < 3; ++a) p[a] = uniform(rng, b.min[a], b.max[a]);
  return p;
}

/// Random non-empty subset of links with positions inside the bounds.
ContactSet random_contacts(const PositionBounds& b, Rng& rng) {
  std::vector<ContactRecord> recs;
  for (std::size_t l = 0; l < hand().num_links(); ++l)
    if (bernoulli(rng, 0.25)) recs.push_back({l, random_in(b, rng), 0.0});
  if (recs.empty()) recs.push_back({uniform_index(rng, hand().num_links()), random_in(b, rng), 0.0});
  return ContactSet(hand(), std::move(recs));
}

struct Fixture {
  Codec codec{hand(), PromptTemplate{}, fitted_params()};
  const Vocabulary& vocab() const { return codec.vocab; }
};

}  // namespace

TEST(Vocabulary, TokensUniqueAndOnePerLink) {
  Fixture f;
  std::set<std::string> names(f.vocab().names().begin(), f.vocab().names().end());
  EXPECT_EQ(names.size(), f.vocab().size());
  EXPECT_EQ(f.vocab().n_action_bins(), 256u);
  EXPECT_EQ(f.vocab().n_pos_bins(), 256u);
  EXPECT_EQ(f.vocab().n_links(), hand().num_links());
  for (std::size_t l = 0; l < hand().num_links(); ++l) {
    const TokenId t = f.vocab().link_token(l);
    EXPECT_EQ(f.vocab().kind(t), TokenKind::Link);
    EXPECT_EQ(f.vocab().payload(t), l);
  }
  EXPECT_THROW(f.vocab().link_token(hand().num_links()), Error);
}

TEST(Vocabulary, HashDependsOnContents) {
  const auto a = make_vocabulary(hand(), PromptTemplate{});
  const auto b = make_vocabulary(hand(), PromptTemplate{});
  EXPECT_EQ(a.hash(), b.hash());
  const auto c = make_vocabulary(hand(), PromptTemplate{}, 128, 256);
  EXPECT_NE(a.hash(), c.hash());
}

TEST(Normalizer, UniformDimensionIsSymmetric) {
  Rng rng(3);
  std::vector<GraspPose> poses;
  for (int i = 0; i < 20000; ++i) {
    GraspPose p = hand().zero_pose();
    p.translation.x() = uniform(rng, -2.0, 2.0);
    p.translation.y() = uniform(rng, 0.0, 1.0);
    poses.push_back(p);
  }
  const auto fit = fit_action_normalizer(poses);
  EXPECT_NEAR(fit.normalizer.q01[0], -1.96, 0.02);
  EXPECT_NEAR(fit.normalizer.q99[0], 1.96, 0.02);
  EXPECT_NEAR(fit.normalizer.normalize(0, 0.0), 0.0, 0.02);
  EXPECT_DOUBLE_EQ(fit.normalizer.normalize(0, fit.normalizer.q01[0]), -1.0);
  EXPECT_DOUBLE_EQ(fit.normalizer.normalize(0, fit.normalizer.q99[0]), 1.0);
  // Constant dimensions are widened rather than rejected.
  EXPECT_FALSE(fit.warnings.empty());
  for (std::size_t d = 0; d < fit.normalizer.dim(); ++d) EXPECT_LT(fit.normalizer.q01[d], fit.normalizer.q99[d]);
}

TEST(Normalizer, PercentilesMatchSortOracle) {
  Rng rng(11);
  std::vector<double> xs(10000);
  for (auto& x : xs) x = uniform(rng, -3.0, 5.0) * uniform01(rng);
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  for (double p : {0.0, 0.01, 0.25, 0.5, 0.99, 1.0})
    EXPECT_NEAR(sorted_percentile(sorted, p), oracle_percentile(xs, p), 1e-12) << p;
}

TEST(Normalizer, TooFewSamplesThrows) {
  std::vector<GraspPose> one{hand().zero_pose()};
  EXPECT_THROW(fit_action_normalizer(one), Error);
}

TEST(ActionCodec, BinBoundaries) {
  EXPECT_EQ(bin_index(0.0, 256), 0u);         // v = -1
  EXPECT_EQ(bin_index(1.0, 256), 255u);       // v = +1 clamps
  EXPECT_EQ(bin_index(0.5, 256), 128u);       // v = 0
  EXPECT_EQ(bin_index(-0.3, 256), 0u);
  EXPECT_EQ(bin_index(std::nan(""), 256), 0u);
  EXPECT_DOUBLE_EQ(action_bin_value(128, 256), 0.00390625);
}

TEST(ActionCodec, RoundTripWithinBinWidth) {
  Fixture f;
  const auto& norm = f.codec.params.normalizer;
  Rng rng(21);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const GraspPose p = testing_util::random_pose(hand(), rng);
    const auto toks = encode_action(f.vocab(), p, norm);
    ASSERT_EQ(toks.size(), hand().action_dim());
    const auto back = decode_action(f.vocab(), toks, norm).to_vector();
    const auto v = p.to_vector();
    for (std::size_t d = 0; d < v.size(); ++d)
      worst = std::max(worst, std::abs(norm.normalize(d, back[d]) - norm.normalize(d, v[d])));
  }
  EXPECT_LE(worst, 1.0 / 256.0 + 1e-12);  // edge bins sit exactly 1/256 away
}

TEST(ActionCodec, RejectsWrongLengthOrKind) {
  Fixture f;
  auto toks = encode_action(f.vocab(), hand().zero_pose(), f.codec.params.normalizer);
  toks.pop_back();
  EXPECT_THROW(decode_action(f.vocab(), toks, f.codec.params.normalizer), Error);
  toks.push_back(f.vocab().pos_bin(0));
  EXPECT_THROW(decode_action(f.vocab(), toks, f.codec.params.normalizer), Error);
}

TEST(PositionCodec, MinAndMidpoint) {
  Fixture f;
  const auto& b = f.codec.params.bounds;
  const auto lo = encode_position(f.vocab(), b.min, b);
  for (TokenId t : lo) EXPECT_EQ(t, f.vocab().pos_bin(0));
  const auto mid = encode_position(f.vocab(), 0.5 * (b.min + b.max), b);
  for (TokenId t : mid) EXPECT_EQ(t, f.vocab().pos_bin(128));
}

TEST(PositionCodec, RoundTripWithinHalfBin) {
  Fixture f;
  const auto& b = f.codec.params.bounds;
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 p = random_in(b, rng);
    const auto toks = encode_position(f.vocab(), p, b);
    const Vec3 q = decode_position(f.vocab(), toks, b);
    for (int a = 0; a < 3; ++a) ASSERT_LE(std::abs(q[a] - p[a]), (b.max[a] - b.min[a]) / 512.0 + 1e-15);
  }
}

TEST(PositionBounds, MarginIsFivePercent) {
  std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(1, 2, 4)};
  const auto b = fit_position_bounds(pts);
  EXPECT_NEAR(b.min.x(), -0.05, 1e-12);
  EXPECT_NEAR(b.max.y(), 2.1, 1e-12);
  EXPECT_NEAR(b.max.z(), 4.2, 1e-12);
  EXPECT_THROW(fit_position_bounds(std::vector<Vec3>{}), Error);
}

TEST(CodecParams, JsonRoundTripAndValidation) {
  const auto p = fitted_params();
  const auto q = codec_params_from_json(codec_params_to_json(p));
  EXPECT_EQ(q.normalizer.q01, p.normalizer.q01);
  EXPECT_EQ(q.normalizer.q99, p.normalizer.q99);
  EXPECT_EQ(q.bounds.min, p.bounds.min);
  EXPECT_EQ(q.bounds.max, p.bounds.max);
  auto j = codec_params_to_json(p);
  j["position"]["min"] = {1.0, 0.0, 0.0};
  j["position"]["max"] = {0.0, 1.0, 1.0};
  EXPECT_THROW(codec_params_from_json(j), Error);
  j = codec_params_to_json(p);
  j["format_version"] = 99;
  EXPECT_THROW(codec_params_from_json(j), Error);
}

TEST(ContactCodec, EmptySet) {
  Fixture f;
  Rng rng(0);
  const ContactSet empty(hand(), {});
  const auto t = encode_contacts(f.vocab(), empty, f.codec.params.bounds, 0.0, rng);
  EXPECT_EQ(t, (std::vector<TokenId>{f.vocab().contact_start(), f.vocab().contact_end()}));
}

TEST(ContactCodec, FullDropoutKeepsOnlyLinks) {
  Fixture f;
  Rng rng(0);
  const ContactSet cs(hand(), {{link("ffdistal"), Vec3(0.01, 0, 0), 0.0}, {link("thbase"), Vec3(0, 0.01, 0), 0.0}});
  const auto t = encode_contacts(f.vocab(), cs, f.codec.params.bounds, 1.0, rng);
  const std::vector<TokenId> want{f.vocab().contact_start(), f.vocab().id("<|rh_thbase|>"),
                                  f.vocab().id("<|rh_ffdistal|>"), f.vocab().contact_end()};
  EXPECT_EQ(t, want);
}

TEST(ContactCodec, RetentionFrequencyAtHalf) {
  Fixture f;
  Rng rng(99);
  const ContactSet cs(hand(), {{link("ffdistal"), Vec3(0.01, 0, 0), 0.0}});
  const int n = 10000;
  int kept = 0;
  for (int i = 0; i < n; ++i)
    kept += encode_contacts(f.vocab(), cs, f.codec.params.bounds, 0.5, rng).size() == 6 ? 1 : 0;
  // 99% normal interval of Binomial(n, 0.5).
  const double half = 2.5758 * std::sqrt(n * 0.25);
  EXPECT_NEAR(kept, n / 2, half);
}

TEST(ContactCodec, SequenceGranularityDropsAllOrNothing) {
  Fixture f;
  Rng rng(4);
  const ContactSet cs = random_contacts(f.codec.params.bounds, rng);
  for (int i = 0; i < 200; ++i) {
    const auto t = encode_contacts(f.vocab(), cs, f.codec.params.bounds, 0.5, rng, DropoutGranularity::Sequence);
    const std::size_t n_pos = std::count_if(t.begin(), t.end(),
                                            [&](TokenId x) { return f.vocab().kind(x) == TokenKind::PosBin; });
    EXPECT_TRUE(n_pos == 0 || n_pos == 3 * cs.size());
  }
  EXPECT_THROW(encode_contacts(f.vocab(), cs, f.codec.params.bounds, 1.5, rng), Error);
}

TEST(ContactCodec, PermutationInvariant) {
  Fixture f;
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const ContactSet cs = random_contacts(f.codec.params.bounds, rng);
    auto recs = cs.records();
    std::reverse(recs.begin(), recs.end());
    const ContactSet shuffled(hand(), recs);
    Rng r1(1), r2(1);
    EXPECT_EQ(encode_contacts(f.vocab(), cs, f.codec.params.bounds, 0.3, r1),
              encode_contacts(f.vocab(), shuffled, f.codec.params.bounds, 0.3, r2));
  }
}

TEST(ContactCodec, DropoutNeverRemovesLinks) {
  Fixture f;
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const ContactSet cs = random_contacts(f.codec.params.bounds, rng);
    const auto t = encode_contacts(f.vocab(), cs, f.codec.params.bounds, uniform01(rng), rng);
    std::vector<std::size_t> links;
    for (TokenId x : t)
      if (f.vocab().kind(x) == TokenKind::Link) links.push_back(f.vocab().payload(x));
    EXPECT_EQ(links, cs.links());
  }
}

TEST(SteeringPrefix, Sizes) {
  Fixture f;
  const ContactSet cs(hand(), {{link("ffdistal"), Vec3(0.01, 0, 0), 0.0}, {link("thbase"), Vec3(0, 0.01, 0), 0.0}});
  const auto& b = f.codec.params.bounds;
  EXPECT_EQ(build_steering_prefix(f.vocab(), cs, 0, b), std::vector<TokenId>{f.vocab().contact_start()});
  const auto two = build_steering_prefix(f.vocab(), cs, 2, b);
  EXPECT_EQ(two.size(), 9u);
  EXPECT_EQ(two[1], f.vocab().id("<|rh_thbase|>"));
  EXPECT_EQ(two[5], f.vocab().id("<|rh_ffdistal|>"));
  EXPECT_THROW(build_steering_prefix(f.vocab(), cs, 3, b), Error);
}

TEST(Sequence, AssistantSpanDelimiters) {
  Fixture f;
  Rng rng(2);
  const auto cs = random_contacts(f.codec.params.bounds, rng);
  const auto seq = build_training_sequence(f.vocab(), f.codec.prompt, "grasp the box", cs,
                                           testing_util::random_pose(hand(), rng), f.codec.params, {}, rng);
  const auto a = seq.assistant();
  EXPECT_EQ(a.front(), f.vocab().contact_start());
  EXPECT_EQ(a.back(), f.vocab().action_end());
  EXPECT_EQ(seq.layout.total(), seq.ids.size());
  EXPECT_EQ(seq.layout.action, hand().action_dim() + 2);
  for (std::size_t i = seq.layout.pc_begin(); i < seq.layout.pc_end(); ++i) EXPECT_EQ(seq.ids[i], f.vocab().vision_pad());
  EXPECT_EQ(seq.ids[seq.layout.pc_begin() - 1], f.vocab().vision_start());
  EXPECT_EQ(seq.ids[seq.layout.pc_end()], f.vocab().vision_end());
}

TEST(Sequence, MetaPromptVariantsChangeOnlyUserText) {
  Fixture f;
  ASSERT_GE(f.codec.prompt.meta_prompts.size(), 4u);
  Rng rng(6);
  const auto cs = random_contacts(f.codec.params.bounds, rng);
  const auto pose = testing_util::random_pose(hand(), rng);
  SequenceOptions o0, o1;
  o1.meta_prompt_id = 1;
  Rng r0(1), r1(1);
  const auto s0 = build_training_sequence(f.vocab(), f.codec.prompt, "grasp it", cs, pose, f.codec.params, o0, r0);
  const auto s1 = build_training_sequence(f.vocab(), f.codec.prompt, "grasp it", cs, pose, f.codec.params, o1, r1);
  EXPECT_NE(std::vector<TokenId>(s0.ids.begin(), s0.ids.begin() + s0.layout.contact_begin()),
            std::vector<TokenId>(s1.ids.begin(), s1.ids.begin() + s1.layout.contact_begin()));
  EXPECT_TRUE(std::ranges::equal(s0.assistant(), s1.assistant()));
  // Ids cycle modulo the variant count.
  SequenceOptions o5;
  o5.meta_prompt_id = f.codec.prompt.meta_prompts.size();
  Rng r5(1);
  EXPECT_EQ(build_training_sequence(f.vocab(), f.codec.prompt, "grasp it", cs, pose, f.codec.params, o5, r5).ids,
            s0.ids);
}

TEST(Sequence, MetaPromptFileMatchesBuiltIns) {
  const auto prompts = load_meta_prompts(std::string(CGRASP_DATA_DIR) + "/meta_prompts.txt");
  EXPECT_EQ(prompts, PromptTemplate{}.meta_prompts);
  EXPECT_THROW(load_meta_prompts("/nonexistent/meta.txt"), Error);
}

TEST(Sequence, DecodeRoundTrip) {
  Fixture f;
  Rng rng(13);
  const auto& b = f.codec.params.bounds;
  for (int trial = 0; trial < 100; ++trial) {
    const auto cs = random_contacts(b, rng);
    const auto pose = testing_util::random_pose(hand(), rng);
    SequenceOptions o;
    o.p_drop = 0.5;
    const auto seq = build_training_sequence(f.vocab(), f.codec.prompt, "grasp", cs, pose, f.codec.params, o, rng);
    const auto d = decode_assistant(f.codec, seq.assistant());
    ASSERT_TRUE(d.grammar.ok());
    ASSERT_EQ(d.contacts.size(), cs.size());
    for (std::size_t i = 0; i < cs.size(); ++i) {
      EXPECT_EQ(d.contacts[i].link, cs.records()[i].link);
      if (!d.contacts[i].position) continue;
      for (int a = 0; a < 3; ++a)
        EXPECT_LE(std::abs((*d.contacts[i].position)[a] - cs.records()[i].position[a]),
                  (b.max[a] - b.min[a]) / 512.0 + 1e-15);
    }
    const auto& norm = f.codec.params.normalizer;
    const auto v = pose.to_vector(), w = d.pose->to_vector();
    for (std::size_t k = 0; k < v.size(); ++k)
      EXPECT_LE(std::abs(norm.normalize(k, w[k]) - norm.normalize(k, v[k])), 1.0 / 256.0 + 1e-12);
  }
}

TEST(Grammar, ClosureOverDropoutRatesAndSeeds) {
  Fixture f;
  const auto& b = f.codec.params.bounds;
  for (double p : {0.0, 0.5, 1.0}) {
    std::size_t pos_tokens = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      Rng rng(seed);
      const auto cs = random_contacts(b, rng);
      SequenceOptions o;
      o.p_drop = p;
      const auto seq = build_training_sequence(f.vocab(), f.codec.prompt, "grasp", cs,
                                               testing_util::random_pose(hand(), rng), f.codec.params, o, rng);
      const auto res = validate_grammar(f.vocab(), seq.assistant(), hand().action_dim());
      ASSERT_TRUE(res.ok()) << "p=" << p << " seed=" << seed << ": " << res.violations.front().message;
      for (TokenId t : seq.assistant()) pos_tokens += f.vocab().kind(t) == TokenKind::PosBin;
    }
    if (p == 1.0) {
      EXPECT_EQ(pos_tokens, 0u);
    } else if (p == 0.0) {
      EXPECT_GT(pos_tokens, 0u);
    }
  }
}

TEST(Grammar, Violations) {
  Fixture f;
  const auto& v = f.vocab();
  const std::size_t D = hand().action_dim();
  auto action = [&](std::size_t n) {
    std::vector<TokenId> t{v.action_start()};
    t.insert(t.end(), n, v.action_bin(5));
    t.push_back(v.action_end());
    return t;
  };
  auto cat = [](std::vector<TokenId> a, const std::vector<TokenId>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  const std::vector<TokenId> empty_contacts{v.contact_start(), v.contact_end()};
  EXPECT_TRUE(validate_grammar(v, cat(empty_contacts, action(D)), D).ok());

  for (std::size_t n : {D - 1, D + 1}) {
    const auto r = validate_grammar(v, cat(empty_contacts, action(n)), D);
    ASSERT_FALSE(r.ok());
    EXPECT_NE(r.violations.front().message.find("action length"), std::string::npos);
  }

  const std::vector<TokenId> two_pos{v.contact_start(), v.link_token(3), v.pos_bin(1), v.pos_bin(2), v.contact_end()};
  auto r = validate_grammar(v, cat(two_pos, action(D)), D);
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(r.violations.front().message, "incomplete position triple");

  const std::vector<TokenId> dup{v.contact_start(), v.link_token(3), v.link_token(3), v.contact_end()};
  EXPECT_FALSE(validate_grammar(v, cat(dup, action(D)), D).ok());

  auto trailing = cat(empty_contacts, action(D));
  trailing.push_back(v.action_bin(0));
  EXPECT_FALSE(validate_grammar(v, trailing, D).ok());
  EXPECT_FALSE(validate_grammar(v, action(D), D).ok());
  EXPECT_FALSE(validate_grammar(v, std::vector<TokenId>{}, D).ok());
}

TEST(Grammar, IncrementalStateAgreesWithValidator) {
  Fixture f;
  const auto& b = f.codec.params.bounds;
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    SequenceOptions o;
    o.p_drop = 0.5;
    const auto seq = build_training_sequence(f.vocab(), f.codec.prompt, "grasp", random_contacts(b, rng),
                                             testing_util::random_pose(hand(), rng), f.codec.params, o, rng);
    GrammarState st(f.vocab(), hand().action_dim());
    for (TokenId t : seq.assistant()) {
      ASSERT_TRUE(st.allows(t));
      st.advance(t);
    }
    EXPECT_TRUE(st.done());
  }
  GrammarState st(f.vocab(), hand().action_dim());
  EXPECT_FALSE(st.allows(f.vocab().action_start()));
  EXPECT_THROW(st.advance(f.vocab().action_start()), Error);
}

TEST(Sequence, StripAndDropoutEdits) {
  Fixture f;
  Rng rng(17);
  const auto cs = random_contacts(f.codec.params.bounds, rng);
  const auto seq = build_training_sequence(f.vocab(), f.codec.prompt, "grasp", cs,
                                           testing_util::random_pose(hand(), rng), f.codec.params, {}, rng);
  const auto stripped = strip_contacts(f.vocab(), seq);
  EXPECT_EQ(stripped.layout.contact, 2u);
  EXPECT_EQ(stripped.layout.total(), stripped.ids.size());
  EXPECT_TRUE(validate_grammar(f.vocab(), stripped.assistant(), hand().action_dim()).ok());

  const auto all = apply_position_dropout(f.vocab(), seq, 1.0, rng);
  EXPECT_EQ(all.layout.contact, cs.size() + 2);
  EXPECT_EQ(all.layout.total(), all.ids.size());
  EXPECT_EQ(apply_position_dropout(f.vocab(), seq, 0.0, rng).ids, seq.ids);
}

TEST(Serialization, TextAndBinaryRoundTrip) {
  Fixture f;
  Rng rng(19);
  const auto seq = build_training_sequence(f.vocab(), f.codec.prompt, "grasp", random_contacts(f.codec.params.bounds, rng),
                                           testing_util::random_pose(hand(), rng), f.codec.params, {}, rng);
  EXPECT_EQ(tokens_from_text(f.vocab(), tokens_to_text(f.vocab(), seq.ids)), seq.ids);
  std::stringstream ss;
  write_token_ids(ss, seq.ids);
  EXPECT_EQ(read_token_ids(ss, seq.ids.size()), seq.ids);
  std::stringstream short_stream("ab");
  EXPECT_THROW(read_token_ids(short_stream, 1), Error);
  EXPECT_THROW(tokens_from_text(f.vocab(), "<|no_such_token|>"), Error);
}
