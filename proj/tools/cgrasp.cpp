// cgrasp: command-line driver for dataset generation, tokenization,
// training, generation and evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 validation failure,
// 3 acceptance-gate failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cgrasp/artifacts.hpp"
#include "cgrasp/config.hpp"
#include "cgrasp/eval_harness.hpp"
#include "cgrasp/model/attention_mask.hpp"
#include "cgrasp/model/gradient_check.hpp"
#include "cgrasp/model/trainer.hpp"
#include "cgrasp/pipeline.hpp"
#include "cgrasp/synthetic_data.hpp"

namespace fs = std::filesystem;
using namespace cgrasp;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitGate = 3;

/// Thrown when a command ran correctly but a quality gate failed.
struct GateFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& c) {
  cmd->add_option("--config", c.config, "run config file (key = value lines, 'include <file>' allowed)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set train.steps=500");
}

RunConfig load_config(const CommonOptions& c) { return load_run_config(c.config, parse_overrides(c.overrides)); }

PromptTemplate prompt_for(const RunConfig& cfg) {
  PromptTemplate p;
  if (!cfg.paths.meta_prompts.empty()) p.meta_prompts = load_meta_prompts(cfg.paths.meta_prompts);
  p.visual_tokens = cfg.model.encoder.n_centroids;
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  write_atomically(path, [&](std::ostream& out) { out << text; });
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// "0..5" or "0,2,4".
std::vector<std::size_t> parse_k_values(const std::string& s) {
  std::vector<std::size_t> out;
  if (const auto dots = s.find(".."); dots != std::string::npos) {
    const auto lo = std::stoul(s.substr(0, dots));
    const auto hi = std::stoul(s.substr(dots + 2));
    if (hi < lo) throw Error(ErrorKind::InvalidArgument, "empty sweep range " + s);
    for (auto k = lo; k <= hi; ++k) out.push_back(k);
    return out;
  }
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(std::stoul(item));
  if (out.empty()) throw Error(ErrorKind::InvalidArgument, "no sweep values in '" + s + "'");
  return out;
}

/// Steering contacts from JSON: an array of {link, pos} or an object with a
/// "contacts" array (a dataset record qualifies).
ContactSet load_steering_contacts(const HandModel& hand, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open steering file " + path);
  nlohmann::json j;
  try {
    in >> j;
    const auto& arr = j.is_array() ? j : j.at("contacts");
    std::vector<ContactRecord> recs;
    for (const auto& c : arr) {
      const auto name = c.at("link").get<std::string>();
      const auto l = hand.link_index(name);
      if (!l) throw Error(ErrorKind::UnknownLink, "unknown link '" + name + "' in " + path);
      const auto p = c.at("pos").get<std::vector<double>>();
      if (p.size() != 3) throw Error(ErrorKind::Format, "contact position needs 3 values in " + path);
      recs.push_back({*l, Vec3(p[0], p[1], p[2]), 0.0});
    }
    return ContactSet(hand, std::move(recs));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ": " + e.what());
  }
}

// ---- commands -----------------------------------------------------------------------------

int cmd_gen_data(const CommonOptions& common, const std::string& out) {
  const RunConfig cfg = load_config(common);
  const HandModel hand = default_hand();
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetSummary s = build_dataset(hand, cfg.data, out, cfg.manifest_json());
  write_text(fs::path(out) / "run_config.txt", cfg.effective_text());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& [split, n] : s.counts) std::printf("%-14s %6zu records\n", split.c_str(), n);
  std::printf("oracle failures: %zu   time: %.1f s\n", s.oracle_failures, secs);
  return 0;
}

int cmd_fit_norm(const CommonOptions& common, const std::string& data, const std::string& out) {
  const RunConfig cfg = load_config(common);
  const HandModel hand = default_hand();
  const auto records = load_split(hand, data);
  if (records.empty()) throw Error(ErrorKind::EmptyInput, data + " has no records");
  const CodecFit fit = fit_codec(records, cfg.codec.n_action_bins, cfg.codec.n_pos_bins, cfg.codec.bounds_margin);
  for (const auto& w : fit.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  write_text(out, codec_params_to_json(fit.params).dump(2) + "\n");
  std::printf("fitted %zu action dims and position bounds on %zu records -> %s\n", fit.params.normalizer.dim(),
              records.size(), out.c_str());
  return 0;
}

int cmd_tokenize(const CommonOptions& common, const std::string& data, const std::string& norm,
                 const std::string& out) {
  const RunConfig cfg = load_config(common);
  const HandModel hand = default_hand();
  const auto records = load_split(hand, data);
  const Codec codec(hand, prompt_for(cfg), load_codec_params(norm));
  TokenFile f;
  f.header.codec_path = fs::absolute(norm).string();
  f.header.dataset_dir = fs::absolute(fs::path(data).parent_path()).string();
  f.header.vocab_hash = codec.vocab.hash();
  f.header.codec = codec.params;
  f.header.prompt = codec.prompt;
  std::size_t max_len = 0;
  for (const auto& r : records) {
    // Stored without dropout; the trainer draws fresh dropout each epoch.
    TokenSequence seq = encode_record(codec, r);
    max_len = std::max(max_len, seq.ids.size());
    f.records.push_back({r.id, r.cloud_file, std::move(seq)});
  }
  write_atomically(out, [&](std::ostream& os) { write_token_file(os, f, codec.vocab); });
  std::printf("%zu sequences, vocab %zu, longest %zu tokens -> %s\n", f.records.size(), codec.vocab.size(), max_len,
              out.c_str());
  return 0;
}

int cmd_train(const CommonOptions& common, const std::string& data, const std::string& out) {
  RunConfig cfg = load_config(common);
  const HandModel hand = default_hand();
  const TokenFile f = read_token_file(data, hand);
  const Codec codec(hand, f.header.prompt, f.header.codec);
  cfg.model.vocab_size = codec.vocab.size();
  cfg.model.validate();
  if (codec.prompt.visual_tokens != cfg.model.encoder.n_centroids)
    throw Error(ErrorKind::LayoutError, "token file has " + std::to_string(codec.prompt.visual_tokens) +
                                            " visual tokens but model.encoder.n_centroids is " +
                                            std::to_string(cfg.model.encoder.n_centroids));
  const auto examples = training_examples(f, cfg.model.encoder);
  const std::size_t log_every = cfg.train.log_every ? cfg.train.log_every : 100;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult res = cgrasp::train(cfg.model, cfg.train, codec.vocab, examples, [&](std::size_t s, double l, double lr) {
    if (s % log_every == 0 || s + 1 == cfg.train.total_steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %6zu  loss %.4f  lr %.2e  %.0fs\n", s, l, lr, secs);
    }
  });
  const Checkpoint ck{cfg.model, codec.vocab.hash(), res.steps, res.params};
  const fs::path ckpt(out);
  std::string curve = "step,loss\n";
  for (std::size_t i = 0; i < res.loss_curve.size(); ++i) curve += std::to_string(i) + "," + std::to_string(res.loss_curve[i]) + "\n";
  const fs::path curve_path = ckpt.string() + ".loss.csv";
  write_text(curve_path, curve);
  save_bundle(ckpt, ck, codec,
              {{"token_file", fs::absolute(data).string()},
               {"loss_curve", curve_path.filename().string()},
               {"train", to_json(cfg.train)},
               {"config", cfg.manifest_json()}});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("trained %zu steps in %.1f s, final loss %.4f -> %s\n", res.steps, secs,
              res.loss_curve.empty() ? 0.0 : res.loss_curve.back(), out.c_str());
  return 0;
}

struct GenerateArgs {
  std::string ckpt, object, instruction, steer, out, hand_points;
  long long steer_links = -1;  ///< -1 = every contact in the steering file
  bool constrain = false;
  std::uint64_t seed = 0;
  double temperature = 0.0;  ///< 0 = greedy
  std::size_t meta_prompt = 0;
};

int cmd_generate(const CommonOptions& common, const GenerateArgs& a) {
  const RunConfig cfg = load_config(common);
  const HandModel hand = default_hand();
  const Bundle b = load_bundle(a.ckpt, hand);
  const PointCloud cloud = load_xyz(a.object);
  const EncoderInput enc = prepare_encoder_input(cloud, b.model->config().encoder);
  std::vector<TokenId> prefix;
  if (!a.steer.empty()) {
    const ContactSet partial = load_steering_contacts(hand, a.steer);
    const std::size_t k = a.steer_links < 0 ? partial.size() : static_cast<std::size_t>(a.steer_links);
    // k = 0 means no steering at all, so the result equals plain generation.
    if (k > 0) prefix = build_steering_prefix(b.codec->vocab, partial, k, b.codec->params.bounds);
  } else if (a.steer_links > 0) {
    throw Error(ErrorKind::InvalidSteering, "--steer-links needs --steer FILE");
  }
  GenerateOptions g;
  g.constrain = a.constrain;
  g.seed = a.seed;
  if (a.temperature > 0.0) g.mode = DecodeMode::Temperature, g.temperature = a.temperature;
  const Generation gen = generate_grasp(*b.model, *b.codec, enc, a.instruction, a.meta_prompt, prefix, g);
  const DecodedGrasp d = decode_assistant(*b.codec, gen.assistant);

  nlohmann::json report = {{"tokens", tokens_to_text(b.codec->vocab, gen.assistant)},
                           {"status", gen.status == GenerationStatus::Complete ? "complete" : "incomplete"},
                           {"valid", d.grammar.ok()}};
  std::printf("tokens: %s\n", tokens_to_text(b.codec->vocab, gen.assistant).c_str());
  if (!d.grammar.ok()) {
    for (const auto& v : d.grammar.violations) std::printf("grammar violation: %s\n", v.message.c_str());
    nlohmann::json vs = nlohmann::json::array();
    for (const auto& v : d.grammar.violations) vs.push_back(v.message);
    report["violations"] = vs;
  } else {
    std::printf("contacts (%zu):\n", d.contacts.size());
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : d.contacts) {
      const auto& name = hand.links()[c.link].name;
      if (c.position)
        std::printf("  %-12s %9.4f %9.4f %9.4f\n", name.c_str(), c.position->x(), c.position->y(), c.position->z());
      else
        std::printf("  %-12s (position dropped)\n", name.c_str());
      cs.push_back({{"link", name}, {"pos", c.position ? detail::vec_json(*c.position) : nlohmann::json(nullptr)}});
    }
    report["contacts"] = cs;
    const auto v = d.pose->to_vector();
    std::printf("translation: %.4f %.4f %.4f\nrotation:    %.4f %.4f %.4f\njoints:", v[0], v[1], v[2], v[3], v[4], v[5]);
    for (std::size_t i = 6; i < v.size(); ++i) std::printf(" %.3f", v[i]);
    std::printf("\n");
    report["pose"] = v;
    const KdTree tree(cloud.points);
    const auto poses = forward_kinematics(hand, *d.pose);
    const ContactSet physical = extract_contacts(hand, poses, tree);
    std::printf("penetration: %.2f mm, physical contacts: %zu\n", 1000.0 * penetration_depth(hand, poses, tree),
                physical.size());
    if (!a.hand_points.empty()) {
      PointCloud pts;
      pts.points = link_surface_points(hand, poses, cfg.eval.options.samples_per_link);
      save_xyz(pts, a.hand_points + ".partial");
      fs::rename(a.hand_points + ".partial", a.hand_points);
      std::printf("hand surface points -> %s\n", a.hand_points.c_str());
    }
  }
  if (!a.out.empty()) write_json(a.out, report);
  return d.grammar.ok() ? 0 : kExitValidation;
}

struct EvalArgs {
  std::string ckpt, split, out, sweep;
  std::size_t limit = 0;
  bool baseline = false;
};

int cmd_eval(const CommonOptions& common, const EvalArgs& a) {
  const RunConfig cfg = load_config(common);
  const HandModel hand = default_hand();
  const Bundle b = load_bundle(a.ckpt, hand);
  auto records = load_split(hand, a.split);
  if (a.limit && records.size() > a.limit) records.resize(a.limit);
  if (records.empty()) throw Error(ErrorKind::EmptyInput, a.split + " has no records");
  CloudCache clouds(fs::path(a.split).parent_path());
  const EvalOptions& opts = cfg.eval.options;
  nlohmann::json out = {{"checkpoint", fs::absolute(a.ckpt).string()},
                        {"split", fs::absolute(a.split).string()},
                        {"config", cfg.manifest_json()}};
  int status = 0;
  if (a.sweep.empty()) {
    const EvalReport rep = full_report(*b.model, *b.codec, records, clouds, opts);
    print_report_table(std::cout, rep.aggregate);
    out["aggregate"] = aggregate_to_json(rep.aggregate);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) rows.push_back(row_to_json(b.codec->vocab, r));
    out["rows"] = rows;
    if (rep.aggregate.invalid_rate > cfg.eval.invalid_rate_ceiling) {
      std::fprintf(stderr, "invalid rate %.3f exceeds ceiling %.3f\n", rep.aggregate.invalid_rate,
                   cfg.eval.invalid_rate_ceiling);
      status = kExitGate;
    }
  } else {
    const auto ks = parse_k_values(a.sweep);
    const SweepResult sw = steering_sweep(*b.model, *b.codec, records, clouds, ks, opts);
    print_sweep_table(std::cout, sw);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : sw.rows)
      rows.push_back({{"links", r.k}, {"n", r.n}, {"invalid", r.invalid}, {"cd_mm", r.cd_mm}, {"q1", r.q1},
                      {"proxy_rate", r.proxy_rate}});
    out["sweep"] = {{"rows", rows}, {"skipped", sw.skipped}};
  }
  if (a.baseline) {
    const RandomBaseline rb = random_baseline(*b.codec, records, clouds, opts, cfg.eval.random_baseline_seed);
    std::printf("random poses: CD %.3f mm  Con. %.4f  Q1 %.4f  proxy %.3f  posacc %.3f\n", rb.cd_mm, rb.con, rb.q1,
                rb.proxy_rate, rb.pos_acc);
    out["random_baseline"] = {{"cd_mm", rb.cd_mm}, {"con", rb.con}, {"q1", rb.q1}, {"proxy_rate", rb.proxy_rate},
                              {"pos_acc", rb.pos_acc}};
  }
  if (!a.out.empty()) write_json(a.out, out);
  return status;
}

int cmd_mask(const std::string& layout_text) {
  std::vector<long long> spans;
  std::istringstream in(layout_text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      spans.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw Error(ErrorKind::LayoutError, "layout entries must be integers: '" + item + "'");
    }
  }
  const AttentionMask mask(make_layout(spans));
  std::printf("layout text_pre=%lld pc=%lld text_post=%lld contact=%lld action=%lld  ('#' = can attend)\n", spans[0],
              spans[1], spans[2], spans[3], spans[4]);
  std::fputs(mask.render().c_str(), stdout);
  return 0;
}

int cmd_grad_check(std::uint64_t seed, double threshold) {
  const GradientCheckReport r = gradient_check(seed);
  for (const auto& g : r.groups) std::printf("%-24s %.3e\n", g.group.c_str(), g.max_relative_error);
  std::printf("max relative error %.3e (threshold %.0e)\n", r.max_relative_error, threshold);
  if (!(r.max_relative_error < threshold)) throw GateFailure("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cgrasp: contact-reasoning grasp generation toolkit"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string out, data, norm;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, common);
  gen->add_option("--out", out, "output directory")->required();

  auto* fit = app.add_subcommand("fit-norm", "fit action quantiles and position bounds on a training split");
  add_common(fit, common);
  fit->add_option("--data", data, "training split (.jsonl)")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", out, "codec parameter file")->required();

  auto* tok = app.add_subcommand("tokenize", "serialize a split as token sequences");
  add_common(tok, common);
  tok->add_option("--data", data, "split (.jsonl)")->required()->check(CLI::ExistingFile);
  tok->add_option("--norm", norm, "codec parameter file")->required()->check(CLI::ExistingFile);
  tok->add_option("--out", out, "token file")->required();

  auto* tr = app.add_subcommand("train", "train a model on a token file");
  add_common(tr, common);
  tr->add_option("--data", data, "token file")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out, "checkpoint path")->required();

  GenerateArgs ga;
  auto* ge = app.add_subcommand("generate", "generate a grasp for one object");
  add_common(ge, common);
  ge->add_option("--ckpt", ga.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  ge->add_option("--object", ga.object, "object point cloud (.xyz)")->required()->check(CLI::ExistingFile);
  ge->add_option("--instruction", ga.instruction, "grasp instruction")->required();
  ge->add_option("--steer", ga.steer, "contacts used as a steering prefix (JSON)")->check(CLI::ExistingFile);
  ge->add_option("--steer-links", ga.steer_links, "number of steering contacts (default: all)")
      ->check(CLI::NonNegativeNumber);
  ge->add_flag("--constrain", ga.constrain, "grammar-constrained decoding");
  ge->add_option("--seed", ga.seed, "sampling seed");
  ge->add_option("--temperature", ga.temperature, "sample at this temperature instead of greedy")
      ->check(CLI::NonNegativeNumber);
  ge->add_option("--meta-prompt", ga.meta_prompt, "meta-prompt variant index");
  ge->add_option("--out", ga.out, "write the decoded grasp as JSON");
  ge->add_option("--hand-points", ga.hand_points, "write hand surface points (.xyz) for visualization");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(ev, common);
  ev->add_option("--ckpt", ea.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", ea.split, "split (.jsonl)")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ea.out, "report (.json)");
  ev->add_option("--sweep", ea.sweep, "steering sweep over link counts, e.g. 0..5");
  ev->add_option("--limit", ea.limit, "evaluate only the first N records");
  ev->add_flag("--baseline", ea.baseline, "also score random poses");

  std::string layout;
  auto* mk = app.add_subcommand("mask", "print the attention mask for a segment layout");
  mk->add_option("--layout", layout, "text_pre,pc,text_post,contact,action")->required();

  std::uint64_t gc_seed = 0;
  double gc_threshold = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "compare analytic and finite-difference gradients");
  gc->add_option("--seed", gc_seed, "problem seed");
  gc->add_option("--threshold", gc_threshold, "maximum allowed relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common, out);
    if (*fit) return cmd_fit_norm(common, data, out);
    if (*tok) return cmd_tokenize(common, data, norm, out);
    if (*tr) return cmd_train(common, data, out);
    if (*ge) return cmd_generate(common, ga);
    if (*ev) return cmd_eval(common, ea);
    if (*mk) return cmd_mask(layout);
    if (*gc) return cmd_grad_check(gc_seed, gc_threshold);
  } catch (const GateFailure& e) {
    std::fprintf(stderr, "gate failed: %s\n", e.what());
    return kExitGate;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitUsage;
}
