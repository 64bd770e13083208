#pragma once

// On-disk artifacts that connect pipeline stages: the tokenized dataset file
// and the manifest stored next to each checkpoint. Writers go through a
// ".partial" file that is renamed only after a complete write.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/model/checkpoint.hpp"
#include "cgrasp/model/trainer.hpp"
#include "cgrasp/pipeline.hpp"

namespace cgrasp {

inline constexpr int kTokenFileVersion = 1;
inline constexpr int kBundleVersion = 1;

/// Runs `write` against "<path>.partial" and renames on success. A failed
/// write leaves the .partial file for inspection and rethrows.
inline void write_atomically(const std::filesystem::path& path, const std::function<void(std::ostream&)>& write,
                             bool binary = false) {
  const std::filesystem::path partial = path.string() + ".partial";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(partial, binary ? std::ios::binary : std::ios::out);
    if (!out) throw Error(ErrorKind::Format, "cannot write " + partial.string());
    write(out);
    out.flush();
    if (!out) throw Error(ErrorKind::Format, "write failed for " + partial.string());
  }
  std::filesystem::rename(partial, path);
}

inline nlohmann::json prompt_to_json(const PromptTemplate& p) {
  return {{"system", p.system}, {"meta_prompts", p.meta_prompts}, {"visual_tokens", p.visual_tokens}};
}

inline PromptTemplate prompt_from_json(const nlohmann::json& j) {
  PromptTemplate p;
  p.system = j.at("system").get<std::string>();
  p.meta_prompts = j.at("meta_prompts").get<std::vector<std::string>>();
  p.visual_tokens = j.at("visual_tokens").get<std::size_t>();
  if (p.meta_prompts.empty()) throw Error(ErrorKind::Format, "prompt has no meta-prompts");
  return p;
}

// ---- tokenized dataset ------------------------------------------------------------------

/// First line of a token file. The codec and prompt are embedded so the file
/// is self-contained; codec_path records where they came from.
struct TokenFileHeader {
  std::string codec_path;
  std::string dataset_dir;  ///< cloud_file entries resolve against this
  std::uint64_t vocab_hash = 0;
  CodecParams codec;
  PromptTemplate prompt;
};

struct TokenizedRecord {
  std::string id;
  std::string cloud_file;
  TokenSequence sequence;
};

struct TokenFile {
  TokenFileHeader header;
  std::vector<TokenizedRecord> records;
};

/// JSON lines: the header, then one record per line with tokens as
/// space-separated token strings for spot checks.
inline void write_token_file(std::ostream& out, const TokenFile& f, const Vocabulary& vocab) {
  const nlohmann::json head = {{"format", "cgrasp-tokens"},
                               {"version", kTokenFileVersion},
                               {"codec_path", f.header.codec_path},
                               {"dataset_dir", f.header.dataset_dir},
                               {"vocab_hash", f.header.vocab_hash},
                               {"vocab_size", vocab.size()},
                               {"codec", codec_params_to_json(f.header.codec)},
                               {"prompt", prompt_to_json(f.header.prompt)}};
  out << head.dump() << '\n';
  for (const auto& r : f.records) {
    const auto& l = r.sequence.layout;
    const nlohmann::json j = {{"id", r.id},
                              {"cloud_file", r.cloud_file},
                              {"layout", {l.text_pre, l.pc, l.text_post, l.contact, l.action}},
                              {"tokens", tokens_to_text(vocab, r.sequence.ids)}};
    out << j.dump() << '\n';
  }
}

inline TokenFile read_token_file(const std::string& path, const HandModel& hand) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Format, "cannot open " + path);
  TokenFile f;
  std::string line;
  std::size_t lineno = 0;
  std::unique_ptr<Vocabulary> vocab;
  try {
    if (!std::getline(in, line)) throw Error(ErrorKind::Format, "empty token file");
    ++lineno;
    const auto head = nlohmann::json::parse(line);
    if (head.value("format", "") != "cgrasp-tokens") throw Error(ErrorKind::Format, "not a token file");
    if (head.at("version").get<int>() != kTokenFileVersion) throw Error(ErrorKind::Format, "unsupported version");
    f.header.codec_path = head.at("codec_path").get<std::string>();
    f.header.dataset_dir = head.at("dataset_dir").get<std::string>();
    f.header.vocab_hash = head.at("vocab_hash").get<std::uint64_t>();
    f.header.codec = codec_params_from_json(head.at("codec"));
    f.header.prompt = prompt_from_json(head.at("prompt"));
    vocab = std::make_unique<Vocabulary>(
        make_vocabulary(hand, f.header.prompt, f.header.codec.n_action_bins, f.header.codec.n_pos_bins));
    if (vocab->hash() != f.header.vocab_hash)
      throw Error(ErrorKind::VocabularyMismatch, "token file was written with a different vocabulary");
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto j = nlohmann::json::parse(line);
      TokenizedRecord r;
      r.id = j.at("id").get<std::string>();
      r.cloud_file = j.at("cloud_file").get<std::string>();
      const auto l = j.at("layout").get<std::vector<std::size_t>>();
      if (l.size() != 5) throw Error(ErrorKind::Format, "layout needs 5 spans");
      r.sequence.layout = {l[0], l[1], l[2], l[3], l[4]};
      r.sequence.ids = tokens_from_text(*vocab, j.at("tokens").get<std::string>());
      if (r.sequence.ids.size() != r.sequence.layout.total())
        throw Error(ErrorKind::LayoutError, "token count does not match layout for " + r.id);
      f.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ":" + std::to_string(lineno) + ": " + e.what());
  } catch (const Error& e) {
    throw Error(e.kind(), path + ":" + std::to_string(lineno) + ": " + e.what());
  }
  return f;
}

// ---- checkpoint bundle ------------------------------------------------------------------

/// "<ckpt>.json": everything besides the weights that generation needs.
inline std::filesystem::path bundle_manifest_path(const std::filesystem::path& ckpt) {
  return ckpt.string() + ".json";
}

inline void save_bundle(const std::filesystem::path& ckpt, const Checkpoint& ck, const Codec& codec,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  write_atomically(ckpt, [&](std::ostream& out) { write_checkpoint(out, ck); }, true);
  nlohmann::json m = {{"version", kBundleVersion},
                      {"checkpoint", ckpt.filename().string()},
                      {"vocab_hash", ck.vocab_hash},
                      {"codec", codec_params_to_json(codec.params)},
                      {"prompt", prompt_to_json(codec.prompt)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_atomically(bundle_manifest_path(ckpt), [&](std::ostream& out) { out << m.dump(2) << '\n'; });
}

struct Bundle {
  std::unique_ptr<Codec> codec;
  std::unique_ptr<GraspModel> model;
};

inline Bundle load_bundle(const std::filesystem::path& ckpt, const HandModel& hand) {
  const auto mpath = bundle_manifest_path(ckpt);
  std::ifstream in(mpath);
  if (!in) throw Error(ErrorKind::Format, "missing checkpoint manifest " + mpath.string());
  nlohmann::json m;
  try {
    in >> m;
    if (m.at("version").get<int>() != kBundleVersion) throw Error(ErrorKind::Format, "unsupported bundle version");
    Bundle b;
    b.codec = std::make_unique<Codec>(hand, prompt_from_json(m.at("prompt")), codec_params_from_json(m.at("codec")));
    b.model = std::make_unique<GraspModel>(load_checkpoint(ckpt.string()));
    check_vocabulary(b.model->checkpoint(), b.codec->vocab);
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, mpath.string() + ": " + e.what());
  }
}

/// Training examples from a token file; encoder inputs are shared per cloud.
inline std::vector<TrainingExample> training_examples(const TokenFile& f, const PointEncoderConfig& enc) {
  CloudCache clouds(f.header.dataset_dir);
  std::map<std::string, std::shared_ptr<const EncoderInput>> prepared;
  std::vector<TrainingExample> out;
  out.reserve(f.records.size());
  for (const auto& r : f.records) {
    auto& e = prepared[r.cloud_file];
    if (!e) e = std::make_shared<EncoderInput>(prepare_encoder_input(clouds.get(r.cloud_file), enc));
    out.push_back({r.sequence, e});
  }
  return out;
}

}  // namespace cgrasp
