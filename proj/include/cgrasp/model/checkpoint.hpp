#pragma once

// Binary checkpoint: 8-byte magic, u32 format version, u32 length + JSON
// model config, u64 vocabulary hash, u64 step counter, u64 parameter count,
// then little-endian float32 parameters in layout order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/model/config.hpp"
#include "cgrasp/model/network.hpp"

namespace cgrasp {

inline constexpr char kCheckpointMagic[8] = {'C', 'G', 'R', 'A', 'S', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::uint64_t step = 0;
  std::vector<float> params;
};

namespace detail {

template <typename U>
void write_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw Error(ErrorKind::Format, "truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  const ParamLayout layout(ck.config);
  if (layout.total() != ck.params.size())
    throw Error(ErrorKind::InvalidArgument, "parameter count does not match the model config");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = to_json(ck.config).dump();
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::write_le<std::uint64_t>(out, ck.vocab_hash);
  detail::write_le<std::uint64_t>(out, ck.step);
  detail::write_le<std::uint64_t>(out, ck.params.size());
  for (float p : ck.params) detail::write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(p));
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw Error(ErrorKind::Format, "not a checkpoint file");
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  std::string cfg(detail::read_le<std::uint32_t>(in), '\0');
  if (!in.read(cfg.data(), static_cast<std::streamsize>(cfg.size()))) throw Error(ErrorKind::Format, "truncated checkpoint");
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(cfg));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad checkpoint config: ") + e.what());
  }
  ck.vocab_hash = detail::read_le<std::uint64_t>(in);
  ck.step = detail::read_le<std::uint64_t>(in);
  const auto n = detail::read_le<std::uint64_t>(in);
  if (n != ParamLayout(ck.config).total())
    throw Error(ErrorKind::Format, "checkpoint parameter count does not match its config");
  ck.params.resize(n);
  for (auto& p : ck.params) p = std::bit_cast<float>(detail::read_le<std::uint32_t>(in));
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Format, "cannot write " + path);
  write_checkpoint(out, ck);
  if (!out) throw Error(ErrorKind::Format, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Format, "cannot open " + path);
  return read_checkpoint(in);
}

inline void check_vocabulary(const Checkpoint& ck, const Vocabulary& vocab) {
  if (ck.vocab_hash != vocab.hash() || ck.config.vocab_size != vocab.size())
    throw Error(ErrorKind::VocabularyMismatch, "checkpoint was trained with a different vocabulary");
}

}  // namespace cgrasp
