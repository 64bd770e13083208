#pragma once

#include <cstddef>
#include <cstdint>

#include <json.hpp>

#include "cgrasp/error.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

struct PointEncoderConfig {
  std::size_t n_centroids = 16;  ///< visual tokens M
  std::size_t neighborhood = 32;  ///< k
  std::size_t feature_width = 32;  ///< per-point hidden width
  double coord_scale = 10.0;  ///< meters -> network units
};

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_sequence_length = 192;
  std::size_t vocab_size = 0;
  PointEncoderConfig encoder;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw Error(ErrorKind::InvalidArgument, "d_model must be divisible by n_heads");
    if (n_layers == 0) throw Error(ErrorKind::InvalidArgument, "n_layers must be >= 1");
    if (encoder.n_centroids < 1) throw Error(ErrorKind::InvalidArgument, "need at least one visual token");
    if (encoder.neighborhood < 1) throw Error(ErrorKind::InvalidArgument, "neighborhood size must be >= 1");
    if (vocab_size == 0) throw Error(ErrorKind::InvalidArgument, "vocab_size not set");
    if (max_sequence_length < 2) throw Error(ErrorKind::InvalidArgument, "max_sequence_length too small");
  }
};

/// Optimizer and schedule. Learning rate follows linear warmup then cosine
/// decay to zero at total_steps.
struct TrainConfig {
  std::size_t total_steps = 20000;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;
  std::size_t warmup_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double weight_decay = 1e-10;
  double grad_clip = 1.0;
  double p_drop = 0.15;
  DropoutGranularity dropout_granularity = DropoutGranularity::Contact;
  bool loss_on_prompt = false;
  /// Trains with empty contact blocks (ablation without contact reasoning).
  bool strip_contacts = false;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  ///< 0 = hardware concurrency
  std::size_t log_every = 0;  ///< 0 = silent
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},
          {"mlp_ratio", c.mlp_ratio},
          {"max_sequence_length", c.max_sequence_length},
          {"vocab_size", c.vocab_size},
          {"encoder",
           {{"n_centroids", c.encoder.n_centroids},
            {"neighborhood", c.encoder.neighborhood},
            {"feature_width", c.encoder.feature_width},
            {"coord_scale", c.encoder.coord_scale}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.max_sequence_length = j.at("max_sequence_length").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  const auto& e = j.at("encoder");
  c.encoder.n_centroids = e.at("n_centroids").get<std::size_t>();
  c.encoder.neighborhood = e.at("neighborhood").get<std::size_t>();
  c.encoder.feature_width = e.at("feature_width").get<std::size_t>();
  c.encoder.coord_scale = e.at("coord_scale").get<double>();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"warmup_steps", t.warmup_steps},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"weight_decay", t.weight_decay},
          {"grad_clip", t.grad_clip},
          {"p_drop", t.p_drop},
          {"dropout_granularity", t.dropout_granularity == DropoutGranularity::Contact ? "contact" : "sequence"},
          {"loss_on_prompt", t.loss_on_prompt},
          {"strip_contacts", t.strip_contacts},
          {"seed", t.seed}};
}

}  // namespace cgrasp
