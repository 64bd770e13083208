#pragma once

// Analytic gradients versus central finite differences, double precision,
// on a tiny random network and sequence.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cgrasp/model/network.hpp"
#include "cgrasp/random.hpp"

namespace cgrasp {

struct GroupError {
  std::string group;
  double max_relative_error = 0.0;
};

struct GradientCheckReport {
  std::vector<GroupError> groups;
  double max_relative_error = 0.0;
};

struct GradientCheckOptions {
  double step = 1e-4;
  /// Denominator floor so that near-zero gradients compare absolutely.
  double floor = 1e-6;
};

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.mlp_ratio = 2;
  c.max_sequence_length = 12;
  c.vocab_size = 24;
  c.encoder.n_centroids = 3;
  c.encoder.neighborhood = 4;
  c.encoder.feature_width = 6;
  return c;
}

/// Random problem used by the check: a 24-point cloud and a 12-token sequence
/// with layout (2, 3, 2, 3, 2).
struct GradientProblem {
  ModelConfig config;
  ParamLayout layout;
  std::vector<double> params;
  EncoderInput encoder_input;
  TokenSequence sequence;
};

inline GradientProblem make_gradient_problem(std::uint64_t seed) {
  GradientProblem p;
  p.config = tiny_model_config();
  p.layout = ParamLayout(p.config);
  p.params = init_params<double>(p.config, p.layout, seed);
  Rng rng(derive_seed(seed, 0x9c));
  // Move LayerNorm gains and biases off their symmetric initial values.
  for (auto& v : p.params) v += 0.1 * (uniform01(rng) - 0.5);
  PointCloud cloud;
  for (int i = 0; i < 24; ++i)
    cloud.points.emplace_back(uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05));
  p.encoder_input = prepare_encoder_input(cloud, p.config.encoder);
  p.sequence.layout = SegmentLayout{2, 3, 2, 3, 2};
  for (std::size_t i = 0; i < p.sequence.layout.total(); ++i)
    p.sequence.ids.push_back(static_cast<TokenId>(uniform_index(rng, p.config.vocab_size)));
  return p;
}

inline GradientCheckReport gradient_check(std::uint64_t seed, const GradientCheckOptions& opts = {}) {
  GradientProblem p = make_gradient_problem(seed);
  const Targets targets = make_targets(p.sequence, true);
  std::vector<double> grad(p.layout.total(), 0.0);
  Network<double>(p.config, p.layout, p.params).loss_and_grad(p.sequence, targets, p.encoder_input, grad);
  auto loss_at = [&](std::size_t i, double delta) {
    const double saved = p.params[i];
    p.params[i] = saved + delta;
    const double l =
        Network<double>(p.config, p.layout, p.params).loss_and_grad(p.sequence, targets, p.encoder_input, {}).sum;
    p.params[i] = saved;
    return l;
  };
  GradientCheckReport report;
  for (const auto& g : p.layout.groups()) {
    GroupError ge{g.name, 0.0};
    for (std::size_t i = g.offset; i < g.offset + g.size(); ++i) {
      const double h = opts.step;
      // Fourth-order central stencil; truncation error O(h^4).
      const double fd =
          (8.0 * (loss_at(i, h) - loss_at(i, -h)) - (loss_at(i, 2.0 * h) - loss_at(i, -2.0 * h))) / (12.0 * h);
      const double err = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), opts.floor});
      ge.max_relative_error = std::max(ge.max_relative_error, err);
    }
    report.max_relative_error = std::max(report.max_relative_error, ge.max_relative_error);
    report.groups.push_back(ge);
  }
  return report;
}

}  // namespace cgrasp
