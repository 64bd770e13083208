#pragma once

// Next-token training with AdamW, linear warmup then cosine decay, and global
// norm clipping. Per-sample gradients land in private buffers and are summed
// in sample order, so results do not depend on the worker count.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include "cgrasp/error.hpp"
#include "cgrasp/model/config.hpp"
#include "cgrasp/model/network.hpp"
#include "cgrasp/random.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

struct TrainingExample {
  TokenSequence sequence;  ///< encoded without position dropout
  std::shared_ptr<const EncoderInput> encoder_input;
};

inline double learning_rate_at(const TrainConfig& t, std::size_t step) {
  if (t.warmup_steps > 0 && step < t.warmup_steps)
    return t.learning_rate * static_cast<double>(step + 1) / static_cast<double>(t.warmup_steps);
  const double span = static_cast<double>(std::max<std::size_t>(1, t.total_steps - std::min(t.total_steps, t.warmup_steps)));
  const double progress = std::min(1.0, static_cast<double>(step - std::min(step, t.warmup_steps)) / span);
  return t.learning_rate * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename T>
class AdamW {
 public:
  AdamW(std::size_t n, const TrainConfig& cfg) : cfg_(cfg), m_(n, T(0)), v_(n, T(0)) {}

  void update(std::span<T> params, std::span<const T> grad, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(lr / bc1), decay = static_cast<T>(lr * cfg_.weight_decay);
    const T inv_bc2 = static_cast<T>(1.0 / bc2), eps = static_cast<T>(cfg_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (T(1) - b1) * grad[i];
      v_[i] = b2 * v_[i] + (T(1) - b2) * grad[i] * grad[i];
      params[i] -= decay * params[i] + step * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<T> m_, v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::vector<float> params;
  std::vector<double> loss_curve;  ///< mean per-token loss of each step's batch
  std::size_t steps = 0;
};

/// Receives (step, loss, learning rate) after each update.
using StepCallback = std::function<void(std::size_t, double, double)>;

inline TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Vocabulary& vocab,
                         std::span<const TrainingExample> data, const StepCallback& on_step = {}) {
  if (data.empty()) throw Error(ErrorKind::EmptyInput, "training set is empty");
  if (tcfg.batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].sequence.ids.size() > mcfg.max_sequence_length)
      throw Error(ErrorKind::TruncationError, "example " + std::to_string(i) + " has " +
                                                  std::to_string(data[i].sequence.ids.size()) +
                                                  " tokens, max_sequence_length is " +
                                                  std::to_string(mcfg.max_sequence_length));
    if (!data[i].encoder_input) throw Error(ErrorKind::InvalidArgument, "example without encoder input");
  }
  const ParamLayout layout(mcfg);
  TrainResult out;
  out.params = init_params<float>(mcfg, layout, tcfg.seed);
  AdamW<float> opt(layout.total(), tcfg);
  const std::size_t workers = std::max<std::size_t>(
      1, std::min(tcfg.batch_size, tcfg.threads ? tcfg.threads : std::size_t(std::thread::hardware_concurrency())));
  std::vector<std::vector<float>> grads(tcfg.batch_size, std::vector<float>(layout.total()));
  std::vector<LossSum<float>> losses(tcfg.batch_size);
  std::vector<float> total(layout.total());

  Rng order_rng(derive_seed(tcfg.seed, 0x0de5));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (std::size_t step = 0; step < tcfg.total_steps; ++step) {
    std::vector<std::size_t> batch(tcfg.batch_size);
    for (auto& b : batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      b = order[cursor++];
    }
    const Network<float> net(mcfg, layout, out.params);
    auto run = [&](std::size_t slot) {
      const auto& ex = data[batch[slot]];
      Rng rng(derive_seed(tcfg.seed, (step << 16) | slot));
      TokenSequence seq = tcfg.strip_contacts ? strip_contacts(vocab, ex.sequence) : ex.sequence;
      seq = apply_position_dropout(vocab, seq, tcfg.p_drop, rng, tcfg.dropout_granularity);
      std::fill(grads[slot].begin(), grads[slot].end(), 0.0f);
      losses[slot] = net.loss_and_grad(seq, make_targets(seq, tcfg.loss_on_prompt), *ex.encoder_input, grads[slot]);
    };
    if (workers == 1) {
      for (std::size_t s = 0; s < batch.size(); ++s) run(s);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t s = w; s < batch.size(); s += workers) run(s);
        });
    }
    double loss_sum = 0.0;
    std::size_t count = 0;
    std::fill(total.begin(), total.end(), 0.0f);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      loss_sum += static_cast<double>(losses[s].sum);
      count += losses[s].count;
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += grads[s][i];
    }
    const float inv = count ? 1.0f / static_cast<float>(count) : 0.0f;
    double norm2 = 0.0;
    for (auto& g : total) {
      g *= inv;
      norm2 += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(norm2);
    if (tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip) {
      const float s = static_cast<float>(tcfg.grad_clip / norm);
      for (auto& g : total) g *= s;
    }
    const double lr = learning_rate_at(tcfg, step);
    opt.update(out.params, total, lr);
    const double loss = count ? loss_sum / static_cast<double>(count) : 0.0;
    out.loss_curve.push_back(loss);
    out.steps = step + 1;
    if (on_step) on_step(step, loss, lr);
  }
  return out;
}

}  // namespace cgrasp
