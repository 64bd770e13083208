#pragma once

// Point-cloud encoder and decoder-only transformer with a hand-written
// backward pass. Templated on the scalar type: float for training and
// inference, double for gradient checks.
//
// Encoder: farthest-point-sampled centroids, each with its k nearest points
// featurized as [(p - c), c] * coord_scale, a shared two-layer per-point MLP
// (ReLU between), max-pooling over the neighbourhood, and a two-layer GELU
// projector into the token embedding width.
//
// Decoder: learned token and position embeddings, pre-LayerNorm blocks with
// multi-head attention under the prefix-LM mask and a GELU MLP, final
// LayerNorm and an untied output head.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cgrasp/error.hpp"
#include "cgrasp/geometry.hpp"
#include "cgrasp/model/attention_mask.hpp"
#include "cgrasp/model/config.hpp"
#include "cgrasp/random.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

template <typename T>
using MatrixR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

/// Flat parameter layout; every tensor is row-major inside one contiguous buffer.
class ParamLayout {
 public:
  struct Layer {
    std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.d_model, h = c.encoder.feature_width, f = c.mlp_ratio * d;
    enc_w1 = add("encoder.w1", 6, h);
    enc_b1 = add("encoder.b1", 1, h);
    enc_w2 = add("encoder.w2", h, h);
    enc_b2 = add("encoder.b2", 1, h);
    proj_w1 = add("projector.w1", h, d);
    proj_b1 = add("projector.b1", 1, d);
    proj_w2 = add("projector.w2", d, d);
    proj_b2 = add("projector.b2", 1, d);
    tok_emb = add("token_embedding", c.vocab_size, d);
    pos_emb = add("position_embedding", c.max_sequence_length, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(p + "ln1.gain", 1, d);
      L.ln1_b = add(p + "ln1.bias", 1, d);
      L.wqkv = add(p + "attn.wqkv", d, 3 * d);
      L.bqkv = add(p + "attn.bqkv", 1, 3 * d);
      L.wo = add(p + "attn.wo", d, d);
      L.bo = add(p + "attn.bo", 1, d);
      L.ln2_g = add(p + "ln2.gain", 1, d);
      L.ln2_b = add(p + "ln2.bias", 1, d);
      L.w1 = add(p + "mlp.w1", d, f);
      L.b1 = add(p + "mlp.b1", 1, f);
      L.w2 = add(p + "mlp.w2", f, d);
      L.b2 = add(p + "mlp.b2", 1, d);
      layers.push_back(L);
    }
    lnf_g = add("final_ln.gain", 1, d);
    lnf_b = add("final_ln.bias", 1, d);
    head_w = add("head.w", d, c.vocab_size);
    head_b = add("head.b", 1, c.vocab_size);
  }

  const std::vector<ParamGroup>& groups() const { return groups_; }
  const ParamGroup& group(std::size_t i) const { return groups_[i]; }
  std::size_t total() const { return total_; }

  std::size_t enc_w1 = 0, enc_b1 = 0, enc_w2 = 0, enc_b2 = 0;
  std::size_t proj_w1 = 0, proj_b1 = 0, proj_w2 = 0, proj_b2 = 0;
  std::size_t tok_emb = 0, pos_emb = 0;
  std::vector<Layer> layers;
  std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    groups_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
    return groups_.size() - 1;
  }

  std::vector<ParamGroup> groups_;
  std::size_t total_ = 0;
};

/// Normal(0, 0.02) weights (residual output projections scaled by
/// 1/sqrt(2 * n_layers)), zero biases, unit LayerNorm gains.
template <typename T>
std::vector<T> init_params(const ModelConfig& cfg, const ParamLayout& layout, std::uint64_t seed) {
  std::vector<T> p(layout.total(), T(0));
  Rng rng(derive_seed(seed, 0x1417));
  auto fill = [&](std::size_t gi, double std) {
    const auto& g = layout.group(gi);
    for (std::size_t i = 0; i < g.size(); ++i) p[g.offset + i] = static_cast<T>(std * cgrasp::normal(rng));
  };
  auto ones = [&](std::size_t gi) {
    const auto& g = layout.group(gi);
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(g.offset),
              p.begin() + static_cast<std::ptrdiff_t>(g.offset + g.size()), T(1));
  };
  const double resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  fill(layout.enc_w1, std::sqrt(2.0 / 6.0));
  fill(layout.enc_w2, std::sqrt(1.0 / static_cast<double>(cfg.encoder.feature_width)));
  fill(layout.proj_w1, std::sqrt(1.0 / static_cast<double>(cfg.encoder.feature_width)));
  fill(layout.proj_w2, 0.02);
  fill(layout.tok_emb, 0.02);
  fill(layout.pos_emb, 0.02);
  for (const auto& L : layout.layers) {
    ones(L.ln1_g);
    ones(L.ln2_g);
    fill(L.wqkv, 0.02);
    fill(L.wo, resid);
    fill(L.w1, 0.02);
    fill(L.w2, resid);
  }
  ones(layout.lnf_g);
  fill(layout.head_w, 0.02);
  return p;
}

// ---- point grouping -------------------------------------------------------------

/// Farthest point sampling. Starts from the point farthest from the cloud
/// mean; every distance tie resolves to the lowest index.
inline std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> points, std::size_t m) {
  if (points.size() < m)
    throw Error(ErrorKind::InsufficientPoints, "cloud has " + std::to_string(points.size()) + " points, need " +
                                                   std::to_string(m));
  Vec3 mean = Vec3::Zero();
  for (const auto& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  std::vector<std::size_t> out;
  std::vector<double> mind(points.size(), std::numeric_limits<double>::infinity());
  std::size_t next = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d = (points[i] - mean).squaredNorm();
    if (d > best) best = d, next = i;
  }
  while (out.size() < m) {
    const std::size_t cur = next;
    out.push_back(cur);
    best = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      mind[i] = std::min(mind[i], (points[i] - points[cur]).squaredNorm());
      if (mind[i] > best) best = mind[i], next = i;
    }
  }
  return out;
}

/// Geometry-only encoder input: centroids and their neighbourhood features.
struct EncoderInput {
  std::size_t m = 0;
  std::size_t k = 0;
  std::vector<Vec3> centroids;
  std::vector<double> features;  ///< (m * k) x 6, row-major
};

inline EncoderInput prepare_encoder_input(const PointCloud& cloud, const PointEncoderConfig& cfg) {
  cloud.validate();
  EncoderInput in;
  in.m = cfg.n_centroids;
  in.k = std::min(cfg.neighborhood, cloud.size());
  const auto idx = farthest_point_sample(cloud.points, in.m);
  std::vector<std::pair<double, std::size_t>> dist(cloud.size());
  for (std::size_t j = 0; j < in.m; ++j) {
    const Vec3 c = cloud.points[idx[j]];
    in.centroids.push_back(c);
    for (std::size_t i = 0; i < cloud.size(); ++i) dist[i] = {(cloud.points[i] - c).squaredNorm(), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(in.k), dist.end());
    for (std::size_t r = 0; r < in.k; ++r) {
      const Vec3 rel = (cloud.points[dist[r].second] - c) * cfg.coord_scale;
      const Vec3 abs = c * cfg.coord_scale;
      for (int a = 0; a < 3; ++a) in.features.push_back(rel[a]);
      for (int a = 0; a < 3; ++a) in.features.push_back(abs[a]);
    }
  }
  return in;
}

// ---- loss targets ------------------------------------------------------------------

/// Next-token targets: row t predicts ids[t + 1] when active[t] is set.
struct Targets {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> active;

  std::size_t count() const { return static_cast<std::size_t>(std::count(active.begin(), active.end(), 1)); }
};

/// Default span covers contact and action blocks; `loss_on_prompt` extends it
/// to every text token. Point-cloud placeholders are never targets.
inline Targets make_targets(const TokenSequence& seq, bool loss_on_prompt) {
  const std::size_t n = seq.ids.size();
  Targets t;
  t.ids.assign(n, 0);
  t.active.assign(n, 0);
  const auto& L = seq.layout;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const std::size_t target = i + 1;
    t.ids[i] = seq.ids[target];
    const bool in_pc = target >= L.pc_begin() && target < L.pc_end();
    const bool in_answer = target >= L.contact_begin();
    t.active[i] = (in_answer || (loss_on_prompt && !in_pc)) ? 1 : 0;
  }
  return t;
}

// ---- network -------------------------------------------------------------------------

template <typename T>
struct LossSum {
  T sum = T(0);
  std::size_t count = 0;
};

template <typename T>
class Network {
 public:
  using Mat = MatrixR<T>;
  using Row = RowVec<T>;
  using CMap = Eigen::Map<const Mat>;
  using GMap = Eigen::Map<Mat>;

  Network(const ModelConfig& cfg, const ParamLayout& layout, std::span<const T> params)
      : cfg_(cfg), layout_(layout), params_(params) {
    if (params.size() != layout.total()) throw Error(ErrorKind::InvalidArgument, "parameter count mismatch");
  }

  const ModelConfig& config() const { return cfg_; }

  struct EncoderCache {
    Mat feats, h1, h2, pooled, z1, g;
    std::vector<std::size_t> argmax;  ///< m x width, row index within (m * k)
  };

  struct LayerCache {
    Mat x_in, xhat1, a, qkv, attn, h_mid, xhat2, m, u, g;
    std::vector<T> rstd1, rstd2;
    std::vector<Mat> probs;
  };

  struct Cache {
    EncoderCache enc;
    AttentionMask mask;
    std::vector<LayerCache> layers;
    Mat h_out, xhatf, z;
    std::vector<T> rstdf;
  };

  /// M x d_model visual token embeddings.
  Mat encode(const EncoderInput& in, EncoderCache* cache = nullptr) const {
    EncoderCache local;
    EncoderCache& c = cache ? *cache : local;
    const std::size_t rows = in.m * in.k, width = cfg_.encoder.feature_width;
    c.feats.resize(static_cast<Eigen::Index>(rows), 6);
    for (std::size_t i = 0; i < rows * 6; ++i) c.feats.data()[i] = static_cast<T>(in.features[i]);
    c.h1 = ((c.feats * P(layout_.enc_w1)).rowwise() + R(layout_.enc_b1)).cwiseMax(T(0));
    c.h2 = (c.h1 * P(layout_.enc_w2)).rowwise() + R(layout_.enc_b2);
    c.pooled.resize(static_cast<Eigen::Index>(in.m), static_cast<Eigen::Index>(width));
    c.argmax.assign(in.m * width, 0);
    for (std::size_t j = 0; j < in.m; ++j) {
      for (std::size_t f = 0; f < width; ++f) {
        std::size_t best = j * in.k;
        for (std::size_t r = j * in.k + 1; r < (j + 1) * in.k; ++r)
          if (c.h2(idx(r), idx(f)) > c.h2(idx(best), idx(f))) best = r;
        c.argmax[j * width + f] = best;
        c.pooled(idx(j), idx(f)) = c.h2(idx(best), idx(f));
      }
    }
    c.z1 = (c.pooled * P(layout_.proj_w1)).rowwise() + R(layout_.proj_b1);
    c.g = c.z1.unaryExpr([](T x) { return gelu(x); });
    return (c.g * P(layout_.proj_w2)).rowwise() + R(layout_.proj_b2);
  }

  /// Summed next-token cross-entropy over active targets. When `grad` is
  /// non-empty the gradient of that sum is accumulated into it.
  LossSum<T> loss_and_grad(const TokenSequence& seq, const Targets& targets, const EncoderInput& enc,
                           std::span<T> grad, Cache* cache_out = nullptr) const {
    Cache local;
    Cache& c = cache_out ? *cache_out : local;
    const Mat vis = encode(enc, &c.enc);
    const Mat h = forward_hidden(seq, vis, c);

    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < seq.ids.size(); ++t)
      if (targets.active[t]) rows.push_back(t);
    LossSum<T> out;
    out.count = rows.size();
    if (rows.empty()) return out;

    const std::size_t d = cfg_.d_model;
    Mat zr(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    for (std::size_t r = 0; r < rows.size(); ++r) zr.row(idx(r)) = c.z.row(idx(rows[r]));
    Mat logits = (zr * P(layout_.head_w)).rowwise() + R(layout_.head_b);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto row = logits.row(idx(r));
      const T mx = row.maxCoeff();
      row.array() -= mx;
      const T lse = std::log(row.array().exp().sum());
      out.sum += lse - row(idx(targets.ids[rows[r]]));
      row.array() = (row.array() - lse).exp();  // probabilities, reused as dlogits below
      row(idx(targets.ids[rows[r]])) -= T(1);
    }
    if (grad.empty()) return out;
    if (grad.size() != layout_.total()) throw Error(ErrorKind::InvalidArgument, "gradient buffer size mismatch");

    const Mat& dlogits = logits;
    G(grad, layout_.head_w).noalias() += zr.transpose() * dlogits;
    GR(grad, layout_.head_b) += dlogits.colwise().sum();
    const Mat dzr = dlogits * P(layout_.head_w).transpose();
    Mat dz = Mat::Zero(c.z.rows(), c.z.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) dz.row(idx(rows[r])) += dzr.row(idx(r));
    backward(seq, c, dz, grad);
    return out;
  }

  /// Logits for every position (n x vocab).
  Mat forward_logits(const TokenSequence& seq, const EncoderInput& enc, Cache* cache_out = nullptr) const {
    Cache local;
    Cache& c = cache_out ? *cache_out : local;
    const Mat vis = encode(enc, &c.enc);
    forward_hidden(seq, vis, c);
    return (c.z * P(layout_.head_w)).rowwise() + R(layout_.head_b);
  }

  // ---- incremental decoding ----------------------------------------------------------

  /// Key/value cache for autoregressive decoding of a frozen network.
  struct Session {
    std::vector<Mat> keys, values;
    std::size_t length = 0;
  };

  /// Runs the prompt (its layout must end at text_post) and returns the
  /// logits of the last position.
  Row prefill(const TokenSequence& prompt, const Mat& vis, Session& s) const {
    Cache c;
    forward_hidden(prompt, vis, c);
    const std::size_t n = prompt.ids.size(), d = cfg_.d_model;
    s.keys.assign(cfg_.n_layers, Mat::Zero(static_cast<Eigen::Index>(cfg_.max_sequence_length),
                                           static_cast<Eigen::Index>(d)));
    s.values = s.keys;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      s.keys[l].topRows(idx(n)) = c.layers[l].qkv.middleCols(idx(d), idx(d));
      s.values[l].topRows(idx(n)) = c.layers[l].qkv.rightCols(idx(d));
    }
    s.length = n;
    return c.z.row(idx(n - 1)) * P(layout_.head_w) + R(layout_.head_b);
  }

  /// Appends one token (causal position after the prompt) and returns its logits.
  Row step(TokenId token, Session& s) const {
    const std::size_t pos = s.length, d = cfg_.d_model, dh = cfg_.head_dim();
    if (pos >= cfg_.max_sequence_length)
      throw Error(ErrorKind::TruncationError, "sequence exceeds max_sequence_length");
    Mat x = P(layout_.tok_emb).row(idx(token)) + P(layout_.pos_emb).row(idx(pos));
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat xhat;
    std::vector<T> rstd;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const auto& L = layout_.layers[l];
      const Mat a = layer_norm(x, L.ln1_g, L.ln1_b, xhat, rstd);
      const Row qkv = a * P(L.wqkv) + R(L.bqkv);
      s.keys[l].row(idx(pos)) = qkv.segment(idx(d), idx(d));
      s.values[l].row(idx(pos)) = qkv.segment(idx(2 * d), idx(d));
      Row attn(idx(d));
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto q = qkv.segment(idx(h * dh), idx(dh));
        const auto K = s.keys[l].block(0, idx(h * dh), idx(pos + 1), idx(dh));
        const auto V = s.values[l].block(0, idx(h * dh), idx(pos + 1), idx(dh));
        Row sc = (q * K.transpose()) * scale;
        sc.array() = (sc.array() - sc.maxCoeff()).exp();
        sc /= sc.sum();
        attn.segment(idx(h * dh), idx(dh)) = sc * V;
      }
      x += attn * P(L.wo) + R(L.bo);
      const Mat m = layer_norm(x, L.ln2_g, L.ln2_b, xhat, rstd);
      const Row u = m * P(L.w1) + R(L.b1);
      x += u.unaryExpr([](T v) { return gelu(v); }) * P(L.w2) + R(L.b2);
    }
    const Mat z = layer_norm(x, layout_.lnf_g, layout_.lnf_b, xhat, rstd);
    s.length = pos + 1;
    return z * P(layout_.head_w) + R(layout_.head_b);
  }

 private:
  static constexpr T kLnEps = T(1e-5);

  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

  static T gelu(T x) {
    constexpr T k = T(0.7978845608028654);
    return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
  }
  static T gelu_grad(T x) {
    constexpr T k = T(0.7978845608028654);
    const T th = std::tanh(k * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k * (T(1) + T(3) * T(0.044715) * x * x);
  }

  CMap P(std::size_t gi) const {
    const auto& g = layout_.group(gi);
    return CMap(params_.data() + g.offset, idx(g.rows), idx(g.cols));
  }
  Eigen::Map<const Row> R(std::size_t gi) const {
    const auto& g = layout_.group(gi);
    return Eigen::Map<const Row>(params_.data() + g.offset, idx(g.size()));
  }
  GMap G(std::span<T> grad, std::size_t gi) const {
    const auto& g = layout_.group(gi);
    return GMap(grad.data() + g.offset, idx(g.rows), idx(g.cols));
  }
  Eigen::Map<Row> GR(std::span<T> grad, std::size_t gi) const {
    const auto& g = layout_.group(gi);
    return Eigen::Map<Row>(grad.data() + g.offset, idx(g.size()));
  }

  Mat layer_norm(const Mat& x, std::size_t gain, std::size_t bias, Mat& xhat, std::vector<T>& rstd) const {
    const auto n = x.rows();
    xhat.resize(n, x.cols());
    rstd.resize(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
      const T mean = x.row(r).mean();
      const T var = (x.row(r).array() - mean).square().mean();
      const T rs = T(1) / std::sqrt(var + kLnEps);
      rstd[static_cast<std::size_t>(r)] = rs;
      xhat.row(r) = (x.row(r).array() - mean) * rs;
    }
    return (xhat.array().rowwise() * R(gain).array()).rowwise() + R(bias).array();
  }

  Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const std::vector<T>& rstd, std::size_t gain,
                          std::size_t bias, std::span<T> grad) const {
    GR(grad, gain) += (dy.array() * xhat.array()).colwise().sum().matrix();
    GR(grad, bias) += dy.colwise().sum();
    Mat dxhat = dy.array().rowwise() * R(gain).array();
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const T m1 = dxhat.row(r).mean();
      const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
      dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * rstd[static_cast<std::size_t>(r)];
    }
    return dx;
  }

  Mat forward_hidden(const TokenSequence& seq, const Mat& vis, Cache& c) const {
    const std::size_t n = seq.ids.size(), d = cfg_.d_model, dh = cfg_.head_dim();
    const auto& L0 = seq.layout;
    if (L0.total() != n) throw Error(ErrorKind::LayoutError, "layout does not cover the sequence");
    if (n > cfg_.max_sequence_length)
      throw Error(ErrorKind::TruncationError, "sequence of " + std::to_string(n) + " tokens exceeds max_sequence_length " +
                                                  std::to_string(cfg_.max_sequence_length));
    if (L0.pc != static_cast<std::size_t>(vis.rows()))
      throw Error(ErrorKind::LayoutError, "point-cloud span differs from visual token count");
    c.mask = AttentionMask(L0);
    Mat x(idx(n), idx(d));
    for (std::size_t t = 0; t < n; ++t) {
      const bool pc = t >= L0.pc_begin() && t < L0.pc_end();
      if (!pc && seq.ids[t] >= cfg_.vocab_size) throw Error(ErrorKind::InvalidArgument, "token id out of range");
      x.row(idx(t)) = (pc ? Row(vis.row(idx(t - L0.pc_begin()))) : Row(P(layout_.tok_emb).row(idx(seq.ids[t])))) +
                      P(layout_.pos_emb).row(idx(t));
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    c.layers.resize(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const auto& L = layout_.layers[l];
      auto& lc = c.layers[l];
      lc.x_in = x;
      lc.a = layer_norm(x, L.ln1_g, L.ln1_b, lc.xhat1, lc.rstd1);
      lc.qkv = (lc.a * P(L.wqkv)).rowwise() + R(L.bqkv);
      lc.attn.resize(idx(n), idx(d));
      lc.probs.resize(cfg_.n_heads);
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto Q = lc.qkv.middleCols(idx(h * dh), idx(dh));
        const auto K = lc.qkv.middleCols(idx(d + h * dh), idx(dh));
        const auto V = lc.qkv.middleCols(idx(2 * d + h * dh), idx(dh));
        Mat& Pm = lc.probs[h];
        Pm.noalias() = (Q * K.transpose()) * scale;
        for (std::size_t q = 0; q < n; ++q) {
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t k = 0; k < n; ++k)
            if (c.mask(q, k)) mx = std::max(mx, Pm(idx(q), idx(k)));
          T sum = T(0);
          for (std::size_t k = 0; k < n; ++k) {
            const T e = c.mask(q, k) ? std::exp(Pm(idx(q), idx(k)) - mx) : T(0);
            Pm(idx(q), idx(k)) = e;
            sum += e;
          }
          Pm.row(idx(q)) /= sum;
        }
        lc.attn.middleCols(idx(h * dh), idx(dh)).noalias() = Pm * V;
      }
      lc.h_mid = x + ((lc.attn * P(L.wo)).rowwise() + R(L.bo));
      lc.m = layer_norm(lc.h_mid, L.ln2_g, L.ln2_b, lc.xhat2, lc.rstd2);
      lc.u = (lc.m * P(L.w1)).rowwise() + R(L.b1);
      lc.g = lc.u.unaryExpr([](T v) { return gelu(v); });
      x = lc.h_mid + ((lc.g * P(L.w2)).rowwise() + R(L.b2));
    }
    c.h_out = x;
    c.z = layer_norm(x, layout_.lnf_g, layout_.lnf_b, c.xhatf, c.rstdf);
    return c.z;
  }

  void backward(const TokenSequence& seq, const Cache& c, const Mat& dz, std::span<T> grad) const {
    const std::size_t n = seq.ids.size(), d = cfg_.d_model, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat dx = layer_norm_backward(dz, c.xhatf, c.rstdf, layout_.lnf_g, layout_.lnf_b, grad);
    for (std::size_t li = cfg_.n_layers; li-- > 0;) {
      const auto& L = layout_.layers[li];
      const auto& lc = c.layers[li];
      // MLP branch
      G(grad, L.w2).noalias() += lc.g.transpose() * dx;
      GR(grad, L.b2) += dx.colwise().sum();
      Mat du = (dx * P(L.w2).transpose()).array() * lc.u.unaryExpr([](T v) { return gelu_grad(v); }).array();
      G(grad, L.w1).noalias() += lc.m.transpose() * du;
      GR(grad, L.b1) += du.colwise().sum();
      Mat dm = du * P(L.w1).transpose();
      Mat dh_mid = dx + layer_norm_backward(dm, lc.xhat2, lc.rstd2, L.ln2_g, L.ln2_b, grad);
      // attention branch
      G(grad, L.wo).noalias() += lc.attn.transpose() * dh_mid;
      GR(grad, L.bo) += dh_mid.colwise().sum();
      Mat dattn = dh_mid * P(L.wo).transpose();
      Mat dqkv = Mat::Zero(idx(n), idx(3 * d));
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto Q = lc.qkv.middleCols(idx(h * dh), idx(dh));
        const auto K = lc.qkv.middleCols(idx(d + h * dh), idx(dh));
        const auto V = lc.qkv.middleCols(idx(2 * d + h * dh), idx(dh));
        const Mat& Pm = lc.probs[h];
        const auto dO = dattn.middleCols(idx(h * dh), idx(dh));
        Mat dP = dO * V.transpose();
        dqkv.middleCols(idx(2 * d + h * dh), idx(dh)).noalias() += Pm.transpose() * dO;
        Mat dS = Pm.array() * (dP.colwise() - (dP.array() * Pm.array()).rowwise().sum().matrix()).array();
        dS *= scale;
        dqkv.middleCols(idx(h * dh), idx(dh)).noalias() += dS * K;
        dqkv.middleCols(idx(d + h * dh), idx(dh)).noalias() += dS.transpose() * Q;
      }
      G(grad, L.wqkv).noalias() += lc.a.transpose() * dqkv;
      GR(grad, L.bqkv) += dqkv.colwise().sum();
      Mat da = dqkv * P(L.wqkv).transpose();
      dx = dh_mid + layer_norm_backward(da, lc.xhat1, lc.rstd1, L.ln1_g, L.ln1_b, grad);
    }
    // embeddings
    const auto& L0 = seq.layout;
    auto gpos = G(grad, layout_.pos_emb);
    auto gtok = G(grad, layout_.tok_emb);
    Mat dvis = Mat::Zero(idx(L0.pc), idx(d));
    for (std::size_t t = 0; t < n; ++t) {
      gpos.row(idx(t)) += dx.row(idx(t));
      if (t >= L0.pc_begin() && t < L0.pc_end())
        dvis.row(idx(t - L0.pc_begin())) = dx.row(idx(t));
      else
        gtok.row(idx(seq.ids[t])) += dx.row(idx(t));
    }
    encoder_backward(c.enc, dvis, grad);
  }

  void encoder_backward(const EncoderCache& c, const Mat& dvis, std::span<T> grad) const {
    const std::size_t width = cfg_.encoder.feature_width;
    G(grad, layout_.proj_w2).noalias() += c.g.transpose() * dvis;
    GR(grad, layout_.proj_b2) += dvis.colwise().sum();
    Mat dz1 = (dvis * P(layout_.proj_w2).transpose()).array() *
              c.z1.unaryExpr([](T v) { return gelu_grad(v); }).array();
    G(grad, layout_.proj_w1).noalias() += c.pooled.transpose() * dz1;
    GR(grad, layout_.proj_b1) += dz1.colwise().sum();
    const Mat dpooled = dz1 * P(layout_.proj_w1).transpose();
    Mat dh2 = Mat::Zero(c.h2.rows(), c.h2.cols());
    for (Eigen::Index j = 0; j < dpooled.rows(); ++j)
      for (std::size_t f = 0; f < width; ++f)
        dh2(idx(c.argmax[static_cast<std::size_t>(j) * width + f]), idx(f)) += dpooled(j, idx(f));
    G(grad, layout_.enc_w2).noalias() += c.h1.transpose() * dh2;
    GR(grad, layout_.enc_b2) += dh2.colwise().sum();
    Mat dh1 = (dh2 * P(layout_.enc_w2).transpose()).array() * (c.h1.array() > T(0)).template cast<T>();
    G(grad, layout_.enc_w1).noalias() += c.feats.transpose() * dh1;
    GR(grad, layout_.enc_b1) += dh1.colwise().sum();
  }

  const ModelConfig& cfg_;
  const ParamLayout& layout_;
  std::span<const T> params_;
};

}  // namespace cgrasp
