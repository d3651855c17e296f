#pragma once

// Global descriptor heads over a backbone feature map: patch-aware feature
// aggregation (PAFA) and the NetVLAD, GeM and Conv-AP baselines. Every head
// ends in an L2-normalized D-dimensional row vector.

#include "skylink/autodiff.hpp"
#include "skylink/backbone.hpp"
#include "skylink/params.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

enum class EmbeddingView { street, satellite, drone_s1, drone_s2, drone_s3 };

inline std::string to_string(EmbeddingView v) {
  switch (v) {
    case EmbeddingView::street: return "street";
    case EmbeddingView::satellite: return "satellite";
    case EmbeddingView::drone_s1: return "drone_s1";
    case EmbeddingView::drone_s2: return "drone_s2";
    case EmbeddingView::drone_s3: return "drone_s3";
  }
  return "?";
}

struct Embedding {
  Eigen::RowVectorXd vector;
  bool normalized = false;
  EmbeddingView view = EmbeddingView::street;
  bool tta = false;

  Eigen::Index dim() const { return vector.size(); }
};

inline Embedding to_embedding(const ad::Var& row, EmbeddingView view, bool tta = false) {
  if (row.rows() != 1) throw std::invalid_argument("to_embedding: expected a single row");
  Embedding e;
  e.vector = row.value().row(0);
  e.normalized = std::abs(e.vector.norm() - 1.0) <= 1e-6;
  e.view = view;
  e.tta = tta;
  return e;
}

enum class HeadKind { pafa, netvlad, gem, conv_ap };

inline HeadKind parse_head(const std::string& s) {
  if (s == "pafa") return HeadKind::pafa;
  if (s == "netvlad") return HeadKind::netvlad;
  if (s == "gem") return HeadKind::gem;
  if (s == "conv_ap") return HeadKind::conv_ap;
  throw std::invalid_argument("unknown aggregation head: " + s);
}

inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::pafa: return "pafa";
    case HeadKind::netvlad: return "netvlad";
    case HeadKind::gem: return "gem";
    case HeadKind::conv_ap: return "conv_ap";
  }
  return "?";
}

class AggregationHead {
 public:
  virtual ~AggregationHead() = default;
  // (1 x D) unit-norm descriptor; differentiable w.r.t. the map and the head.
  virtual ad::Var aggregate(const FeatureMap& fmap) const = 0;
  virtual HeadKind kind() const = 0;
  virtual int dim() const = 0;
  const ParameterSet& parameters() const { return params_; }

 protected:
  ParameterSet params_;
};

// One residual mixer step on a single flattened patch:
// out = W2 * relu(W1 * patch) + patch, with W1 (hidden x n), W2 (n x hidden).
inline Eigen::VectorXd pafa_mix(const Eigen::VectorXd& patch, const Matrix& w1, const Matrix& w2) {
  if (w1.cols() != patch.size() || w2.rows() != patch.size() || w2.cols() != w1.rows()) {
    throw std::invalid_argument("pafa_mix: weight shapes do not match the patch length");
  }
  Eigen::VectorXd hidden = (w1 * patch).cwiseMax(0.0);
  return w2 * hidden + patch;
}

struct PafaConfig {
  int mixer_depth = 4;
  double hidden_ratio = 1.0;
  int out_channels = 1024;  // d
  int out_rows = 4;         // r
  int embedding_dim = 4096; // D = d * r
  bool projection_bias = true;
  std::uint64_t seed = 11;
};

inline void validate(const PafaConfig& c) {
  if (c.mixer_depth < 1 || c.hidden_ratio <= 0 || c.out_channels < 1 || c.out_rows < 1) {
    throw std::invalid_argument("pafa: depth, hidden_ratio, out_channels and out_rows must be positive");
  }
  if (c.out_channels * c.out_rows != c.embedding_dim) {
    throw std::invalid_argument("pafa: out_channels * out_rows (" + std::to_string(c.out_channels * c.out_rows) +
                                ") must equal embedding_dim (" + std::to_string(c.embedding_dim) + ")");
  }
}

// Channels are the patches: a map with C channels over an Hp x Wp grid gives
// s = C patches of length n = Hp * Wp. The mixer stack is shared by all
// patches; the projections run over channels (s -> d) and then rows (n -> r).
class PafaHead final : public AggregationHead {
 public:
  PafaHead(PafaConfig config, int channels, int grid_tokens)
      : config_(config), channels_(channels), tokens_(grid_tokens) {
    validate(config_);
    if (channels < 1 || grid_tokens < 1) throw std::invalid_argument("pafa: empty feature map geometry");
    std::mt19937_64 rng(config_.seed);
    const int hidden = std::max(1, static_cast<int>(std::lround(grid_tokens * config_.hidden_ratio)));
    for (int l = 0; l < config_.mixer_depth; ++l) {
      ad::Var w1(random_normal(hidden, tokens_, std::sqrt(2.0 / tokens_), rng));
      ad::Var w2(random_normal(tokens_, hidden, 0.1 / std::sqrt(static_cast<double>(hidden)), rng));
      mixers_.push_back({w1, w2});
      params_.add("pafa.mix" + std::to_string(l) + ".w1", w1, true);
      params_.add("pafa.mix" + std::to_string(l) + ".w2", w2, true);
    }
    channel_proj_ = ad::Var(random_normal(config_.out_channels, channels_, 1.0 / std::sqrt(channels_), rng));
    channel_bias_ = ad::Var(Matrix::Zero(config_.out_channels, 1));
    row_proj_ = ad::Var(random_normal(config_.out_rows, tokens_, 1.0 / std::sqrt(tokens_), rng));
    row_bias_ = ad::Var(Matrix::Zero(1, config_.out_rows));
    params_.add("pafa.channel_proj", channel_proj_, true);
    params_.add("pafa.row_proj", row_proj_, true);
    if (config_.projection_bias) {
      params_.add("pafa.channel_bias", channel_bias_, true);
      params_.add("pafa.row_bias", row_bias_, true);
    }
  }

  HeadKind kind() const override { return HeadKind::pafa; }
  int dim() const override { return config_.embedding_dim; }
  const PafaConfig& config() const { return config_; }

  // Z (s x n) after the mixer stack, before projection.
  ad::Var mixed_patches(const FeatureMap& fmap) const {
    check(fmap);
    ad::Var z = ad::transpose(fmap.grid);
    for (const auto& m : mixers_) {
      ad::Var hidden = ad::relu(ad::matmul(z, ad::transpose(m.w1)));
      z = ad::add(z, ad::matmul(hidden, ad::transpose(m.w2)));
    }
    return z;
  }

  // Z' (d x r) before flattening.
  ad::Var projected(const FeatureMap& fmap) const {
    ad::Var z = mixed_patches(fmap);
    ad::Var zc = ad::matmul(channel_proj_, z);
    if (config_.projection_bias) zc = ad::add_col(zc, channel_bias_);
    ad::Var zr = ad::matmul(zc, ad::transpose(row_proj_));
    if (config_.projection_bias) zr = ad::add_row(zr, row_bias_);
    return zr;
  }

  ad::Var aggregate(const FeatureMap& fmap) const override {
    ad::Var zr = projected(fmap);
    return ad::l2_normalize_rows(ad::reshape(zr, 1, zr.rows() * zr.cols()));
  }

  ad::Var mixer_w1(int layer) const { return mixers_.at(static_cast<std::size_t>(layer)).w1; }
  ad::Var mixer_w2(int layer) const { return mixers_.at(static_cast<std::size_t>(layer)).w2; }
  ad::Var channel_proj() const { return channel_proj_; }
  ad::Var channel_bias() const { return channel_bias_; }
  ad::Var row_proj() const { return row_proj_; }
  ad::Var row_bias() const { return row_bias_; }

 private:
  struct Mixer {
    ad::Var w1, w2;
  };

  void check(const FeatureMap& fmap) const {
    if (fmap.channels() != channels_ || fmap.hp * fmap.wp != tokens_) {
      throw ShapeError("pafa: head built for " + std::to_string(channels_) + " channels over " +
                       std::to_string(tokens_) + " tokens, got " + std::to_string(fmap.channels()) + " over " +
                       std::to_string(fmap.hp * fmap.wp));
    }
  }

  PafaConfig config_;
  int channels_;
  int tokens_;
  std::vector<Mixer> mixers_;
  ad::Var channel_proj_, channel_bias_, row_proj_, row_bias_;
};

struct BaselineConfig {
  int embedding_dim = 4096;
  int netvlad_clusters = 64;
  double gem_p = 3.0;
  int conv_ap_channels = 512;
  int conv_ap_bins = 2;  // pooled to bins x bins
  std::uint64_t seed = 13;
};

namespace detail {

class ProjectedHead : public AggregationHead {
 protected:
  void init_projection(int in_dim, int out_dim, std::mt19937_64& rng, const std::string& prefix) {
    proj_w_ = ad::Var(init_weight(in_dim, out_dim, rng));
    proj_b_ = ad::Var(Matrix::Zero(1, out_dim));
    params_.add(prefix + ".proj.w", proj_w_, true);
    params_.add(prefix + ".proj.b", proj_b_, true);
    dim_ = out_dim;
  }

  ad::Var project(const ad::Var& pooled) const {
    return ad::l2_normalize_rows(ad::add_row(ad::matmul(pooled, proj_w_), proj_b_));
  }

  ad::Var proj_w_, proj_b_;
  int dim_ = 0;

 public:
  int dim() const override { return dim_; }
  ad::Var projection_weight() const { return proj_w_; }
  ad::Var projection_bias() const { return proj_b_; }
};

}  // namespace detail

class GemHead final : public detail::ProjectedHead {
 public:
  GemHead(const BaselineConfig& config, int channels) {
    std::mt19937_64 rng(config.seed);
    Matrix p(1, 1);
    p(0, 0) = config.gem_p;
    p_ = ad::Var(p);
    params_.add("gem.p", p_, true);
    init_projection(channels, config.embedding_dim, rng, "gem");
  }

  HeadKind kind() const override { return HeadKind::gem; }

  // (1 x C) generalized mean before projection.
  ad::Var pool(const FeatureMap& fmap) const { return ad::gem_pool(fmap.grid, p_); }
  ad::Var aggregate(const FeatureMap& fmap) const override { return project(pool(fmap)); }
  ad::Var exponent() const { return p_; }

 private:
  ad::Var p_;
};

class NetVladHead final : public detail::ProjectedHead {
 public:
  NetVladHead(const BaselineConfig& config, int channels) : clusters_(config.netvlad_clusters), channels_(channels) {
    if (clusters_ < 1) throw std::invalid_argument("netvlad: cluster count must be positive");
    std::mt19937_64 rng(config.seed);
    assign_w_ = ad::Var(init_weight(channels, clusters_, rng));
    assign_b_ = ad::Var(Matrix::Zero(1, clusters_));
    centroids_ = ad::Var(random_normal(clusters_, channels, 1.0, rng));
    params_.add("netvlad.assign.w", assign_w_, true);
    params_.add("netvlad.assign.b", assign_b_, true);
    params_.add("netvlad.centroids", centroids_, true);
    init_projection(clusters_ * channels, config.embedding_dim, rng, "netvlad");
  }

  HeadKind kind() const override { return HeadKind::netvlad; }

  // (K x C) soft-assigned residual sums, V_k = sum_i a_ik (x_i - c_k).
  ad::Var residuals(const FeatureMap& fmap) const {
    const ad::Var& x = fmap.grid;
    ad::Var assign = ad::softmax_rows(ad::add_row(ad::matmul(x, assign_w_), assign_b_));
    ad::Var assign_t = ad::transpose(assign);
    ad::Var weighted = ad::matmul(assign_t, x);
    ad::Var mass = ad::matmul(assign_t, ad::constant(Matrix::Ones(x.rows(), channels_)));
    return ad::sub(weighted, ad::mul(mass, centroids_));
  }

  ad::Var aggregate(const FeatureMap& fmap) const override {
    ad::Var v = ad::l2_normalize_rows(residuals(fmap));
    ad::Var flat = ad::l2_normalize_rows(ad::reshape(v, 1, v.rows() * v.cols()));
    return project(flat);
  }

  ad::Var assignment_weight() const { return assign_w_; }
  ad::Var assignment_bias() const { return assign_b_; }
  ad::Var centroids() const { return centroids_; }

 private:
  int clusters_;
  int channels_;
  ad::Var assign_w_, assign_b_, centroids_;
};

// Adaptive average pooling as a (bins^2 x hp*wp) averaging matrix.
inline Matrix adaptive_pool_matrix(int hp, int wp, int bins) {
  Matrix pool = Matrix::Zero(bins * bins, hp * wp);
  for (int by = 0; by < bins; ++by) {
    const int y0 = (by * hp) / bins;
    const int y1 = ((by + 1) * hp + bins - 1) / bins;
    for (int bx = 0; bx < bins; ++bx) {
      const int x0 = (bx * wp) / bins;
      const int x1 = ((bx + 1) * wp + bins - 1) / bins;
      const double w = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) pool(by * bins + bx, y * wp + x) = w;
    }
  }
  return pool;
}

class ConvApHead final : public detail::ProjectedHead {
 public:
  ConvApHead(const BaselineConfig& config, int channels) : bins_(config.conv_ap_bins) {
    if (bins_ < 1 || config.conv_ap_channels < 1) throw std::invalid_argument("conv_ap: invalid geometry");
    std::mt19937_64 rng(config.seed);
    conv_w_ = ad::Var(init_weight(channels, config.conv_ap_channels, rng));
    conv_b_ = ad::Var(Matrix::Zero(1, config.conv_ap_channels));
    params_.add("conv_ap.conv.w", conv_w_, true);
    params_.add("conv_ap.conv.b", conv_b_, true);
    init_projection(bins_ * bins_ * config.conv_ap_channels, config.embedding_dim, rng, "conv_ap");
  }

  HeadKind kind() const override { return HeadKind::conv_ap; }

  // 1x1 convolution then adaptive average pooling, flattened bin-major.
  ad::Var pool(const FeatureMap& fmap) const {
    if (fmap.hp < bins_ || fmap.wp < bins_) throw ShapeError("conv_ap: feature map smaller than the pooling grid");
    ad::Var reduced = ad::add_row(ad::matmul(fmap.grid, conv_w_), conv_b_);
    ad::Var pooled = ad::matmul(ad::constant(adaptive_pool_matrix(fmap.hp, fmap.wp, bins_)), reduced);
    return ad::l2_normalize_rows(ad::reshape(pooled, 1, pooled.rows() * pooled.cols()));
  }

  ad::Var aggregate(const FeatureMap& fmap) const override { return project(pool(fmap)); }

 private:
  int bins_;
  ad::Var conv_w_, conv_b_;
};

inline std::unique_ptr<AggregationHead> make_head(HeadKind kind, const PafaConfig& pafa, const BaselineConfig& baseline,
                                                  int channels, int grid_tokens) {
  switch (kind) {
    case HeadKind::pafa: return std::make_unique<PafaHead>(pafa, channels, grid_tokens);
    case HeadKind::gem: return std::make_unique<GemHead>(baseline, channels);
    case HeadKind::netvlad: return std::make_unique<NetVladHead>(baseline, channels);
    case HeadKind::conv_ap: return std::make_unique<ConvApHead>(baseline, channels);
  }
  throw std::invalid_argument("unknown aggregation head");
}

}  // namespace skylink
