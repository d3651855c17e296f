#pragma once

// Weight-sharing patch-transformer feature extractor. One instance serves
// both street and satellite inputs; each call emits an (H/14 x W/14 x C)
// feature map stored token-major as an (Hp*Wp x C) matrix.

#include "skylink/autodiff.hpp"
#include "skylink/image.hpp"
#include "skylink/params.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

inline constexpr int kPatchSize = 14;

enum class BackboneBackend { foundation_base, foundation_large, toy };
enum class TrainableBlocks { frozen, last_block, all };
enum class FeatureView { street, satellite, depth };

inline BackboneBackend parse_backbone_backend(const std::string& s) {
  if (s == "foundation_base") return BackboneBackend::foundation_base;
  if (s == "foundation_large") return BackboneBackend::foundation_large;
  if (s == "toy") return BackboneBackend::toy;
  throw std::invalid_argument("unknown backbone backend: " + s);
}

inline TrainableBlocks parse_trainable_blocks(const std::string& s) {
  if (s == "frozen") return TrainableBlocks::frozen;
  if (s == "last_block") return TrainableBlocks::last_block;
  if (s == "all") return TrainableBlocks::all;
  throw std::invalid_argument("unknown backbone.trainable value: " + s);
}

struct BackboneConfig {
  BackboneBackend backend = BackboneBackend::toy;
  int input_size = 448;
  int channels = 64;
  int depth = 2;
  double mlp_ratio = 2.0;
  bool shared_weights = true;
  TrainableBlocks trainable = TrainableBlocks::last_block;
  std::filesystem::path weights_path;
  // Foundation backends without weights_path fall back to randomly initialized
  // weights of the same shape; only meaningful for structural checks.
  bool substitute_weights = false;
  double norm_mean = 0.5;
  double norm_std = 0.5;
  std::uint64_t seed = 7;

  static BackboneConfig foundation_large() {
    BackboneConfig c;
    c.backend = BackboneBackend::foundation_large;
    c.channels = 1024;
    c.depth = 24;
    c.mlp_ratio = 4.0;
    c.trainable = TrainableBlocks::frozen;
    c.norm_mean = 0.45;
    c.norm_std = 0.225;
    return c;
  }

  static BackboneConfig foundation_base() {
    BackboneConfig c = foundation_large();
    c.backend = BackboneBackend::foundation_base;
    c.channels = 768;
    c.depth = 12;
    return c;
  }
};

inline void validate(const BackboneConfig& c) {
  if (!c.shared_weights) throw std::invalid_argument("backbone: street and satellite must share weights");
  if (c.channels <= 0 || c.depth < 1) throw std::invalid_argument("backbone: channels and depth must be positive");
  if (c.input_size <= 0 || c.input_size % kPatchSize != 0) {
    throw std::invalid_argument("backbone: input_size must be a positive multiple of 14");
  }
  if (c.norm_std <= 0) throw std::invalid_argument("backbone: norm_std must be positive");
}

struct FeatureMap {
  ad::Var grid;  // (hp * wp) x channels, row index = y * wp + x
  int hp = 0;
  int wp = 0;
  FeatureView source_view = FeatureView::street;
  int patch_size = kPatchSize;

  int channels() const { return static_cast<int>(grid.cols()); }
  double at(int y, int x, int c) const { return grid.value()(y * wp + x, c); }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-overlapping 14x14 patches flattened in (dy, dx, channel) order.
inline Matrix extract_patches(const Image& img) {
  if (img.height % kPatchSize != 0 || img.width % kPatchSize != 0) {
    throw ShapeError("image size " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible by the patch size 14");
  }
  const int hp = img.height / kPatchSize;
  const int wp = img.width / kPatchSize;
  Matrix patches(hp * wp, kPatchSize * kPatchSize * 3);
  for (int py = 0; py < hp; ++py) {
    for (int px = 0; px < wp; ++px) {
      auto row = patches.row(py * wp + px);
      int k = 0;
      for (int dy = 0; dy < kPatchSize; ++dy)
        for (int dx = 0; dx < kPatchSize; ++dx)
          for (int c = 0; c < 3; ++c) row(k++) = img.at(py * kPatchSize + dy, px * kPatchSize + dx, c);
    }
  }
  return patches;
}

// Fixed 2D sine-cosine position code; half the channels encode y, half x.
inline Matrix position_code(int hp, int wp, int channels) {
  Matrix code = Matrix::Zero(hp * wp, channels);
  const int quarter = channels / 4;
  for (int y = 0; y < hp; ++y) {
    for (int x = 0; x < wp; ++x) {
      for (int i = 0; i < quarter; ++i) {
        const double freq = 1.0 / std::pow(100.0, static_cast<double>(i) / std::max(1, quarter));
        code(y * wp + x, 4 * i + 0) = std::sin(y * freq);
        code(y * wp + x, 4 * i + 1) = std::cos(y * freq);
        code(y * wp + x, 4 * i + 2) = std::sin(x * freq);
        code(y * wp + x, 4 * i + 3) = std::cos(x * freq);
      }
    }
  }
  return code * 0.1;
}

class PatchTransformer {
 public:
  explicit PatchTransformer(BackboneConfig config) : config_(std::move(config)) {
    validate(config_);
    const bool foundation = config_.backend != BackboneBackend::toy;
    if (foundation && config_.weights_path.empty() && !config_.substitute_weights) {
      throw std::invalid_argument("backbone: foundation backend requires backbone.weights_path");
    }
    std::mt19937_64 rng(config_.seed);
    const int c = config_.channels;
    const int hidden = std::max(1, static_cast<int>(std::lround(c * config_.mlp_ratio)));
    patch_w_ = ad::Var(init_weight(kPatchSize * kPatchSize * 3, c, rng));
    patch_b_ = ad::Var(Matrix::Zero(1, c));
    for (int b = 0; b < config_.depth; ++b) {
      Block blk;
      blk.ln1_g = ad::Var(Matrix::Ones(1, c));
      blk.ln1_b = ad::Var(Matrix::Zero(1, c));
      blk.wq = ad::Var(init_weight(c, c, rng));
      blk.wk = ad::Var(init_weight(c, c, rng));
      blk.wv = ad::Var(init_weight(c, c, rng));
      blk.wo = ad::Var(init_weight(c, c, rng, 0.5));
      blk.ln2_g = ad::Var(Matrix::Ones(1, c));
      blk.ln2_b = ad::Var(Matrix::Zero(1, c));
      blk.w1 = ad::Var(init_weight(c, hidden, rng, std::sqrt(2.0)));
      blk.b1 = ad::Var(Matrix::Zero(1, hidden));
      blk.w2 = ad::Var(init_weight(hidden, c, rng, 0.5));
      blk.b2 = ad::Var(Matrix::Zero(1, c));
      blocks_.push_back(blk);
    }
    out_g_ = ad::Var(Matrix::Ones(1, c));
    out_b_ = ad::Var(Matrix::Zero(1, c));
    register_parameters();
    if (foundation && !config_.weights_path.empty()) {
      std::ifstream in(config_.weights_path, std::ios::binary);
      if (!in) throw std::runtime_error("backbone: cannot open weights " + config_.weights_path.string());
      load_parameters(in, params_);
    }
  }

  const BackboneConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }

  // Resize to the configured input size and apply the backend's normalization.
  Image prepare(const Image& raw) const {
    return normalize(resize(raw, config_.input_size, config_.input_size), config_.norm_mean, config_.norm_std);
  }

  FeatureMap encode(const Image& image, FeatureView view) const {
    if (image.height != image.width) throw ShapeError("backbone: non-square input");
    ad::Var patches = ad::constant(extract_patches(image));
    const int hp = image.height / kPatchSize;
    const int wp = image.width / kPatchSize;
    ad::Var x = ad::add_row(ad::matmul(patches, patch_w_), patch_b_);
    x = ad::add(x, ad::constant(position_code(hp, wp, config_.channels)));
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(config_.channels));
    for (const Block& blk : blocks_) {
      ad::Var h = ad::layer_norm_rows(x, blk.ln1_g, blk.ln1_b);
      ad::Var q = ad::matmul(h, blk.wq);
      ad::Var k = ad::matmul(h, blk.wk);
      ad::Var v = ad::matmul(h, blk.wv);
      ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), attn_scale));
      x = ad::add(x, ad::matmul(ad::matmul(attn, v), blk.wo));
      h = ad::layer_norm_rows(x, blk.ln2_g, blk.ln2_b);
      h = ad::relu(ad::add_row(ad::matmul(h, blk.w1), blk.b1));
      x = ad::add(x, ad::add_row(ad::matmul(h, blk.w2), blk.b2));
    }
    x = ad::layer_norm_rows(x, out_g_, out_b_);
    return FeatureMap{x, hp, wp, view, kPatchSize};
  }

 private:
  struct Block {
    ad::Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void register_parameters() {
    const auto mode = config_.trainable;
    const bool all = mode == TrainableBlocks::all;
    params_.add("backbone.patch.w", patch_w_, all);
    params_.add("backbone.patch.b", patch_b_, all);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const bool on = all || (mode == TrainableBlocks::last_block && b + 1 == blocks_.size());
      const std::string p = "backbone.block" + std::to_string(b) + ".";
      const Block& blk = blocks_[b];
      params_.add(p + "ln1.g", blk.ln1_g, on);
      params_.add(p + "ln1.b", blk.ln1_b, on);
      params_.add(p + "attn.q", blk.wq, on);
      params_.add(p + "attn.k", blk.wk, on);
      params_.add(p + "attn.v", blk.wv, on);
      params_.add(p + "attn.o", blk.wo, on);
      params_.add(p + "ln2.g", blk.ln2_g, on);
      params_.add(p + "ln2.b", blk.ln2_b, on);
      params_.add(p + "mlp.w1", blk.w1, on);
      params_.add(p + "mlp.b1", blk.b1, on);
      params_.add(p + "mlp.w2", blk.w2, on);
      params_.add(p + "mlp.b2", blk.b2, on);
    }
    const bool tail = mode != TrainableBlocks::frozen;
    params_.add("backbone.norm.g", out_g_, tail);
    params_.add("backbone.norm.b", out_b_, tail);
  }

  BackboneConfig config_;
  ad::Var patch_w_, patch_b_;
  std::vector<Block> blocks_;
  ad::Var out_g_, out_b_;
  ParameterSet params_;
};

}  // namespace skylink
