#pragma once

// The full embedding pipeline: Siamese backbone + aggregation head for
// street/satellite images, and the scene bridge for drone groups.

#include "skylink/aggregation.hpp"
#include "skylink/backbone.hpp"
#include "skylink/bridge3d.hpp"
#include "skylink/config.hpp"
#include "skylink/image_source.hpp"

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace skylink {

struct PipelineConfig {
  BackboneConfig backbone;
  HeadKind head = HeadKind::pafa;
  int embedding_dim = 4096;
  PafaConfig pafa;
  BaselineConfig baseline;
  bool use_bridge = true;
  BridgeConfig bridge;

  // Desk-scale defaults: 56 x 56 inputs (4 x 4 grid), C = 64, D = 128.
  static PipelineConfig toy() {
    PipelineConfig c;
    c.backbone.backend = BackboneBackend::toy;
    c.backbone.input_size = 56;
    c.backbone.channels = 64;
    c.backbone.depth = 2;
    c.backbone.trainable = TrainableBlocks::all;
    c.embedding_dim = 128;
    c.pafa.out_channels = 32;
    c.pafa.out_rows = 4;
    c.pafa.embedding_dim = 128;
    c.baseline.embedding_dim = 128;
    c.baseline.netvlad_clusters = 8;
    c.baseline.conv_ap_channels = 32;
    c.bridge.views = 6;
    c.bridge.depth_resolution = 28;
    c.bridge.fusion_width = 128;
    c.bridge.view_encoder.backend = BackboneBackend::toy;
    c.bridge.view_encoder.channels = 32;
    c.bridge.view_encoder.depth = 1;
    c.bridge.view_encoder.seed = 23;
    return c;
  }
};

inline PipelineConfig pipeline_from_config(const KeyValueConfig& kv, PipelineConfig base = PipelineConfig::toy()) {
  PipelineConfig c = std::move(base);
  auto& b = c.backbone;
  const std::string backend = kv.get("backbone.backend", "");
  if (!backend.empty()) {
    const auto parsed = parse_backbone_backend(backend);
    if (parsed == BackboneBackend::foundation_large && parsed != b.backend) b = BackboneConfig::foundation_large();
    if (parsed == BackboneBackend::foundation_base && parsed != b.backend) b = BackboneConfig::foundation_base();
    b.backend = parsed;
  }
  b.weights_path = kv.get("backbone.weights_path", b.weights_path.string());
  b.input_size = static_cast<int>(kv.get_int("backbone.input_size", b.input_size));
  b.channels = static_cast<int>(kv.get_int("backbone.channels", b.channels));
  b.depth = static_cast<int>(kv.get_int("backbone.depth", b.depth));
  b.mlp_ratio = kv.get_double("backbone.mlp_ratio", b.mlp_ratio);
  b.substitute_weights = kv.get_bool("backbone.substitute_weights", b.substitute_weights);
  b.seed = static_cast<std::uint64_t>(kv.get_int("backbone.seed", static_cast<long long>(b.seed)));
  if (kv.has("backbone.trainable")) b.trainable = parse_trainable_blocks(kv.get("backbone.trainable", ""));

  if (kv.has("aggregation.head")) c.head = parse_head(kv.get("aggregation.head", ""));
  c.embedding_dim = static_cast<int>(kv.get_int("aggregation.dim", c.embedding_dim));
  c.pafa.mixer_depth = static_cast<int>(kv.get_int("aggregation.pafa.depth", c.pafa.mixer_depth));
  c.pafa.hidden_ratio = kv.get_double("aggregation.pafa.hidden_ratio", c.pafa.hidden_ratio);
  c.pafa.out_channels = static_cast<int>(kv.get_int("aggregation.pafa.out_channels", c.pafa.out_channels));
  c.pafa.out_rows = static_cast<int>(kv.get_int("aggregation.pafa.out_rows", c.pafa.out_rows));
  c.pafa.projection_bias = kv.get_bool("aggregation.pafa.bias", c.pafa.projection_bias);
  c.pafa.embedding_dim = c.embedding_dim;
  c.baseline.embedding_dim = c.embedding_dim;
  c.baseline.netvlad_clusters = static_cast<int>(kv.get_int("aggregation.netvlad.clusters", c.baseline.netvlad_clusters));
  c.baseline.gem_p = kv.get_double("aggregation.gem.p", c.baseline.gem_p);
  c.baseline.conv_ap_channels = static_cast<int>(kv.get_int("aggregation.conv_ap.channels", c.baseline.conv_ap_channels));

  c.use_bridge = kv.get_bool("bridge3d.enabled", c.use_bridge);
  c.bridge.views = static_cast<int>(kv.get_int("bridge3d.views", c.bridge.views));
  c.bridge.depth_resolution = static_cast<int>(kv.get_int("bridge3d.resolution", c.bridge.depth_resolution));
  c.bridge.fusion_width = static_cast<int>(kv.get_int("bridge3d.fusion_width", c.bridge.fusion_width));
  c.bridge.share_adapters = kv.get_bool("bridge3d.share_adapters", c.bridge.share_adapters);
  c.bridge.cache_dir = kv.get("bridge3d.cache_dir", c.bridge.cache_dir.string());
  c.bridge.view_encoder.channels = static_cast<int>(kv.get_int("bridge3d.encoder_channels", c.bridge.view_encoder.channels));
  return c;
}

class SkyLinkModel {
 public:
  SkyLinkModel(PipelineConfig config, std::shared_ptr<const ReconstructionBackend> backend = nullptr,
               std::shared_ptr<const ImageSource> images = nullptr)
      : config_(std::move(config)), backbone_(config_.backbone) {
    if (config_.head == HeadKind::pafa && config_.pafa.embedding_dim != config_.embedding_dim) {
      throw std::invalid_argument("pipeline: pafa embedding_dim disagrees with the pipeline embedding_dim");
    }
    const int grid = config_.backbone.input_size / kPatchSize;
    head_ = make_head(config_.head, config_.pafa, config_.baseline, config_.backbone.channels, grid * grid);
    params_.append(backbone_.parameters());
    params_.append(head_->parameters());
    if (config_.use_bridge) {
      if (!backend || !images) throw std::invalid_argument("pipeline: the scene bridge needs a backend and an image source");
      bridge_.emplace(config_.bridge, config_.embedding_dim, std::move(backend), std::move(images));
      params_.append(bridge_->parameters());
    }
  }

  const PipelineConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }
  const PatchTransformer& backbone() const { return backbone_; }
  const AggregationHead& head() const { return *head_; }
  const SceneBridge* bridge() const { return bridge_ ? &*bridge_ : nullptr; }
  int embedding_dim() const { return config_.embedding_dim; }

  // `prepared` is resized and normalized (see PatchTransformer::prepare).
  ad::Var embed_prepared(const Image& prepared, View view) const {
    if (view == View::drone) throw std::invalid_argument("drone imagery is embedded through the scene bridge");
    const FeatureView fv = view == View::street ? FeatureView::street : FeatureView::satellite;
    return head_->aggregate(backbone_.encode(prepared, fv));
  }

  Embedding embed(const Image& raw, View view) const {
    return to_embedding(embed_prepared(backbone_.prepare(raw), view),
                        view == View::street ? EmbeddingView::street : EmbeddingView::satellite);
  }

 private:
  PipelineConfig config_;
  PatchTransformer backbone_;
  std::unique_ptr<AggregationHead> head_;
  std::optional<SceneBridge> bridge_;
  ParameterSet params_;
};

}  // namespace skylink
