#pragma once

// Multi-scale drone scene bridge: scene reconstruction behind a backend
// interface, orthographic multi-view depth projection, a frozen per-view
// encoder and the residual linear adapter that produces the per-scale
// drone descriptor.

#include "skylink/aggregation.hpp"
#include "skylink/autodiff.hpp"
#include "skylink/backbone.hpp"
#include "skylink/data_model.hpp"
#include "skylink/image.hpp"
#include "skylink/image_source.hpp"
#include "skylink/params.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

struct PointCloud {
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> points;
  std::optional<Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> colors;
  Scale scale = Scale::s1;
  std::string location_id;

  Eigen::Index size() const { return points.rows(); }
};

using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline void validate(const PointCloud& cloud) {
  if (cloud.points.rows() < 1) throw std::invalid_argument("PointCloud: at least one point required");
  if (!cloud.points.allFinite()) throw std::invalid_argument("PointCloud: non-finite coordinate");
  if (cloud.colors && cloud.colors->rows() != cloud.points.rows()) {
    throw std::invalid_argument("PointCloud: colors and points differ in length");
  }
}

class ReconstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ReconstructionBackend {
 public:
  virtual ~ReconstructionBackend() = default;
  virtual PointCloud reconstruct(const SceneGroup& scene, std::span<const Image> images) const = 0;
  // Part of every cache key; bump when the backend output changes.
  virtual std::string version() const = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double unit_from_bits(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

}  // namespace detail

// Deterministic stand-in for a feed-forward reconstruction network.
//
// Canonical shape: `points_per_scene` points on a unit Fibonacci sphere,
// point k at height z_k = 1 - 2(k + 0.5)/N and azimuth k * golden_angle.
// Every non-blank frame i adds a radial ripple
//   r_k += a_i * sin(f_i * azimuth_k + phi_i) * cos(g_i * z_k)
// with (a_i, f_i, g_i, phi_i) derived from splitmix64(content_hash(frame_i) ^ seed):
// a in [0.05, 0.15), f in {1..4}, g in {1..3}, phi in [0, 2 pi).
// Blank frames (constant pixels) contribute nothing, so a scene of blank frames
// yields exactly the canonical sphere. Colors are the per-frame mean color of
// frame (k mod 18).
class StubReconstructionBackend final : public ReconstructionBackend {
 public:
  explicit StubReconstructionBackend(std::uint64_t seed = 0, int points_per_scene = 256)
      : seed_(seed), points_(points_per_scene) {
    if (points_per_scene < 1) throw std::invalid_argument("stub reconstruction: need at least one point");
  }

  std::string version() const override { return "stub-v1-seed" + std::to_string(seed_) + "-n" + std::to_string(points_); }

  struct Ripple {
    double amplitude = 0.0;
    int azimuth_freq = 1;
    int height_freq = 1;
    double phase = 0.0;
  };

  Ripple ripple_for(const Image& frame) const {
    if (is_blank(frame)) return {};
    std::uint64_t s = detail::splitmix64(content_hash(frame) ^ seed_);
    Ripple r;
    r.amplitude = 0.05 + 0.1 * detail::unit_from_bits(s);
    s = detail::splitmix64(s);
    r.azimuth_freq = 1 + static_cast<int>(s % 4);
    s = detail::splitmix64(s);
    r.height_freq = 1 + static_cast<int>(s % 3);
    s = detail::splitmix64(s);
    r.phase = 2.0 * std::acos(-1.0) * detail::unit_from_bits(s);
    return r;
  }

  static PointMatrix canonical_sphere(int n) {
    PointMatrix pts(n, 3);
    const double golden = std::acos(-1.0) * (3.0 - std::sqrt(5.0));
    for (int k = 0; k < n; ++k) {
      const double z = 1.0 - 2.0 * (k + 0.5) / n;
      const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double az = k * golden;
      pts(k, 0) = rho * std::cos(az);
      pts(k, 1) = rho * std::sin(az);
      pts(k, 2) = z;
    }
    return pts;
  }

  PointCloud reconstruct(const SceneGroup& scene, std::span<const Image> images) const override {
    if (images.size() != static_cast<std::size_t>(kSceneSize)) {
      throw ReconstructionError("stub reconstruction expects 18 frames, got " + std::to_string(images.size()));
    }
    std::vector<Ripple> ripples;
    std::vector<Eigen::Vector3d> mean_colors;
    for (const Image& frame : images) {
      ripples.push_back(ripple_for(frame));
      Eigen::Vector3d c = Eigen::Vector3d::Zero();
      for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x)
          for (int ch = 0; ch < 3; ++ch) c(ch) += frame.at(y, x, ch);
      mean_colors.push_back((c / (static_cast<double>(frame.height) * frame.width)).cwiseMax(0.0).cwiseMin(1.0));
    }
    PointCloud cloud;
    cloud.scale = scene.scale;
    cloud.location_id = scene.location_id;
    cloud.points = canonical_sphere(points_);
    PointMatrix colors(points_, 3);
    const double golden = std::acos(-1.0) * (3.0 - std::sqrt(5.0));
    for (int k = 0; k < points_; ++k) {
      const double z = cloud.points(k, 2);
      const double az = k * golden;
      double radius = 1.0;
      for (const Ripple& r : ripples) {
        radius += r.amplitude * std::sin(r.azimuth_freq * az + r.phase) * std::cos(r.height_freq * z);
      }
      cloud.points.row(k) *= radius;
      colors.row(k) = mean_colors[static_cast<std::size_t>(k % kSceneSize)].transpose();
    }
    cloud.colors = std::move(colors);
    validate(cloud);
    return cloud;
  }

 private:
  std::uint64_t seed_;
  int points_;
};

struct DepthViewSet {
  std::vector<Matrix> views;                  // each resolution x resolution, 0 = background
  std::vector<Eigen::Vector3d> camera_dirs;   // unit, pointing from the origin to the camera
};

// Camera layout for M views around the vertical (z) axis:
// M = 1 top; M = 2..4 a horizontal ring of M; M = 5 ring of 4 + top;
// M >= 6 ring of M - 2 + top + bottom. The ring starts at +x.
inline std::vector<Eigen::Vector3d> camera_directions(int m) {
  if (m < 1) throw std::invalid_argument("project_depth: need at least one view");
  int ring = m;
  bool top = false;
  bool bottom = false;
  if (m == 1) {
    ring = 0;
    top = true;
  } else if (m == 5) {
    ring = 4;
    top = true;
  } else if (m >= 6) {
    ring = m - 2;
    top = bottom = true;
  }
  auto snap = [](double v) {
    if (std::abs(v) < 1e-12) return 0.0;
    if (std::abs(v - 1.0) < 1e-12) return 1.0;
    if (std::abs(v + 1.0) < 1e-12) return -1.0;
    return v;
  };
  std::vector<Eigen::Vector3d> dirs;
  for (int j = 0; j < ring; ++j) {
    const double phi = 2.0 * std::acos(-1.0) * j / ring;
    dirs.emplace_back(snap(std::cos(phi)), snap(std::sin(phi)), 0.0);
  }
  if (top) dirs.emplace_back(0.0, 0.0, 1.0);
  if (bottom) dirs.emplace_back(0.0, 0.0, -1.0);
  return dirs;
}

// Image-plane basis (right, up) for a camera looking back along -dir.
inline std::pair<Eigen::Vector3d, Eigen::Vector3d> view_basis(const Eigen::Vector3d& dir) {
  if (dir.z() > 0.5) return {Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0, 1, 0)};
  if (dir.z() < -0.5) return {Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0, -1, 0)};
  return {Eigen::Vector3d(-dir.y(), dir.x(), 0.0), Eigen::Vector3d(0, 0, 1)};
}

// Translates and uniformly scales the cloud so its bounding box is centered on
// the origin and its longest side has length 1.
inline PointMatrix normalize_to_unit_cube(const PointMatrix& pts) {
  const Eigen::RowVector3d lo = pts.colwise().minCoeff();
  const Eigen::RowVector3d hi = pts.colwise().maxCoeff();
  const Eigen::RowVector3d center = (lo + hi) / 2.0;
  const double extent = (hi - lo).maxCoeff();
  PointMatrix out = pts.rowwise() - center;
  if (extent > 0) out /= extent;
  return out;
}

// Half-width of the orthographic window: the circumradius of the unit cube,
// so every normalized point lands inside every view.
inline constexpr double kViewHalfWidth = 0.8660254037844386;

// Pixel (row, col) for a normalized point in the given view.
inline std::pair<int, int> project_pixel(const Eigen::Vector3d& p, const Eigen::Vector3d& dir, int resolution) {
  const auto [right, up] = view_basis(dir);
  const double u = p.dot(right) / (2.0 * kViewHalfWidth) + 0.5;
  const double v = 0.5 - p.dot(up) / (2.0 * kViewHalfWidth);
  const int col = std::clamp(static_cast<int>(std::floor(u * resolution)), 0, resolution - 1);
  const int row = std::clamp(static_cast<int>(std::floor(v * resolution)), 0, resolution - 1);
  return {row, col};
}

// Orthographic z-buffered depth maps. Depth is 1 - <p, dir>, always in
// (0, 2) for normalized points; the smallest depth wins, and on equal depth
// the lowest point index is kept.
inline DepthViewSet project_depth(const PointCloud& cloud, int m, int resolution) {
  validate(cloud);
  if (resolution < 1) throw std::invalid_argument("project_depth: resolution must be positive");
  DepthViewSet set;
  set.camera_dirs = camera_directions(m);
  const PointMatrix pts = normalize_to_unit_cube(cloud.points);
  for (const auto& dir : set.camera_dirs) {
    Matrix depth = Matrix::Zero(resolution, resolution);
    for (Eigen::Index k = 0; k < pts.rows(); ++k) {
      const Eigen::Vector3d p = pts.row(k).transpose();
      const auto [row, col] = project_pixel(p, dir, resolution);
      const double d = 1.0 - p.dot(dir);
      double& cell = depth(row, col);
      if (cell == 0.0 || d < cell) cell = d;
    }
    set.views.push_back(std::move(depth));
  }
  return set;
}

// Frozen per-view encoder: each depth map is replicated to three channels,
// run through a patch transformer and mean-pooled to a width-Ce vector.
class DepthViewEncoder {
 public:
  explicit DepthViewEncoder(BackboneConfig config) : net_([&] {
    config.trainable = TrainableBlocks::frozen;
    return config;
  }()) {}

  int width() const { return net_.config().channels; }
  const PatchTransformer& network() const { return net_; }

  Eigen::RowVectorXd encode(const Matrix& depth) const {
    Image img(static_cast<int>(depth.rows()), static_cast<int>(depth.cols()));
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = depth(y, x);
    const Image prepared = net_.prepare(img);
    FeatureMap fmap = net_.encode(prepared, FeatureView::depth);
    return fmap.grid.value().colwise().mean();
  }

  // (M x Ce) features, one row per view.
  Matrix encode(const DepthViewSet& set) const {
    Matrix out(static_cast<Eigen::Index>(set.views.size()), width());
    for (std::size_t i = 0; i < set.views.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = encode(set.views[i]);
    return out;
  }

 private:
  PatchTransformer net_;
};

struct AdapterShape {
  int views = 6;           // M
  int view_width = 64;     // Ce
  int fusion_width = 128;  // Ca
  int embedding_dim = 128; // D
};

// W3 (M*Ce x Ca), W4 (Ca x D), W5 (D x D).
class AdapterWeights {
 public:
  AdapterWeights(const AdapterShape& shape, std::uint64_t seed, const std::string& prefix = "adapter")
      : shape_(shape) {
    if (shape.views < 1 || shape.view_width < 1 || shape.fusion_width < 1 || shape.embedding_dim < 1) {
      throw std::invalid_argument("adapter: all dimensions must be positive");
    }
    std::mt19937_64 rng(seed);
    w3_ = ad::Var(init_weight(shape.views * shape.view_width, shape.fusion_width, rng, std::sqrt(2.0)));
    w4_ = ad::Var(init_weight(shape.fusion_width, shape.embedding_dim, rng));
    w5_ = ad::Var(init_weight(shape.embedding_dim, shape.embedding_dim, rng, 0.5));
    params_.add(prefix + ".w3", w3_, true);
    params_.add(prefix + ".w4", w4_, true);
    params_.add(prefix + ".w5", w5_, true);
  }

  AdapterWeights(const AdapterShape& shape, Matrix w3, Matrix w4, Matrix w5, const std::string& prefix = "adapter")
      : shape_(shape), w3_(std::move(w3)), w4_(std::move(w4)), w5_(std::move(w5)) {
    if (w3_.rows() != shape.views * shape.view_width || w3_.cols() != shape.fusion_width ||
        w4_.rows() != shape.fusion_width || w4_.cols() != shape.embedding_dim ||
        w5_.rows() != shape.embedding_dim || w5_.cols() != shape.embedding_dim) {
      throw std::invalid_argument("adapter: weight shapes inconsistent with M, Ce, Ca, D");
    }
    params_.add(prefix + ".w3", w3_, true);
    params_.add(prefix + ".w4", w4_, true);
    params_.add(prefix + ".w5", w5_, true);
  }

  const AdapterShape& shape() const { return shape_; }
  const ParameterSet& parameters() const { return params_; }
  ad::Var w3() const { return w3_; }
  ad::Var w4() const { return w4_; }
  ad::Var w5() const { return w5_; }

 private:
  AdapterShape shape_;
  ad::Var w3_, w4_, w5_;
  ParameterSet params_;
};

struct AdapterTrace {
  ad::Var global;    // relu(concat W3) W4
  ad::Var residual;  // relu(global W5)
  ad::Var fused;     // global + residual, before normalization
  ad::Var output;    // normalized
};

// Throws ad::DegenerateEmbedding when the fused vector is zero.
inline AdapterTrace adapter_fuse_trace(const ad::Var& view_features, const AdapterWeights& weights) {
  const auto& s = weights.shape();
  if (view_features.rows() != s.views || view_features.cols() != s.view_width) {
    throw std::invalid_argument("adapter_fuse: expected " + std::to_string(s.views) + " views of width " +
                                std::to_string(s.view_width) + ", got " + std::to_string(view_features.rows()) +
                                " x " + std::to_string(view_features.cols()));
  }
  AdapterTrace t;
  ad::Var concat = ad::reshape(view_features, 1, s.views * s.view_width);
  t.global = ad::matmul(ad::relu(ad::matmul(concat, weights.w3())), weights.w4());
  t.residual = ad::relu(ad::matmul(t.global, weights.w5()));
  t.fused = ad::add(t.global, t.residual);
  if (!(t.fused.value().norm() > 0.0)) {
    throw ad::DegenerateEmbedding("adapter_fuse: fused drone descriptor is the zero vector");
  }
  t.output = ad::l2_normalize_rows(t.fused);
  return t;
}

inline ad::Var adapter_fuse(const ad::Var& view_features, const AdapterWeights& weights) {
  return adapter_fuse_trace(view_features, weights).output;
}

inline Embedding adapter_fuse(const Matrix& view_features, const AdapterWeights& weights, Scale scale) {
  static constexpr std::array<EmbeddingView, 3> views{EmbeddingView::drone_s1, EmbeddingView::drone_s2,
                                                     EmbeddingView::drone_s3};
  return to_embedding(adapter_fuse(ad::constant(view_features), weights), views[static_cast<std::size_t>(scale_index(scale))]);
}

// On-disk point cloud container:
//   u32 N, u32 flags (bit 0: colors present),
//   N x 3 little-endian float32 positions, then N x 3 float32 colors if flagged.
inline void write_point_cloud(std::ostream& out, const PointCloud& cloud) {
  io::write_u32(out, static_cast<std::uint32_t>(cloud.points.rows()));
  io::write_u32(out, cloud.colors ? 1u : 0u);
  for (Eigen::Index k = 0; k < cloud.points.rows(); ++k)
    for (int c = 0; c < 3; ++c) io::write_f32(out, static_cast<float>(cloud.points(k, c)));
  if (cloud.colors) {
    for (Eigen::Index k = 0; k < cloud.colors->rows(); ++k)
      for (int c = 0; c < 3; ++c) io::write_f32(out, static_cast<float>((*cloud.colors)(k, c)));
  }
}

inline PointCloud read_point_cloud(std::istream& in) {
  const std::uint32_t n = io::read_u32(in);
  const std::uint32_t flags = io::read_u32(in);
  PointCloud cloud;
  cloud.points.resize(n, 3);
  for (std::uint32_t k = 0; k < n; ++k)
    for (int c = 0; c < 3; ++c) cloud.points(k, c) = io::read_f32(in);
  if (flags & 1u) {
    PointMatrix colors(n, 3);
    for (std::uint32_t k = 0; k < n; ++k)
      for (int c = 0; c < 3; ++c) colors(k, c) = io::read_f32(in);
    cloud.colors = std::move(colors);
  }
  return cloud;
}

// Clouds keyed by (location, scale, backend version); files are written to a
// temporary name and renamed into place.
class PointCloudCache {
 public:
  explicit PointCloudCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::filesystem::path path_for(const SceneGroup& scene, const std::string& version) const {
    std::string key = scene.location_id + "_" + to_string(scene.scale) + "_" + version;
    for (char& ch : key) {
      if (ch == '/' || ch == '\\' || ch == ' ') ch = '_';
    }
    return dir_ / (key + ".pcd");
  }

  std::optional<PointCloud> load(const SceneGroup& scene, const std::string& version) const {
    const auto path = path_for(scene, version);
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    PointCloud cloud = read_point_cloud(in);
    cloud.scale = scene.scale;
    cloud.location_id = scene.location_id;
    return cloud;
  }

  void store(const SceneGroup& scene, const std::string& version, const PointCloud& cloud) const {
    const auto path = path_for(scene, version);
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write point cloud cache " + tmp.string());
      write_point_cloud(out, cloud);
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::filesystem::path dir_;
};

struct BridgeConfig {
  int views = 6;
  int depth_resolution = 224;
  int fusion_width = 512;
  bool share_adapters = true;
  std::filesystem::path cache_dir;  // empty: in-memory only
  BackboneConfig view_encoder;      // frozen
  std::uint64_t seed = 17;
};

// Drives reconstruct -> project_depth -> frozen view encoding -> adapter_fuse
// for scene groups. View features are memoized per scene since every stage
// before the adapter is frozen.
class SceneBridge {
 public:
  SceneBridge(BridgeConfig config, int embedding_dim, std::shared_ptr<const ReconstructionBackend> backend,
              std::shared_ptr<const ImageSource> images)
      : config_(std::move(config)),
        backend_(std::move(backend)),
        images_(std::move(images)),
        encoder_([this] {
          BackboneConfig c = config_.view_encoder;
          c.input_size = config_.depth_resolution;
          return c;
        }()) {
    if (config_.depth_resolution % kPatchSize != 0) {
      throw std::invalid_argument("bridge3d: depth_resolution must be a multiple of 14");
    }
    AdapterShape shape{config_.views, encoder_.width(), config_.fusion_width, embedding_dim};
    const int count = config_.share_adapters ? 1 : 3;
    for (int i = 0; i < count; ++i) {
      const std::string prefix = config_.share_adapters ? "adapter" : "adapter." + to_string(kScales[static_cast<std::size_t>(i)]);
      adapters_.emplace_back(shape, config_.seed + static_cast<std::uint64_t>(i), prefix);
      params_.append(adapters_.back().parameters());
    }
    if (!config_.cache_dir.empty()) cache_.emplace(config_.cache_dir);
  }

  const BridgeConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }
  const DepthViewEncoder& encoder() const { return encoder_; }

  const AdapterWeights& adapter(Scale scale) const {
    return adapters_[config_.share_adapters ? 0 : static_cast<std::size_t>(scale_index(scale))];
  }

  PointCloud reconstruct(const SceneGroup& scene) const {
    validate(scene);
    if (cache_) {
      if (auto cached = cache_->load(scene, backend_->version())) return *cached;
    }
    std::vector<Image> frames;
    frames.reserve(scene.images.size());
    for (const auto& rec : scene.images) frames.push_back(images_->load(rec));
    PointCloud cloud = backend_->reconstruct(scene, frames);
    if (cache_) cache_->store(scene, backend_->version(), cloud);
    return cloud;
  }

  // (M x Ce) frozen features; nullopt when the backend failed (logged).
  std::optional<Matrix> view_features(const SceneGroup& scene, std::ostream* log = &std::cerr) const {
    const std::string key = scene.location_id + "/" + to_string(scene.scale);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    try {
      const PointCloud cloud = reconstruct(scene);
      const DepthViewSet views = project_depth(cloud, config_.views, config_.depth_resolution);
      Matrix feats = encoder_.encode(views);
      memo_.emplace(key, feats);
      return feats;
    } catch (const std::exception& e) {
      if (log) *log << "warning: scene " << key << " unavailable: " << e.what() << '\n';
      memo_.emplace(key, std::nullopt);
      return std::nullopt;
    }
  }

  ad::Var embed_features(const Matrix& features, Scale scale) const {
    return adapter_fuse(ad::constant(features), adapter(scale));
  }

  std::optional<Embedding> scene_embedding(const SceneGroup& scene) const {
    auto feats = view_features(scene);
    if (!feats) return std::nullopt;
    return adapter_fuse(*feats, adapter(scene.scale), scene.scale);
  }

 private:
  BridgeConfig config_;
  std::shared_ptr<const ReconstructionBackend> backend_;
  std::shared_ptr<const ImageSource> images_;
  DepthViewEncoder encoder_;
  std::vector<AdapterWeights> adapters_;
  ParameterSet params_;
  std::optional<PointCloudCache> cache_;
  mutable std::map<std::string, std::optional<Matrix>> memo_;
};

}  // namespace skylink
