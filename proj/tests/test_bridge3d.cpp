#include "skylink/bridge3d.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

namespace {

using namespace skylink;
using namespace testing_support;

PointCloud cloud_of(const PointMatrix& pts) {
  PointCloud c;
  c.points = pts;
  return c;
}

std::vector<Image> frames(double fill = 0.5) { return std::vector<Image>(kSceneSize, Image(8, 8, fill)); }

SceneGroup dummy_scene(const std::string& loc = "L", Scale s = Scale::s1) {
  SceneGroup g{loc, s, {}};
  for (int i = 0; i < kSceneSize; ++i) {
    ImageRecord r;
    r.image_id = loc + "/" + std::to_string(i);
    r.location_id = loc;
    r.view = View::drone;
    r.scale = s;
    r.height_px = r.width_px = 8;
    g.images.push_back(r);
  }
  return g;
}

TEST(CameraLayout, RingTopAndBottom) {
  auto one = camera_directions(1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], Eigen::Vector3d(0, 0, 1));
  auto four = camera_directions(4);
  EXPECT_EQ(four[0], Eigen::Vector3d(1, 0, 0));
  EXPECT_EQ(four[1], Eigen::Vector3d(0, 1, 0));
  EXPECT_EQ(four[2], Eigen::Vector3d(-1, 0, 0));
  EXPECT_EQ(four[3], Eigen::Vector3d(0, -1, 0));
  auto five = camera_directions(5);
  EXPECT_EQ(five.back(), Eigen::Vector3d(0, 0, 1));
  auto six = camera_directions(6);
  ASSERT_EQ(six.size(), 6u);
  EXPECT_EQ(six[4], Eigen::Vector3d(0, 0, 1));
  EXPECT_EQ(six[5], Eigen::Vector3d(0, 0, -1));
  for (const auto& d : camera_directions(9)) EXPECT_NEAR(d.norm(), 1.0, 1e-12);
  EXPECT_THROW(camera_directions(0), std::invalid_argument);
}

TEST(ProjectDepth, CentrePointLandsInTheCentrePixel) {
  PointMatrix p(1, 3);
  p << 3.0, -2.0, 5.0;  // normalization moves a lone point to the origin
  auto set = project_depth(cloud_of(p), 1, 5);
  ASSERT_EQ(set.views.size(), 1u);
  const auto& v = set.views[0];
  EXPECT_EQ((v.array() != 0).count(), 1);
  EXPECT_DOUBLE_EQ(v(2, 2), 1.0);
}

TEST(ProjectDepth, CubeCornersShowFourPixelsInEveryFaceView) {
  PointMatrix corners(8, 3);
  int k = 0;
  for (int x : {0, 1})
    for (int y : {0, 1})
      for (int z : {0, 1}) corners.row(k++) << x, y, z;
  const int res = 8;
  auto set = project_depth(cloud_of(corners), 6, res);
  // corners sit at +-0.5 on every image axis: u = 0.5 +- 0.5 / sqrt(3)
  const int lo = static_cast<int>(std::floor((0.5 - 0.5 / std::sqrt(3.0)) * res));
  const int hi = static_cast<int>(std::floor((0.5 + 0.5 / std::sqrt(3.0)) * res));
  for (const auto& v : set.views) {
    EXPECT_EQ((v.array() != 0).count(), 4);
    for (int r : {lo, hi})
      for (int c : {lo, hi}) EXPECT_DOUBLE_EQ(v(r, c), 0.5);  // the nearer face wins
  }
}

TEST(ProjectDepth, QuarterTurnCyclesTheRingViews) {
  auto cloud = StubReconstructionBackend(4).reconstruct(dummy_scene(), [] {
    std::vector<Image> f;
    for (int i = 0; i < kSceneSize; ++i) {
      f.emplace_back(8, 8, 0.05 * i);
      f.back().at(0, 0, 0) = 0.95;  // non-blank, so every frame adds a ripple
    }
    return f;
  }());
  PointCloud turned = cloud;
  for (Eigen::Index k = 0; k < cloud.points.rows(); ++k) {
    turned.points(k, 0) = -cloud.points(k, 1);
    turned.points(k, 1) = cloud.points(k, 0);
  }
  auto a = project_depth(cloud, 4, 28);
  auto b = project_depth(turned, 4, 28);
  for (int j = 0; j < 4; ++j) EXPECT_TRUE(b.views[(j + 1) % 4].isApprox(a.views[j], 1e-12)) << "view " << j;
  EXPECT_FALSE(a.views[0].isApprox(a.views[1], 1e-6));
}

TEST(ProjectDepth, InvariantToPointOrder) {
  auto cloud = StubReconstructionBackend(2, 300).reconstruct(dummy_scene(), frames(0.3));
  PointCloud shuffled = cloud;
  std::vector<int> order(cloud.points.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::mt19937_64 rng(1);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) shuffled.points.row(i) = cloud.points.row(order[i]);
  auto a = project_depth(cloud, 6, 14);
  auto b = project_depth(shuffled, 6, 14);
  for (int j = 0; j < 6; ++j) EXPECT_EQ(a.views[j], b.views[j]);
}

TEST(StubBackend, DeterministicHashSensitiveAndCanonicalOnBlankInput) {
  StubReconstructionBackend stub(7, 64);
  auto f = frames(0.4);
  f[3].at(1, 1, 0) = 0.9;
  auto a = stub.reconstruct(dummy_scene(), f);
  auto b = stub.reconstruct(dummy_scene(), f);
  EXPECT_EQ(a.points, b.points);
  auto g = f;
  g[3].at(1, 1, 0) = 0.8;
  EXPECT_FALSE(a.points.isApprox(stub.reconstruct(dummy_scene(), g).points));

  // 18 identical blank frames: unit Fibonacci sphere, z_k = 1 - 2 (k + 0.5) / N
  auto blank = stub.reconstruct(dummy_scene(), frames(0.4));
  const double golden = std::acos(-1.0) * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < 64; ++k) {
    const double z = 1.0 - 2.0 * (k + 0.5) / 64;
    const double rho = std::sqrt(1 - z * z);
    EXPECT_NEAR(blank.points(k, 0), rho * std::cos(k * golden), 1e-12);
    EXPECT_NEAR(blank.points(k, 1), rho * std::sin(k * golden), 1e-12);
    EXPECT_NEAR(blank.points(k, 2), z, 1e-12);
  }
  EXPECT_EQ(blank.scale, Scale::s1);
  EXPECT_EQ(blank.location_id, "L");
  EXPECT_THROW(stub.reconstruct(dummy_scene(), std::vector<Image>(5, Image(8, 8))), ReconstructionError);
}

TEST(PointCloudIo, RoundTripAndCache) {
  TempDir dir;
  auto cloud = StubReconstructionBackend(1, 16).reconstruct(dummy_scene(), frames(0.2));
  std::stringstream ss;
  write_point_cloud(ss, cloud);
  auto back = read_point_cloud(ss);
  EXPECT_TRUE(back.points.isApprox(cloud.points, 1e-6));
  ASSERT_TRUE(back.colors.has_value());

  PointCloudCache cache(dir.path());
  const auto scene = dummy_scene("a/b", Scale::s2);
  EXPECT_FALSE(cache.load(scene, "v1").has_value());
  cache.store(scene, "v1", cloud);
  auto hit = cache.load(scene, "v1");
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ(hit->scale, Scale::s2);
  EXPECT_FALSE(cache.load(scene, "v2").has_value());
}

AdapterWeights random_adapter(const AdapterShape& s, std::mt19937_64& rng) {
  return AdapterWeights(s, random_matrix(s.views * s.view_width, s.fusion_width, rng),
                        random_matrix(s.fusion_width, s.embedding_dim, rng), random_matrix(s.embedding_dim, s.embedding_dim, rng));
}

TEST(Adapter, MatchesLoopOracle) {
  std::mt19937_64 rng(2);
  AdapterShape s{2, 4, 6, 8};
  auto w = random_adapter(s, rng);
  auto views = random_matrix(2, 4, rng);
  auto got = adapter_fuse(views, w, Scale::s2);
  auto want = oracle::adapter(views, w.w3().value(), w.w4().value(), w.w5().value());
  ASSERT_EQ(got.dim(), 8);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(got.vector(i), want[i], 1e-10);
  EXPECT_EQ(got.view, EmbeddingView::drone_s2);
}

TEST(Adapter, ZeroResidualBranchAndZeroGlobal) {
  std::mt19937_64 rng(3);
  AdapterShape s{3, 2, 5, 4};
  auto views = random_matrix(3, 2, rng);
  auto w3 = random_matrix(6, 5, rng);
  auto w4 = random_matrix(5, 4, rng);
  AdapterWeights no_res(s, w3, w4, ad::Matrix::Zero(4, 4));
  auto t = adapter_fuse_trace(ad::constant(views), no_res);
  EXPECT_TRUE(t.output.value().isApprox(t.global.value().normalized(), 1e-14));
  AdapterWeights zero(s, ad::Matrix::Zero(6, 5), w4, random_matrix(4, 4, rng));
  EXPECT_THROW(adapter_fuse(ad::constant(views), zero), ad::DegenerateEmbedding);
}

TEST(Adapter, ResidualStructureIsExact) {
  std::mt19937_64 rng(4);
  AdapterShape s{2, 3, 4, 5};
  auto w = random_adapter(s, rng);
  auto t = adapter_fuse_trace(ad::constant(random_matrix(2, 3, rng)), w);
  const ad::Matrix diff = t.fused.value() - t.global.value();
  EXPECT_EQ(diff, t.residual.value());
  EXPECT_TRUE((diff.array() >= 0).all());
}

TEST(Adapter, ShapeErrors) {
  std::mt19937_64 rng(5);
  AdapterShape s{2, 3, 4, 5};
  auto w = random_adapter(s, rng);
  EXPECT_THROW(adapter_fuse(ad::constant(random_matrix(3, 3, rng)), w), std::invalid_argument);
  EXPECT_THROW(adapter_fuse(ad::constant(random_matrix(2, 4, rng)), w), std::invalid_argument);
  EXPECT_THROW(AdapterWeights(s, random_matrix(5, 4, rng), random_matrix(4, 5, rng), random_matrix(5, 5, rng)),
               std::invalid_argument);
}

TEST(Adapter, GradientCheck) {
  std::mt19937_64 rng(6);
  AdapterShape s{3, 4, 6, 5};
  auto w = random_adapter(s, rng);
  ad::Var views(random_matrix(3, 4, rng), true);
  EXPECT_LT(gradcheck({views, w.w3(), w.w4(), w.w5()}, [&] { return probe(adapter_fuse(views, w)); }), 1e-4);
}

class BridgeFixture : public ::testing::Test {
 protected:
  SyntheticDataset ds = make_synthetic_dataset(tiny_synthetic(2));
  PipelineConfig pipe = tiny_pipeline();
  std::vector<SceneGroup> scenes = scene_groups(ds.train);

  SceneBridge make(std::filesystem::path cache = {}) {
    BridgeConfig c = pipe.bridge;
    c.cache_dir = std::move(cache);
    return SceneBridge(c, pipe.embedding_dim, std::make_shared<StubReconstructionBackend>(1), ds.images);
  }
};

TEST_F(BridgeFixture, SceneEmbeddingsAreDeterministicAndTaggedPerScale) {
  auto bridge = make();
  ASSERT_EQ(scenes.size(), 6u);
  std::vector<Eigen::RowVectorXd> seen;
  for (int s = 0; s < 3; ++s) {
    auto e = bridge.scene_embedding(scenes[s]);
    ASSERT_TRUE(e.has_value());
    const std::array<EmbeddingView, 3> tags{EmbeddingView::drone_s1, EmbeddingView::drone_s2, EmbeddingView::drone_s3};
    EXPECT_EQ(e->view, tags[s]);
    EXPECT_NEAR(e->vector.norm(), 1.0, 1e-12);
    auto again = make().scene_embedding(scenes[s]);
    EXPECT_EQ(e->vector, again->vector);
    for (const auto& prev : seen) EXPECT_FALSE(prev.isApprox(e->vector, 1e-9));
    seen.push_back(e->vector);
  }
}

TEST_F(BridgeFixture, OnlyAdapterWeightsAreTrainable) {
  auto bridge = make();
  for (const auto& e : bridge.parameters().entries()) EXPECT_EQ(e.name.rfind("adapter", 0), 0u);
  for (const auto& e : bridge.encoder().network().parameters().entries()) EXPECT_FALSE(e.trainable);
  auto feats = bridge.view_features(scenes[0]);
  ASSERT_TRUE(feats.has_value());
  ad::backward(probe(bridge.embed_features(*feats, Scale::s1)));
  for (const auto& e : bridge.encoder().network().parameters().entries()) EXPECT_EQ(e.var.grad().size(), 0);
  for (const auto& e : bridge.parameters().entries()) EXPECT_GT(e.var.grad().size(), 0);
  bridge.parameters().zero_grad();
}

TEST_F(BridgeFixture, DiskCacheServesTheSameCloud) {
  TempDir dir;
  auto first = make(dir.path()).reconstruct(scenes[1]);
  EXPECT_FALSE(std::filesystem::is_empty(dir.path()));
  auto second = make(dir.path()).reconstruct(scenes[1]);
  EXPECT_TRUE(first.points.isApprox(second.points, 1e-6));
}

class FailingBackend final : public ReconstructionBackend {
 public:
  PointCloud reconstruct(const SceneGroup&, std::span<const Image>) const override {
    throw ReconstructionError("backend offline");
  }
  std::string version() const override { return "failing"; }
};

TEST_F(BridgeFixture, BackendFailureMarksTheSceneUnavailable) {
  SceneBridge bridge(pipe.bridge, pipe.embedding_dim, std::make_shared<FailingBackend>(), ds.images);
  std::ostringstream log;
  EXPECT_FALSE(bridge.view_features(scenes[0], &log).has_value());
  EXPECT_NE(log.str().find("backend offline"), std::string::npos);
}

TEST_F(BridgeFixture, ScaleGradientThroughAdapterMatchesFiniteDifferences) {
  auto bridge = make();
  auto feats = *bridge.view_features(scenes[2]);
  const auto& w = bridge.adapter(Scale::s3);
  EXPECT_LT(gradcheck({w.w3(), w.w4(), w.w5()}, [&] { return probe(bridge.embed_features(feats, Scale::s3)); }), 1e-4);
}

}  // namespace
