#pragma once

#include "oracles.hpp"
#include "skylink/autodiff.hpp"
#include "skylink/model.hpp"
#include "skylink/synthetic.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing_support {

namespace ad = skylink::ad;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "skylink") {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline ad::Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  ad::Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

// Largest per-leaf relative error between backward() and central differences
// of the scalar `f`, which must rebuild its graph from the leaves on each call.
inline double gradcheck(std::vector<ad::Var> leaves, const std::function<ad::Var()>& f, double h = 1e-6) {
  for (auto& v : leaves) {
    v.set_requires_grad(true);
    v.zero_grad();
  }
  ad::backward(f());
  double worst = 0.0;
  for (auto& v : leaves) {
    ad::Matrix analytic = v.grad().size() ? v.grad() : ad::Matrix::Zero(v.rows(), v.cols());
    ad::Matrix& x = v.mutable_value();
    ad::Matrix numeric = oracle::numeric_gradient(x, [&] { return f().scalar(); }, h);
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
    v.zero_grad();
  }
  return worst;
}

// Fixed random projection turning a matrix-valued output into a scalar.
inline ad::Var probe(const ad::Var& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ad::sum_all(ad::mul(out, ad::constant(random_matrix(static_cast<int>(out.rows()), static_cast<int>(out.cols()), rng))));
}

// 28 x 28 inputs (2 x 2 grid), C = 16, D = 16; bridge with 4 views of 14 x 14.
inline skylink::PipelineConfig tiny_pipeline() {
  skylink::PipelineConfig c = skylink::PipelineConfig::toy();
  c.backbone.input_size = 28;
  c.backbone.channels = 16;
  c.backbone.depth = 1;
  c.embedding_dim = 16;
  c.pafa.mixer_depth = 2;
  c.pafa.out_channels = 8;
  c.pafa.out_rows = 2;
  c.pafa.embedding_dim = 16;
  c.baseline.embedding_dim = 16;
  c.baseline.netvlad_clusters = 4;
  c.baseline.conv_ap_channels = 8;
  c.bridge.views = 4;
  c.bridge.depth_resolution = 14;
  c.bridge.fusion_width = 16;
  c.bridge.view_encoder.channels = 8;
  return c;
}

inline skylink::SyntheticConfig tiny_synthetic(int locations = 4) {
  skylink::SyntheticConfig c;
  c.locations = locations;
  c.image_size = 28;
  c.drone_size = 14;
  c.streets_per_location = 2;
  c.grem_good = 1;
  c.grem_unrelated = 1;
  return c;
}

}  // namespace testing_support
