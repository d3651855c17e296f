#pragma once

// Synthetic cross-view dataset with correlated views, for desk-scale runs.
//
// Every location owns a latent 4 x 4 grid of RGB colours.
//  satellite: the grid drawn as square blocks (top-down layout), plus noise.
//  street:    sky band on top, then four facade bands; band b shows grid row
//             3 - b, columns cycled with a random horizontal shift, random
//             brightness and noise. Same colours, different geometry.
//  drone:     frame f of scale s blends the satellite rotated by 20 f degrees
//             with the street view; the street weight falls with altitude.
//  pool:      per location, `grem_good` fresh street renderings of the same
//             grid and `grem_unrelated` renderings of other locations' grids.
// Test queries and gallery are fresh renderings with independent noise.

#include "skylink/data_model.hpp"
#include "skylink/image.hpp"
#include "skylink/image_source.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace skylink {

struct SyntheticConfig {
  int locations = 32;
  int image_size = 56;
  int drone_size = 28;
  double noise = 0.04;
  double street_gain = 0.05;           // street brightness factor drawn from 1 +- street_gain
  double palette_separation = 0.4;
  int streets_per_location = 4;        // training street renderings
  int grem_good = 2;
  int grem_unrelated = 2;
  std::uint64_t seed = 2024;
};

struct SyntheticDataset {
  std::vector<ImageRecord> train;       // street, satellite and 54 drone frames per location
  std::vector<ImageRecord> queries;     // test street
  std::vector<ImageRecord> gallery;     // test satellite
  std::vector<ImageRecord> grem_pool;   // auxiliary street candidates, location-scoped
  std::shared_ptr<MemoryImageSource> images;
};

namespace synth {

using ColorGrid = std::array<std::array<std::array<double, 3>, 4>, 4>;  // [row][col][channel]

struct Palette {
  std::array<double, 3> dominant;
  std::array<double, 3> accent;
};

inline double palette_distance(const Palette& a, const Palette& b) {
  double d = 0;
  for (int c = 0; c < 3; ++c) {
    d += (a.dominant[c] - b.dominant[c]) * (a.dominant[c] - b.dominant[c]);
    d += (a.accent[c] - b.accent[c]) * (a.accent[c] - b.accent[c]);
  }
  return std::sqrt(d);
}

// Rejection sampling keeps every pair of palettes at least `min_distance`
// apart; the threshold is relaxed when sampling stalls.
inline std::vector<Palette> random_palettes(int count, double min_distance, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::vector<Palette> out;
  int misses = 0;
  while (static_cast<int>(out.size()) < count) {
    Palette p{{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}};
    bool ok = true;
    for (const auto& q : out) ok = ok && palette_distance(p, q) >= min_distance;
    if (ok) {
      out.push_back(p);
      misses = 0;
    } else if (++misses > 1000) {
      min_distance *= 0.9;
      misses = 0;
    }
  }
  return out;
}

// Cells take the dominant colour (about three quarters) or the accent colour.
inline ColorGrid random_grid(const Palette& p, std::mt19937_64& rng) {
  std::bernoulli_distribution dominant(0.75);
  ColorGrid g{};
  for (auto& row : g)
    for (auto& cell : row) cell = dominant(rng) ? p.dominant : p.accent;
  return g;
}

inline double clamp01(double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); }

inline Image satellite(const ColorGrid& g, int size, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, noise);
  Image img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp01(g[y * 4 / size][x * 4 / size][c] + n(rng));
  return img;
}

inline Image street(const ColorGrid& g, int size, double noise, double gain_jitter, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, noise);
  std::uniform_int_distribution<int> shift_dist(0, size - 1);
  std::uniform_real_distribution<double> bright(1.0 - gain_jitter, 1.0 + gain_jitter);
  const int shift = shift_dist(rng);
  const double gain = bright(rng);
  const int sky = size / 5;
  const std::array<double, 3> sky_color{0.55, 0.7, 0.95};
  Image img(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v;
        if (y < sky) {
          v = sky_color[static_cast<std::size_t>(c)];
        } else {
          const int band = (y - sky) * 4 / (size - sky);
          const int col = ((x + shift) % size) * 4 / size;
          v = gain * g[static_cast<std::size_t>(3 - band)][static_cast<std::size_t>(col)][static_cast<std::size_t>(c)];
        }
        img.at(y, x, c) = clamp01(v + n(rng));
      }
    }
  }
  return img;
}

inline Image drone(const Image& sat, const Image& st, int frame, int scale, int size) {
  static constexpr std::array<double, 3> kStreetWeight{0.7, 0.4, 0.1};
  const double w = kStreetWeight[static_cast<std::size_t>(scale)];
  const Image a = resize(rotate(sat, 20.0 * frame, 0.5), size, size);
  const Image b = resize(st, size, size);
  Image out(size, size);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (1.0 - w) * a.data[i] + w * b.data[i];
  return out;
}

inline std::string location_name(int i) {
  std::ostringstream os;
  os << "L" << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

}  // namespace synth

inline SyntheticDataset make_synthetic_dataset(const SyntheticConfig& cfg = {}) {
  if (cfg.locations < 2) throw std::invalid_argument("synthetic dataset needs at least two locations");
  SyntheticDataset ds;
  ds.images = std::make_shared<MemoryImageSource>();
  std::mt19937_64 rng(cfg.seed);
  std::vector<synth::ColorGrid> grids;
  for (const auto& p : synth::random_palettes(cfg.locations, cfg.palette_separation, rng)) {
    grids.push_back(synth::random_grid(p, rng));
  }

  auto add = [&](std::vector<ImageRecord>& into, std::string id, const std::string& loc, View view,
                 std::optional<Scale> scale, Image img) {
    ImageRecord r;
    r.image_id = std::move(id);
    r.location_id = loc;
    r.view = view;
    r.scale = scale;
    r.height_px = img.height;
    r.width_px = img.width;
    ds.images->put(r.image_id, std::move(img));
    into.push_back(std::move(r));
  };

  const int n = cfg.image_size;
  for (int i = 0; i < cfg.locations; ++i) {
    const auto& g = grids[static_cast<std::size_t>(i)];
    const std::string loc = synth::location_name(i);
    Image sat = synth::satellite(g, n, cfg.noise, rng);
    Image st = synth::street(g, n, cfg.noise, cfg.street_gain, rng);
    for (int k = 1; k < cfg.streets_per_location; ++k) {
      add(ds.train, "train/street/" + loc + "/street" + std::to_string(k) + ".ppm", loc, View::street, std::nullopt,
          synth::street(g, n, cfg.noise, cfg.street_gain, rng));
    }
    for (int s = 0; s < 3; ++s) {
      for (int f = 0; f < kSceneSize; ++f) {
        std::ostringstream id;
        id << "train/drone/" << loc << "/f" << std::setw(2) << std::setfill('0') << s * kSceneSize + f << ".ppm";
        add(ds.train, id.str(), loc, View::drone, kScales[static_cast<std::size_t>(s)],
            synth::drone(sat, st, f, s, cfg.drone_size));
      }
    }
    add(ds.train, "train/street/" + loc + "/street0.ppm", loc, View::street, std::nullopt, std::move(st));
    add(ds.train, "train/satellite/" + loc + "/satellite.ppm", loc, View::satellite, std::nullopt, std::move(sat));
    add(ds.queries, "test/query_street/" + loc + "/query.ppm", loc, View::street, std::nullopt,
        synth::street(g, n, cfg.noise, cfg.street_gain, rng));
    add(ds.gallery, "test/gallery_satellite/" + loc + "/gallery.ppm", loc, View::satellite, std::nullopt,
        synth::satellite(g, n, cfg.noise, rng));
    for (int k = 0; k < cfg.grem_good; ++k) {
      add(ds.grem_pool, "pool/" + loc + "/good" + std::to_string(k) + ".ppm", loc, View::street, std::nullopt,
          synth::street(g, n, cfg.noise, cfg.street_gain, rng));
    }
    std::uniform_int_distribution<int> other(0, cfg.locations - 2);
    for (int k = 0; k < cfg.grem_unrelated; ++k) {
      int j = other(rng);
      if (j >= i) ++j;
      add(ds.grem_pool, "pool/" + loc + "/other" + std::to_string(k) + ".ppm", loc, View::street, std::nullopt,
          synth::street(grids[static_cast<std::size_t>(j)], n, cfg.noise, cfg.street_gain, rng));
    }
  }
  for (auto& r : ds.grem_pool) r.source = Source::grem_augmented;
  return ds;
}

// Writes every image as PPM under `root`, using the image ids as relative
// paths, so the directory scanner reads the dataset back. Pool images land
// under root/pool/<location>/.
inline void write_synthetic_dataset(const SyntheticDataset& ds, const std::filesystem::path& root) {
  for (const auto* list : {&ds.train, &ds.queries, &ds.gallery, &ds.grem_pool}) {
    for (const auto& r : *list) {
      const auto path = root / r.image_id;
      std::filesystem::create_directories(path.parent_path());
      write_ppm(path, ds.images->load(r));
    }
  }
}

}  // namespace skylink
