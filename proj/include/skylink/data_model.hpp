#pragma once

// Dataset records for the University-1652 directory layout and batch
// assembly of per-location (street, satellite, 3 x drone scene) tuples.
//
// Layout consumed by scan_dataset (one subdirectory per location id):
//
//   <root>/train/street/<location>/<image>
//   <root>/train/satellite/<location>/<image>
//   <root>/train/drone/<location>/<image>      54 altitude-ordered frames
//   <root>/test/query_street/<location>/<image>
//   <root>/test/gallery_satellite/<location>/<image>

#include "skylink/image.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

enum class View { street, satellite, drone };
enum class Scale { s1, s2, s3 };
enum class Source { original, grem_augmented };
enum class Split { train, test_query, test_gallery };

inline constexpr std::array<Scale, 3> kScales{Scale::s1, Scale::s2, Scale::s3};
inline constexpr int kSceneSize = 18;
inline constexpr int kDroneFramesPerLocation = kSceneSize * 3;

inline std::string to_string(View v) {
  switch (v) {
    case View::street: return "street";
    case View::satellite: return "satellite";
    case View::drone: return "drone";
  }
  return "?";
}

inline std::string to_string(Scale s) {
  switch (s) {
    case Scale::s1: return "s1";
    case Scale::s2: return "s2";
    case Scale::s3: return "s3";
  }
  return "?";
}

inline std::string to_string(Source s) { return s == Source::original ? "original" : "grem_augmented"; }

inline int scale_index(Scale s) { return static_cast<int>(s); }

inline View parse_view(const std::string& s) {
  if (s == "street") return View::street;
  if (s == "satellite") return View::satellite;
  if (s == "drone") return View::drone;
  throw std::invalid_argument("unknown view: " + s);
}

inline Scale parse_scale(const std::string& s) {
  if (s == "s1") return Scale::s1;
  if (s == "s2") return Scale::s2;
  if (s == "s3") return Scale::s3;
  throw std::invalid_argument("unknown scale: " + s);
}

inline Source parse_source(const std::string& s) {
  if (s == "original") return Source::original;
  if (s == "grem_augmented") return Source::grem_augmented;
  throw std::invalid_argument("unknown source: " + s);
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test_query") return Split::test_query;
  if (s == "test_gallery") return Split::test_gallery;
  throw std::invalid_argument("unknown split: " + s);
}

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageRecord {
  std::string image_id;
  std::string location_id;
  View view = View::street;
  std::optional<Scale> scale;
  Source source = Source::original;
  std::filesystem::path path;
  int height_px = 0;
  int width_px = 0;

  bool operator==(const ImageRecord&) const = default;
};

inline void validate(const ImageRecord& r) {
  if (r.image_id.empty() || r.location_id.empty()) throw DataError("ImageRecord: empty id");
  if (r.scale.has_value() != (r.view == View::drone)) {
    throw DataError("ImageRecord " + r.image_id + ": scale must be present exactly for drone images");
  }
  if (r.height_px <= 0 || r.width_px <= 0) throw DataError("ImageRecord " + r.image_id + ": non-positive size");
}

struct SceneGroup {
  std::string location_id;
  Scale scale = Scale::s1;
  std::vector<ImageRecord> images;  // exactly kSceneSize, source order
};

inline void validate(const SceneGroup& g) {
  if (g.images.size() != static_cast<std::size_t>(kSceneSize)) {
    throw DataError("SceneGroup " + g.location_id + "/" + to_string(g.scale) + ": expected 18 images, got " +
                    std::to_string(g.images.size()));
  }
  for (const auto& img : g.images) {
    if (img.location_id != g.location_id || img.scale != g.scale) {
      throw DataError("SceneGroup " + g.location_id + ": member " + img.image_id + " disagrees on location or scale");
    }
  }
}

struct LocationTuple {
  std::string location_id;
  ImageRecord street;
  ImageRecord satellite;
  std::array<SceneGroup, 3> scenes;  // indexed by scale_index
};

inline void validate(const LocationTuple& t) {
  if (t.street.location_id != t.location_id || t.satellite.location_id != t.location_id) {
    throw DataError("LocationTuple " + t.location_id + ": component location mismatch");
  }
  for (std::size_t i = 0; i < t.scenes.size(); ++i) {
    if (t.scenes[i].location_id != t.location_id || scale_index(t.scenes[i].scale) != static_cast<int>(i)) {
      throw DataError("LocationTuple " + t.location_id + ": scenes must cover s1, s2, s3 in order");
    }
    validate(t.scenes[i]);
  }
}

struct Batch {
  std::vector<LocationTuple> tuples;
  std::uint64_t seed = 0;
};

struct ScanOptions {
  // When set, the first 18 frames are the highest altitude (s3) instead of s1.
  bool invert_altitude = false;
};

struct ScanReport {
  std::vector<ImageRecord> records;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir, bool directories) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string relative_id(const std::filesystem::path& root, const std::filesystem::path& file) {
  return std::filesystem::relative(file, root).generic_string();
}

inline void scan_view_dir(const std::filesystem::path& root, const std::filesystem::path& dir, View view,
                          const ScanOptions& options, ScanReport& report) {
  if (!std::filesystem::is_directory(dir)) {
    report.warnings.push_back("view directory missing: " + dir.string());
    return;
  }
  for (const auto& loc_dir : sorted_entries(dir, true)) {
    const std::string location = loc_dir.filename().string();
    std::vector<ImageRecord> found;
    for (const auto& file : sorted_entries(loc_dir, false)) {
      auto size = probe_image_size(file);
      if (!size) {
        report.warnings.push_back("unreadable image skipped: " + file.string());
        continue;
      }
      ImageRecord r;
      r.image_id = relative_id(root, file);
      r.location_id = location;
      r.view = view;
      r.path = file;
      r.height_px = size->height;
      r.width_px = size->width;
      found.push_back(std::move(r));
    }
    if (view == View::drone) {
      if (found.size() != static_cast<std::size_t>(kDroneFramesPerLocation)) {
        report.warnings.push_back("location " + location + ": " + std::to_string(found.size()) +
                                  " drone images cannot be split into 3 groups of 18; drone view skipped");
        continue;
      }
      for (std::size_t i = 0; i < found.size(); ++i) {
        int group = static_cast<int>(i) / kSceneSize;
        if (options.invert_altitude) group = 2 - group;
        found[i].scale = kScales[static_cast<std::size_t>(group)];
      }
    }
    for (auto& r : found) report.records.push_back(std::move(r));
  }
}

}  // namespace detail

inline ScanReport scan_dataset_report(const std::filesystem::path& root, Split split, const ScanOptions& options = {}) {
  if (!std::filesystem::is_directory(root)) throw DataError("dataset root does not exist: " + root.string());
  ScanReport report;
  switch (split) {
    case Split::train:
      detail::scan_view_dir(root, root / "train" / "street", View::street, options, report);
      detail::scan_view_dir(root, root / "train" / "satellite", View::satellite, options, report);
      detail::scan_view_dir(root, root / "train" / "drone", View::drone, options, report);
      break;
    case Split::test_query:
      detail::scan_view_dir(root, root / "test" / "query_street", View::street, options, report);
      break;
    case Split::test_gallery:
      detail::scan_view_dir(root, root / "test" / "gallery_satellite", View::satellite, options, report);
      break;
  }
  if (report.records.empty()) report.warnings.push_back("no images found under " + root.string());
  return report;
}

// Warnings are written to the given stream (stderr by default).
inline std::vector<ImageRecord> scan_dataset(const std::filesystem::path& root, Split split,
                                             const ScanOptions& options = {}, std::ostream* log = &std::cerr) {
  ScanReport report = scan_dataset_report(root, split, options);
  if (log) {
    for (const auto& w : report.warnings) *log << "warning: " << w << '\n';
  }
  return std::move(report.records);
}

// Splits a location's drone records into the three ordered scene groups.
inline std::vector<SceneGroup> scene_groups(const std::vector<ImageRecord>& records) {
  std::map<std::string, std::array<std::vector<ImageRecord>, 3>> by_location;
  for (const auto& r : records) {
    if (r.view != View::drone || !r.scale) continue;
    by_location[r.location_id][static_cast<std::size_t>(scale_index(*r.scale))].push_back(r);
  }
  std::vector<SceneGroup> groups;
  for (auto& [location, per_scale] : by_location) {
    for (std::size_t s = 0; s < 3; ++s) {
      if (per_scale[s].size() != static_cast<std::size_t>(kSceneSize)) continue;
      groups.push_back(SceneGroup{location, kScales[s], std::move(per_scale[s])});
    }
  }
  return groups;
}

// Every image available for one location. Street holds the original image(s)
// followed by any GREM-augmented substitutes.
struct LocationPool {
  std::string location_id;
  std::vector<ImageRecord> streets;
  ImageRecord satellite;
  std::array<SceneGroup, 3> scenes;
};

// Locations lacking a street image, a satellite image or any of the three
// scene groups are dropped.
inline std::vector<LocationPool> group_locations(const std::vector<ImageRecord>& records) {
  std::map<std::string, LocationPool> pools;
  std::map<std::string, bool> has_satellite;
  for (const auto& r : records) {
    auto& pool = pools[r.location_id];
    pool.location_id = r.location_id;
    if (r.view == View::street) {
      pool.streets.push_back(r);
    } else if (r.view == View::satellite && !has_satellite[r.location_id]) {
      pool.satellite = r;
      has_satellite[r.location_id] = true;
    }
  }
  std::map<std::string, int> scene_count;
  for (auto& g : scene_groups(records)) {
    auto& pool = pools[g.location_id];
    const auto idx = static_cast<std::size_t>(scale_index(g.scale));
    pool.scenes[idx] = std::move(g);
    ++scene_count[pool.location_id];
  }
  std::vector<LocationPool> out;
  for (auto& [location, pool] : pools) {
    std::stable_partition(pool.streets.begin(), pool.streets.end(),
                          [](const ImageRecord& r) { return r.source == Source::original; });
    if (pool.streets.empty() || !has_satellite[location] || scene_count[location] != 3) continue;
    out.push_back(std::move(pool));
  }
  return out;
}

// One tuple per location; the street member is drawn from the pool with a
// generator seeded by (seed, draw), so every epoch can see a different
// augmented substitute.
inline std::vector<LocationTuple> draw_tuples(const std::vector<LocationPool>& pools, std::uint64_t seed,
                                              std::uint64_t draw) {
  std::vector<LocationTuple> tuples;
  tuples.reserve(pools.size());
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + draw);
  for (const auto& pool : pools) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.streets.size() - 1);
    LocationTuple t{pool.location_id, pool.streets[pick(rng)], pool.satellite, pool.scenes};
    tuples.push_back(std::move(t));
  }
  return tuples;
}

struct BatchOptions {
  // Keep a trailing partial batch when it still has at least two tuples.
  bool keep_remainder = false;
};

inline std::vector<Batch> make_batches(const std::vector<LocationTuple>& tuples, int batch_size, std::uint64_t seed,
                                       const BatchOptions& options = {}) {
  if (batch_size < 2) throw std::invalid_argument("make_batches: batch_size must be at least 2");
  if (tuples.size() < 2) throw DataError("make_batches: at least two location tuples are required");
  std::set<std::string> seen;
  for (const auto& t : tuples) {
    if (!seen.insert(t.location_id).second) throw DataError("make_batches: duplicate location " + t.location_id);
  }
  std::vector<std::size_t> order(tuples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t n = std::min(bs, order.size() - start);
    if (n < bs && (!options.keep_remainder || n < 2)) break;
    Batch b;
    b.seed = seed;
    for (std::size_t i = 0; i < n; ++i) b.tuples.push_back(tuples[order[start + i]]);
    batches.push_back(std::move(b));
  }
  return batches;
}

// Newline-delimited manifest, tab separated:
// image_id  location_id  view  scale  source  path  height  width
inline constexpr const char* kManifestHeader = "#image_id\tlocation_id\tview\tscale\tsource\tpath\theight\twidth";

inline std::string to_manifest_line(const ImageRecord& r) {
  std::ostringstream os;
  os << r.image_id << '\t' << r.location_id << '\t' << to_string(r.view) << '\t'
     << (r.scale ? to_string(*r.scale) : "-") << '\t' << to_string(r.source) << '\t' << r.path.generic_string()
     << '\t' << r.height_px << '\t' << r.width_px;
  return os.str();
}

inline ImageRecord parse_manifest_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, '\t')) fields.push_back(field);
  if (fields.size() != 8) throw DataError("manifest line has " + std::to_string(fields.size()) + " fields: " + line);
  ImageRecord r;
  r.image_id = fields[0];
  r.location_id = fields[1];
  r.view = parse_view(fields[2]);
  if (fields[3] != "-") r.scale = parse_scale(fields[3]);
  r.source = parse_source(fields[4]);
  r.path = fields[5];
  r.height_px = std::stoi(fields[6]);
  r.width_px = std::stoi(fields[7]);
  validate(r);
  return r;
}

inline void write_manifest(std::ostream& out, const std::vector<ImageRecord>& records, bool header = true) {
  if (header) out << kManifestHeader << '\n';
  for (const auto& r : records) out << to_manifest_line(r) << '\n';
}

inline std::vector<ImageRecord> read_manifest(std::istream& in) {
  std::vector<ImageRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    records.push_back(parse_manifest_line(line));
  }
  return records;
}

inline std::vector<ImageRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  return read_manifest(in);
}

}  // namespace skylink
