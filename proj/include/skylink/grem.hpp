#pragma once

// Retrieval-based street-view augmentation: every original street image
// pulls the more similar half of a candidate pool (by cosine similarity of
// frozen global features) into training under its own location label.

#include "skylink/data_model.hpp"
#include "skylink/image.hpp"
#include "skylink/image_source.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

enum class CandidatePool { original_street, auxiliary };

struct CandidateFeature {
  std::string image_id;
  Eigen::VectorXd feature;  // unit L2 norm
  CandidatePool pool = CandidatePool::auxiliary;
};

struct GremAssignment {
  std::string anchor_image_id;
  std::vector<std::pair<std::string, double>> selected;  // score descending
  std::string inherit_location;
};

// Global image descriptor from a frozen, deterministic network.
class FrozenExtractor {
 public:
  virtual ~FrozenExtractor() = default;
  virtual Eigen::VectorXd extract(const Image& image) const = 0;
};

// Per-channel means over a grid x grid partition of the raw pixels,
// ordered (cell_y, cell_x, channel). Used where no pretrained CNN is wired in.
class MeanPoolExtractor final : public FrozenExtractor {
 public:
  explicit MeanPoolExtractor(int grid = 4) : grid_(grid) {
    if (grid < 1) throw std::invalid_argument("MeanPoolExtractor: grid must be positive");
  }

  Eigen::VectorXd extract(const Image& image) const override {
    if (image.height < grid_ || image.width < grid_) throw ImageError("image smaller than the pooling grid");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(grid_ * grid_ * 3);
    for (int gy = 0; gy < grid_; ++gy) {
      const int y0 = gy * image.height / grid_;
      const int y1 = (gy + 1) * image.height / grid_;
      for (int gx = 0; gx < grid_; ++gx) {
        const int x0 = gx * image.width / grid_;
        const int x1 = (gx + 1) * image.width / grid_;
        for (int c = 0; c < 3; ++c) {
          double s = 0;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) s += image.at(y, x, c);
          out((gy * grid_ + gx) * 3 + c) = s / ((y1 - y0) * (x1 - x0));
        }
      }
    }
    return out;
  }

 private:
  int grid_;
};

struct ExtractionReport {
  std::vector<CandidateFeature> features;
  std::vector<std::string> warnings;
};

// Records whose image cannot be loaded, or whose descriptor is zero, are
// skipped with a warning.
inline ExtractionReport extract_pool_features(const std::vector<ImageRecord>& records, const FrozenExtractor& extractor,
                                              const ImageSource& images, CandidatePool pool = CandidatePool::auxiliary) {
  ExtractionReport report;
  for (const auto& rec : records) {
    try {
      Eigen::VectorXd f = extractor.extract(images.load(rec));
      const double norm = f.norm();
      if (!(norm > 0) || !std::isfinite(norm)) {
        report.warnings.push_back("zero descriptor, skipped: " + rec.image_id);
        continue;
      }
      report.features.push_back({rec.image_id, f / norm, pool});
    } catch (const std::exception& e) {
      report.warnings.push_back("unreadable image skipped: " + rec.image_id + " (" + e.what() + ")");
    }
  }
  return report;
}

// Top floor(|pool| / 2) candidates by cosine similarity; equal scores are
// ordered by ascending image_id.
inline GremAssignment select_top_half(const CandidateFeature& anchor, const std::vector<CandidateFeature>& pool,
                                      const std::string& anchor_location) {
  GremAssignment out;
  out.anchor_image_id = anchor.image_id;
  out.inherit_location = anchor_location;
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(pool.size());
  for (const auto& c : pool) {
    if (c.image_id == anchor.image_id) throw std::invalid_argument("select_top_half: anchor is part of its own pool");
    if (c.feature.size() != anchor.feature.size()) throw std::invalid_argument("select_top_half: feature width mismatch");
    scored.emplace_back(c.image_id, anchor.feature.dot(c.feature));
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  scored.resize(pool.size() / 2);
  out.selected = std::move(scored);
  return out;
}

struct GremAudit {
  std::size_t anchors = 0;
  std::size_t raw_selected = 0;      // one per (anchor, candidate)
  std::size_t unique_selected = 0;   // distinct candidate images
};

inline nlohmann::json to_json(const GremAudit& a) {
  return {{"anchors", a.anchors}, {"raw_selected", a.raw_selected}, {"unique_selected", a.unique_selected}};
}

struct GremResult {
  std::vector<GremAssignment> assignments;
  std::vector<ImageRecord> augmented;  // one street record per (anchor, candidate)
  GremAudit audit;
  std::vector<std::string> warnings;
};

// `anchors` are original street records. Candidates whose location_id matches
// an anchor's location form that anchor's pool; when no candidate shares the
// anchor's location, the whole candidate set is the pool.
inline GremResult run_grem(const std::vector<ImageRecord>& anchors, const std::vector<ImageRecord>& candidates,
                           const FrozenExtractor& extractor, const ImageSource& images) {
  GremResult result;
  auto anchor_feats = extract_pool_features(anchors, extractor, images, CandidatePool::original_street);
  auto cand_feats = extract_pool_features(candidates, extractor, images, CandidatePool::auxiliary);
  result.warnings = anchor_feats.warnings;
  result.warnings.insert(result.warnings.end(), cand_feats.warnings.begin(), cand_feats.warnings.end());

  std::map<std::string, const ImageRecord*> cand_by_id;
  std::map<std::string, std::vector<CandidateFeature>> pool_by_location;
  for (const auto& c : candidates) cand_by_id[c.image_id] = &c;
  for (const auto& f : cand_feats.features) pool_by_location[cand_by_id.at(f.image_id)->location_id].push_back(f);

  std::map<std::string, const ImageRecord*> anchor_by_id;
  for (const auto& a : anchors) anchor_by_id[a.image_id] = &a;

  std::set<std::string> unique;
  for (const auto& af : anchor_feats.features) {
    const ImageRecord& anchor = *anchor_by_id.at(af.image_id);
    auto it = pool_by_location.find(anchor.location_id);
    const std::vector<CandidateFeature>& pool = it != pool_by_location.end() ? it->second : cand_feats.features;
    if (pool.empty()) continue;
    GremAssignment asg = select_top_half(af, pool, anchor.location_id);
    for (const auto& [cid, score] : asg.selected) {
      ImageRecord rec = *cand_by_id.at(cid);
      rec.location_id = anchor.location_id;
      rec.view = View::street;
      rec.scale.reset();
      rec.source = Source::grem_augmented;
      result.augmented.push_back(std::move(rec));
      unique.insert(cid);
    }
    result.audit.raw_selected += asg.selected.size();
    result.assignments.push_back(std::move(asg));
  }
  result.audit.anchors = result.assignments.size();
  result.audit.unique_selected = unique.size();
  return result;
}

// Scans an auxiliary pool directory: either <pool>/<location>/<image> or a
// flat <pool>/<image> (location "*", meaning unscoped).
inline std::vector<ImageRecord> scan_candidate_pool(const std::filesystem::path& pool_dir,
                                                    std::vector<std::string>* warnings = nullptr) {
  if (!std::filesystem::is_directory(pool_dir)) throw DataError("candidate pool does not exist: " + pool_dir.string());
  std::vector<ImageRecord> out;
  auto add = [&](const std::filesystem::path& file, const std::string& location) {
    auto size = probe_image_size(file);
    if (!size) {
      if (warnings) warnings->push_back("unreadable image skipped: " + file.string());
      return;
    }
    ImageRecord r;
    r.image_id = "pool/" + std::filesystem::relative(file, pool_dir).generic_string();
    r.location_id = location;
    r.view = View::street;
    r.source = Source::grem_augmented;
    r.path = file;
    r.height_px = size->height;
    r.width_px = size->width;
    out.push_back(std::move(r));
  };
  for (const auto& entry : detail::sorted_entries(pool_dir, true)) {
    for (const auto& file : detail::sorted_entries(entry, false)) add(file, entry.filename().string());
  }
  for (const auto& file : detail::sorted_entries(pool_dir, false)) add(file, "*");
  return out;
}

}  // namespace skylink
