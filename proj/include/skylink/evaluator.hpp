#pragma once

// Street -> satellite retrieval evaluation: TTA embedding, exhaustive cosine
// ranking, Recall@K / AP, embedding dumps and the ablation harness.

#include "skylink/aggregation.hpp"
#include "skylink/data_model.hpp"
#include "skylink/image.hpp"
#include "skylink/image_source.hpp"
#include "skylink/model.hpp"
#include "skylink/params.hpp"
#include "skylink/trainer.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace skylink {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TtaTransform { identity, hflip, rot90, rot180, rot270 };

inline std::string to_string(TtaTransform t) {
  switch (t) {
    case TtaTransform::identity: return "identity";
    case TtaTransform::hflip: return "hflip";
    case TtaTransform::rot90: return "rot90";
    case TtaTransform::rot180: return "rot180";
    case TtaTransform::rot270: return "rot270";
  }
  return "?";
}

inline Image apply(TtaTransform t, const Image& img) {
  switch (t) {
    case TtaTransform::identity: return img;
    case TtaTransform::hflip: return hflip(img);
    case TtaTransform::rot90: return rot90(img, 1);
    case TtaTransform::rot180: return rot90(img, 2);
    case TtaTransform::rot270: return rot90(img, 3);
  }
  return img;
}

// Rotations only for the satellite view, mirroring the training augmentation.
inline std::vector<TtaTransform> default_tta(View view) {
  if (view == View::satellite) {
    return {TtaTransform::identity, TtaTransform::hflip, TtaTransform::rot90, TtaTransform::rot180,
            TtaTransform::rot270};
  }
  return {TtaTransform::identity, TtaTransform::hflip};
}

// Transforms act on the raw image before resizing. A single transform yields
// its embedding unchanged; otherwise the variants are summed in set order and
// L2-normalized (the mean and the sum normalize identically).
inline Embedding embed_with_tta(const Image& raw, const SkyLinkModel& model, View view,
                                const std::vector<TtaTransform>& tta) {
  if (tta.empty()) throw EvaluationError("embed_with_tta: empty TTA set");
  const EmbeddingView ev = view == View::street ? EmbeddingView::street : EmbeddingView::satellite;
  if (tta.size() == 1) {
    Embedding e = model.embed(apply(tta.front(), raw), view);
    e.tta = true;
    return e;
  }
  Eigen::RowVectorXd sum;
  for (const auto t : tta) {
    const Eigen::RowVectorXd v = model.embed(apply(t, raw), view).vector;
    if (sum.size() == 0) {
      sum = v;
    } else {
      sum += v;
    }
  }
  const double norm = sum.norm();
  if (!(norm > 1e-12)) throw ad::DegenerateEmbedding("embed_with_tta: variants cancel out");
  Embedding e;
  e.vector = sum / norm;
  e.normalized = true;
  e.view = ev;
  e.tta = true;
  return e;
}

struct IndexedEmbedding {
  std::string id;
  std::string location_id;
  Eigen::RowVectorXd vector;
};

struct RetrievalResult {
  std::string query_id;
  std::vector<std::pair<std::string, double>> ranked;  // score descending, id ascending on ties
  std::set<std::string> true_ids;
};

namespace detail {
inline void require_unit(const IndexedEmbedding& e, const char* what) {
  if (std::abs(e.vector.norm() - 1.0) > 1e-6) throw EvaluationError(std::string(what) + " " + e.id + " is not unit-norm");
}
}  // namespace detail

// True ids of a query are the gallery items sharing its location_id.
inline std::vector<RetrievalResult> rank(const std::vector<IndexedEmbedding>& queries,
                                         const std::vector<IndexedEmbedding>& gallery) {
  if (gallery.empty()) throw EvaluationError("rank: empty gallery");
  const auto dim = gallery.front().vector.size();
  for (const auto& g : gallery) {
    detail::require_unit(g, "gallery item");
    if (g.vector.size() != dim) throw EvaluationError("rank: gallery dimensions disagree");
  }
  std::vector<RetrievalResult> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    detail::require_unit(q, "query");
    if (q.vector.size() != dim) throw EvaluationError("rank: query dimension differs from gallery");
    RetrievalResult r;
    r.query_id = q.id;
    r.ranked.reserve(gallery.size());
    for (const auto& g : gallery) {
      r.ranked.emplace_back(g.id, q.vector.dot(g.vector));
      if (g.location_id == q.location_id) r.true_ids.insert(g.id);
    }
    std::sort(r.ranked.begin(), r.ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    out.push_back(std::move(r));
  }
  return out;
}

enum class ApMode { standard, first_hit };

inline ApMode parse_ap_mode(const std::string& s) {
  if (s == "standard") return ApMode::standard;
  if (s == "first_hit") return ApMode::first_hit;
  throw std::invalid_argument("unknown AP mode: " + s + " (standard|first_hit)");
}

struct MetricsReport {
  std::map<int, double> recall_at;  // percent
  double ap = 0.0;                  // percent
  int n_queries = 0;                // queries that entered the averages
  int n_excluded = 0;               // queries without any true id in the gallery
};

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json r = nlohmann::json::object();
  for (const auto& [k, v] : m.recall_at) r["R@" + std::to_string(k)] = v;
  return {{"recall_at", r}, {"ap", m.ap}, {"n_queries", m.n_queries}, {"n_excluded", m.n_excluded}};
}

inline MetricsReport compute_metrics(const std::vector<RetrievalResult>& results, const std::vector<int>& ks = {1, 5, 10},
                                     ApMode mode = ApMode::standard) {
  MetricsReport m;
  std::map<int, long long> hits;
  for (int k : ks) {
    if (k < 1) throw EvaluationError("compute_metrics: K must be positive");
    hits[k] = 0;
  }
  double ap_sum = 0.0;
  for (const auto& r : results) {
    std::size_t relevant = 0;
    for (const auto& [id, score] : r.ranked) relevant += r.true_ids.count(id);
    if (relevant == 0) {
      ++m.n_excluded;
      continue;
    }
    ++m.n_queries;
    std::size_t first = 0;  // 1-based rank of the first hit
    std::size_t found = 0;
    double precision_sum = 0.0;
    for (std::size_t i = 0; i < r.ranked.size(); ++i) {
      if (!r.true_ids.count(r.ranked[i].first)) continue;
      ++found;
      if (first == 0) first = i + 1;
      precision_sum += static_cast<double>(found) / static_cast<double>(i + 1);
    }
    for (auto& [k, h] : hits) h += first <= static_cast<std::size_t>(k) ? 1 : 0;
    ap_sum += mode == ApMode::standard ? precision_sum / static_cast<double>(relevant) : 1.0 / static_cast<double>(first);
  }
  for (const auto& [k, h] : hits) {
    m.recall_at[k] = m.n_queries ? 100.0 * static_cast<double>(h) / m.n_queries : 0.0;
  }
  m.ap = m.n_queries ? 100.0 * ap_sum / m.n_queries : 0.0;
  return m;
}

// Binary dump: u64 count, u64 D, then count (image_id, location_id) string
// pairs, then count * D little-endian f32 values, row-major.
inline void write_embeddings(std::ostream& out, const std::vector<IndexedEmbedding>& items) {
  const std::uint64_t d = items.empty() ? 0 : static_cast<std::uint64_t>(items.front().vector.size());
  io::write_u64(out, items.size());
  io::write_u64(out, d);
  for (const auto& e : items) {
    if (static_cast<std::uint64_t>(e.vector.size()) != d) throw EvaluationError("write_embeddings: ragged dimensions");
    io::write_string(out, e.id);
    io::write_string(out, e.location_id);
  }
  for (const auto& e : items)
    for (Eigen::Index j = 0; j < e.vector.size(); ++j) io::write_f32(out, static_cast<float>(e.vector(j)));
  if (!out) throw EvaluationError("write_embeddings: write failed");
}

inline std::vector<IndexedEmbedding> read_embeddings(std::istream& in) {
  const std::uint64_t n = io::read_u64(in);
  const std::uint64_t d = io::read_u64(in);
  if (n > (1ull << 32) || d > (1ull << 24)) throw EvaluationError("read_embeddings: implausible header");
  std::vector<IndexedEmbedding> items(n);
  for (auto& e : items) {
    e.id = io::read_string(in);
    e.location_id = io::read_string(in);
  }
  for (auto& e : items) {
    e.vector.resize(static_cast<Eigen::Index>(d));
    for (std::uint64_t j = 0; j < d; ++j) e.vector(static_cast<Eigen::Index>(j)) = io::read_f32(in);
  }
  return items;
}

inline void write_embeddings(const std::filesystem::path& path, const std::vector<IndexedEmbedding>& items) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  write_embeddings(out, items);
}

inline std::vector<IndexedEmbedding> read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EvaluationError("cannot open " + path.string());
  return read_embeddings(in);
}

// f32 storage loses the exact unit norm; dumps are renormalized on load.
inline void renormalize(std::vector<IndexedEmbedding>& items) {
  for (auto& e : items) {
    const double n = e.vector.norm();
    if (!(n > 1e-12)) throw ad::DegenerateEmbedding("embedding " + e.id + " has zero norm");
    e.vector /= n;
  }
}

inline std::vector<IndexedEmbedding> embed_records(const SkyLinkModel& model, const std::vector<ImageRecord>& records,
                                                   const ImageSource& images, bool use_tta = true) {
  std::vector<IndexedEmbedding> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    const Image raw = images.load(rec);
    const auto tta = use_tta ? default_tta(rec.view) : std::vector<TtaTransform>{TtaTransform::identity};
    out.push_back({rec.image_id, rec.location_id, embed_with_tta(raw, model, rec.view, tta).vector});
  }
  return out;
}

inline MetricsReport evaluate_model(const SkyLinkModel& model, const std::vector<ImageRecord>& queries,
                                    const std::vector<ImageRecord>& gallery, const ImageSource& images,
                                    ApMode mode = ApMode::standard, bool use_tta = true) {
  return compute_metrics(rank(embed_records(model, queries, images, use_tta), embed_records(model, gallery, images, use_tta)),
                         {1, 5, 10}, mode);
}

// ---- ablation harness ----

enum class AblationSuite { components, heads, lambda };

inline AblationSuite parse_ablation_suite(const std::string& s) {
  if (s == "components") return AblationSuite::components;
  if (s == "heads") return AblationSuite::heads;
  if (s == "lambda") return AblationSuite::lambda;
  throw std::invalid_argument("unknown ablation suite: " + s + " (components|heads|lambda)");
}

inline std::string to_string(AblationSuite s) {
  switch (s) {
    case AblationSuite::components: return "components";
    case AblationSuite::heads: return "heads";
    case AblationSuite::lambda: return "lambda";
  }
  return "?";
}

struct AblationVariant {
  std::string label;
  PipelineConfig pipeline;
  TrainConfig train;
  bool use_grem = false;
};

struct AblationRow {
  std::string label;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
  double seconds = 0.0;
};

struct AblationData {
  std::vector<LocationPool> locations;       // original street images only
  std::vector<LocationPool> grem_locations;  // with retrieved street images; empty when no pool was prepared
  std::vector<ImageRecord> queries;          // street
  std::vector<ImageRecord> gallery;          // satellite
  std::shared_ptr<const ImageSource> images;
  std::shared_ptr<const ReconstructionBackend> backend;
};

// SSL off means lambda = 0; the multi-scale bridge is the 3D drone path.
inline std::vector<AblationVariant> ablation_grid(AblationSuite suite, const PipelineConfig& pipeline,
                                                  const TrainConfig& train) {
  std::vector<AblationVariant> grid;
  auto variant = [&](std::string label) {
    AblationVariant v{std::move(label), pipeline, train, false};
    v.pipeline.head = HeadKind::pafa;
    return v;
  };
  switch (suite) {
    case AblationSuite::components: {
      const double lambda = train.loss.lambda;
      for (const auto& [label, ssl, bridge, grem] :
           std::vector<std::tuple<std::string, bool, bool, bool>>{{"PAFA", false, false, false},
                                                                   {"PAFA+SSL", true, false, false},
                                                                   {"PAFA+MSBM", false, true, false},
                                                                   {"PAFA+SSL+MSBM", true, true, false},
                                                                   {"PAFA+SSL+MSBM+GREM", true, true, true}}) {
        AblationVariant v = variant(label);
        v.train.loss.lambda = ssl ? lambda : 0.0;
        v.pipeline.use_bridge = bridge;
        v.use_grem = grem;
        grid.push_back(std::move(v));
      }
      break;
    }
    case AblationSuite::heads:
      for (const auto kind : {HeadKind::netvlad, HeadKind::gem, HeadKind::conv_ap, HeadKind::pafa}) {
        AblationVariant v = variant(to_string(kind));
        v.pipeline.head = kind;
        grid.push_back(std::move(v));
      }
      break;
    case AblationSuite::lambda:
      for (const double lambda : {1.0, 2.0, 3.0, 4.0, 5.0}) {
        std::ostringstream label;
        label << "lambda=" << lambda;
        AblationVariant v = variant(label.str());
        v.train.loss.lambda = lambda;
        grid.push_back(std::move(v));
      }
      break;
  }
  return grid;
}

inline AblationRow run_variant(const AblationVariant& v, const AblationData& data, ApMode mode = ApMode::standard) {
  AblationRow row;
  row.label = v.label;
  const auto start = std::chrono::steady_clock::now();
  try {
    if (v.use_grem && data.grem_locations.empty()) throw TrainingError("no GREM-augmented locations prepared");
    SkyLinkModel model(v.pipeline, v.pipeline.use_bridge ? data.backend : nullptr,
                       v.pipeline.use_bridge ? data.images : nullptr);
    Trainer trainer(model, {v.use_grem ? data.grem_locations : data.locations, data.images}, v.train);
    trainer.train();
    row.metrics = evaluate_model(model, data.queries, data.gallery, *data.images, mode);
    row.ok = true;
  } catch (const std::exception& e) {
    row.ok = false;
    row.error = e.what();
  }
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

// A failing configuration does not stop the suite; its row carries the error.
inline std::vector<AblationRow> run_ablation(AblationSuite suite, const PipelineConfig& pipeline, const TrainConfig& train,
                                             const AblationData& data, std::ostream* progress = nullptr,
                                             ApMode mode = ApMode::standard) {
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_grid(suite, pipeline, train)) {
    rows.push_back(run_variant(v, data, mode));
    if (progress) {
      const auto& r = rows.back();
      *progress << "[" << to_string(suite) << "] " << r.label << ": "
                << (r.ok ? "ok" : "FAILED (" + r.error + ")") << " in " << r.seconds << " s" << std::endl;
    }
  }
  return rows;
}

inline nlohmann::json to_json(const AblationRow& r) {
  nlohmann::json j{{"label", r.label}, {"status", r.ok ? "ok" : "failed"}, {"seconds", r.seconds}};
  if (r.ok) {
    j["metrics"] = to_json(r.metrics);
  } else {
    j["error"] = r.error;
  }
  return j;
}

inline std::string format_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| configuration | R@1 | R@5 | R@10 | AP | status |\n|---|---|---|---|---|---|\n";
  os.setf(std::ios::fixed);
  os.precision(2);
  for (const auto& r : rows) {
    os << "| " << r.label << " | ";
    if (r.ok) {
      os << r.metrics.recall_at.at(1) << " | " << r.metrics.recall_at.at(5) << " | " << r.metrics.recall_at.at(10)
         << " | " << r.metrics.ap << " | ok |\n";
    } else {
      os << "- | - | - | - | failed: " << r.error << " |\n";
    }
  }
  return os.str();
}

}  // namespace skylink
