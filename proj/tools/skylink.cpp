// skylink: command-line front end for dataset scanning, GREM preparation,
// training, embedding, evaluation and ablations.

#include "skylink/bridge3d.hpp"
#include "skylink/config.hpp"
#include "skylink/data_model.hpp"
#include "skylink/evaluator.hpp"
#include "skylink/grem.hpp"
#include "skylink/model.hpp"
#include "skylink/params.hpp"
#include "skylink/synthetic.hpp"
#include "skylink/toy.hpp"
#include "skylink/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace skylink;

namespace {

Split parse_split_arg(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query" || s == "test_query") return Split::test_query;
  if (s == "gallery" || s == "test_gallery") return Split::test_gallery;
  throw std::invalid_argument("unknown split: " + s + " (train|query|gallery)");
}

std::vector<ImageRecord> records_from(const std::string& manifest, const std::string& root, Split split,
                                      bool invert_altitude) {
  if (!manifest.empty()) return read_manifest(fs::path(manifest));
  if (root.empty()) throw std::invalid_argument("give either a manifest or a dataset root");
  return scan_dataset(root, split, ScanOptions{invert_altitude});
}

std::shared_ptr<const ReconstructionBackend> backend_from(const KeyValueConfig& kv) {
  const std::string name = kv.get("bridge3d.backend", "stub");
  if (name != "stub") throw ConfigError("bridge3d.backend: only the built-in 'stub' backend is available");
  return std::make_shared<StubReconstructionBackend>(static_cast<std::uint64_t>(kv.get_int("bridge3d.stub_seed", 1)));
}

std::unique_ptr<SkyLinkModel> model_from(const KeyValueConfig& kv, std::shared_ptr<const ImageSource> images) {
  const PipelineConfig pc = pipeline_from_config(kv);
  return std::make_unique<SkyLinkModel>(pc, pc.use_bridge ? backend_from(kv) : nullptr, std::move(images));
}

void warn_unread(const KeyValueConfig& kv) {
  for (const auto& k : kv.unread_keys()) std::cerr << "warning: unused config key " << k << '\n';
}

int cmd_synth(const std::string& out, int locations, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.locations = locations;
  cfg.seed = seed;
  const SyntheticDataset ds = make_synthetic_dataset(cfg);
  write_synthetic_dataset(ds, out);
  std::cout << "wrote " << ds.train.size() << " training, " << ds.queries.size() << " query, " << ds.gallery.size()
            << " gallery and " << ds.grem_pool.size() << " pool images under " << out << '\n';
  return 0;
}

int cmd_scan(const std::string& root, const std::string& split, const std::string& out, bool invert) {
  const ScanReport report = scan_dataset_report(root, parse_split_arg(split), ScanOptions{invert});
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  if (out.empty()) {
    write_manifest(std::cout, report.records);
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    write_manifest(f, report.records);
  }
  std::cerr << report.records.size() << " records\n";
  return 0;
}

int cmd_prepare_grem(const std::string& manifest, const std::string& root, const std::string& pool,
                     const std::string& out, int grid) {
  const auto records = records_from(manifest, root, Split::train, false);
  std::vector<ImageRecord> anchors;
  for (const auto& r : records)
    if (r.view == View::street && r.source == Source::original) anchors.push_back(r);
  std::vector<std::string> warnings;
  const auto candidates = scan_candidate_pool(pool, &warnings);
  FileImageSource images;
  GremResult g = run_grem(anchors, candidates, MeanPoolExtractor(grid), images);
  warnings.insert(warnings.end(), g.warnings.begin(), g.warnings.end());
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  std::vector<ImageRecord> all = records;
  all.insert(all.end(), g.augmented.begin(), g.augmented.end());
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  write_manifest(f, all);
  std::cout << to_json(g.audit).dump() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path) {
  const KeyValueConfig kv = KeyValueConfig::load(config_path);
  TrainConfig tc = train_config_from(kv);
  if (tc.run_dir.empty()) tc.run_dir = "run";
  const auto records = records_from(kv.get("data.manifest", ""), kv.get("data.root", ""), Split::train,
                                    kv.get_bool("data.invert_altitude", false));
  auto images = std::make_shared<FileImageSource>();
  auto model = model_from(kv, images);
  warn_unread(kv);
  const std::string fingerprint = kv.fingerprint();
  Trainer trainer(*model, {group_locations(records), images}, tc, fingerprint);
  fs::create_directories(tc.run_dir);
  std::ofstream log(tc.run_dir / ("train_" + fingerprint + ".jsonl"));
  const auto result = trainer.train(&log);
  {
    std::ofstream w(tc.run_dir / "model.bin", std::ios::binary | std::ios::trunc);
    save_parameters(w, model->parameters());
  }
  for (std::size_t e = 0; e < result.epoch_mean_total.size(); ++e) {
    std::cout << "epoch " << e + 1 << " mean L_total " << result.epoch_mean_total[e] << '\n';
  }
  std::cout << "parameters written to " << (tc.run_dir / "model.bin").string() << '\n';
  return 0;
}

int cmd_embed(const std::string& config_path, const std::string& weights, const std::string& split,
              const std::string& manifest, const std::string& root, const std::string& out, bool no_tta) {
  const KeyValueConfig kv = KeyValueConfig::load(config_path);
  auto images = std::make_shared<FileImageSource>();
  auto model = model_from(kv, images);
  if (!weights.empty()) {
    std::ifstream in(weights, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + weights);
    load_parameters(in, model->parameters());
  }
  const auto records = records_from(manifest, root.empty() ? kv.get("data.root", "") : root, parse_split_arg(split), false);
  std::vector<ImageRecord> wanted;
  for (const auto& r : records)
    if (r.view != View::drone) wanted.push_back(r);
  write_embeddings(fs::path(out), embed_records(*model, wanted, *images, !no_tta));
  std::cout << wanted.size() << " embeddings written to " << out << '\n';
  return 0;
}

int cmd_evaluate(const std::string& query, const std::string& gallery, const std::string& ap_mode,
                 const std::string& out) {
  auto q = read_embeddings(fs::path(query));
  auto g = read_embeddings(fs::path(gallery));
  renormalize(q);
  renormalize(g);
  const MetricsReport m = compute_metrics(rank(q, g), {1, 5, 10}, parse_ap_mode(ap_mode));
  const nlohmann::json record = to_json(m);
  std::cout << "R@1 " << m.recall_at.at(1) << "  R@5 " << m.recall_at.at(5) << "  R@10 " << m.recall_at.at(10)
            << "  AP " << m.ap << "  (" << m.n_queries << " queries, " << m.n_excluded << " excluded)\n";
  if (!out.empty()) {
    std::ofstream f(out);
    f << record.dump(2) << '\n';
  }
  return 0;
}

int cmd_ablate(const std::string& suite_name, bool full, const std::string& config_path, int epochs,
               const std::string& out) {
  const AblationSuite suite = parse_ablation_suite(suite_name);
  std::vector<AblationRow> rows;
  if (full) {
    // Foundation-scale run: needs a config pointing at the dataset and
    // at backbone weights, and many GPU-days of compute in practice.
    if (config_path.empty()) throw std::invalid_argument("--full needs --config with data.root and backbone.weights_path");
    const KeyValueConfig kv = KeyValueConfig::load(config_path);
    PipelineConfig pc = pipeline_from_config(kv, PipelineConfig{BackboneConfig::foundation_large()});
    TrainConfig tc = train_config_from(kv);
    if (epochs > 0) tc.epochs = epochs;
    auto images = std::make_shared<FileImageSource>();
    const std::string root = kv.require("data.root");
    AblationData data;
    data.locations = group_locations(scan_dataset(root, Split::train));
    if (kv.has("data.grem_manifest")) data.grem_locations = group_locations(read_manifest(fs::path(kv.get("data.grem_manifest", ""))));
    data.queries = scan_dataset(root, Split::test_query);
    data.gallery = scan_dataset(root, Split::test_gallery);
    data.images = images;
    data.backend = backend_from(kv);
    rows = run_ablation(suite, pc, tc, data, &std::cerr);
  } else {
    const SyntheticDataset ds = make_synthetic_dataset();
    TrainConfig tc = toy_train_config();
    if (epochs > 0) tc.epochs = epochs;
    rows = run_ablation(suite, PipelineConfig::toy(), tc, toy_ablation_data(ds), &std::cerr);
  }
  const std::string table = format_table(rows);
  std::cout << table;
  if (!out.empty()) {
    nlohmann::json j{{"suite", to_string(suite)}, {"mode", full ? "full" : "toy"}, {"rows", nlohmann::json::array()}};
    for (const auto& r : rows) j["rows"].push_back(to_json(r));
    std::ofstream f(out);
    f << j.dump(2) << '\n';
  }
  for (const auto& r : rows)
    if (!r.ok) return 2;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skylink: cross-view geo-localization pipeline"};
  app.require_subcommand(1);

  std::string out, root, manifest, split = "train", pool, config, weights, query, gallery, ap_mode = "standard", suite;
  int locations = 32, grid = 4, epochs = 0;
  std::uint64_t seed = 2024;
  bool invert = false, no_tta = false, full = false;

  auto* synth = app.add_subcommand("synth", "write the synthetic toy dataset as PPM files");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--locations", locations, "number of locations");
  synth->add_option("--seed", seed, "generator seed");

  auto* scan = app.add_subcommand("scan", "scan a University-1652 style tree into a manifest");
  scan->add_option("--root", root, "dataset root")->required();
  scan->add_option("--split", split, "train|query|gallery");
  scan->add_option("--out", out, "manifest path (stdout when omitted)");
  scan->add_flag("--invert-altitude", invert, "first 18 drone frames are the highest altitude");

  auto* grem = app.add_subcommand("prepare-grem", "select street images from an auxiliary pool");
  grem->add_option("--pool", pool, "candidate pool directory")->required();
  grem->add_option("--out", out, "augmented training manifest")->required();
  grem->add_option("--manifest", manifest, "training manifest");
  grem->add_option("--root", root, "dataset root (scanned when no manifest is given)");
  grem->add_option("--grid", grid, "pooling grid of the stub extractor");

  auto* train = app.add_subcommand("train", "train from a key = value config");
  train->add_option("--config", config, "config file")->required();

  auto* embed = app.add_subcommand("embed", "write an embedding dump for one split");
  embed->add_option("--config", config, "config file")->required();
  embed->add_option("--weights", weights, "parameter file written by train");
  embed->add_option("--split", split, "train|query|gallery")->required();
  embed->add_option("--manifest", manifest, "manifest instead of scanning");
  embed->add_option("--root", root, "dataset root (defaults to data.root)");
  embed->add_option("--out", out, "dump path")->required();
  embed->add_flag("--no-tta", no_tta, "embed the identity view only");

  auto* evaluate = app.add_subcommand("evaluate", "rank query against gallery dumps and report R@K / AP");
  evaluate->add_option("--query", query, "query dump")->required();
  evaluate->add_option("--gallery", gallery, "gallery dump")->required();
  evaluate->add_option("--ap-mode", ap_mode, "standard|first_hit");
  evaluate->add_option("--out", out, "JSON record path");

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid (components|heads|lambda)");
  ablate->add_option("--suite", suite, "components|heads|lambda")->required();
  ablate->add_flag("--full", full,
                   "foundation-scale run on a real dataset; needs --config with data.root and "
                   "backbone.weights_path, external weights and GPU-scale compute");
  ablate->add_option("--config", config, "config for --full");
  ablate->add_option("--epochs", epochs, "override the epoch count");
  ablate->add_option("--out", out, "JSON table path");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(out, locations, seed);
    if (*scan) return cmd_scan(root, split, out, invert);
    if (*grem) return cmd_prepare_grem(manifest, root, pool, out, grid);
    if (*train) return cmd_train(config);
    if (*embed) return cmd_embed(config, weights, split, manifest, root, out, no_tta);
    if (*evaluate) return cmd_evaluate(query, gallery, ap_mode, out);
    if (*ablate) return cmd_ablate(suite, full, config, epochs, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
