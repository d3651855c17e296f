#pragma once

// SGD-with-momentum training of the full objective under a warmup + cosine
// learning-rate schedule, with per-epoch checkpoints and a JSON-lines log.

#include "skylink/augment.hpp"
#include "skylink/config.hpp"
#include "skylink/data_model.hpp"
#include "skylink/image_source.hpp"
#include "skylink/losses.hpp"
#include "skylink/model.hpp"
#include "skylink/params.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace skylink {

enum class SslPositives { independent_draws, identical };

// locations: an epoch draws one tuple per location.
// street_images: an epoch runs one round per street image of the largest
// location pool; round k pairs each location with its (offset + k)-th street
// image, so every street image of a full pool is seen once per epoch.
enum class EpochPass { locations, street_images };

inline EpochPass parse_epoch_pass(const std::string& s) {
  if (s == "locations") return EpochPass::locations;
  if (s == "street_images") return EpochPass::street_images;
  throw std::invalid_argument("unknown epoch pass: " + s + " (locations|street_images)");
}

struct TrainConfig {
  int epochs = 40;
  double lr_max = 5e-4;
  double lr_min = 1e-4;
  double warmup_fraction = 0.10;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 8;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  LossConfig loss;
  SslPositives ssl_positives = SslPositives::independent_draws;
  EpochPass epoch_pass = EpochPass::street_images;
  std::filesystem::path run_dir;  // empty: no checkpoint files
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw std::invalid_argument("train: epochs must be positive");
  if (!(c.lr_min > 0) || !(c.lr_min <= c.lr_max)) throw std::invalid_argument("train: need 0 < lr_min <= lr_max");
  if (!(c.warmup_fraction >= 0) || !(c.warmup_fraction < 1)) {
    throw std::invalid_argument("train: warmup_fraction must lie in [0, 1)");
  }
  if (c.momentum < 0 || c.momentum >= 1) throw std::invalid_argument("train: momentum must lie in [0, 1)");
  if (c.batch_size < 2) throw std::invalid_argument("train: batch_size must be at least 2");
  validate(c.loss);
}

inline TrainConfig train_config_from(const KeyValueConfig& kv, TrainConfig c = {}) {
  c.epochs = static_cast<int>(kv.get_int("train.epochs", c.epochs));
  c.lr_max = kv.get_double("train.lr_max", c.lr_max);
  c.lr_min = kv.get_double("train.lr_min", c.lr_min);
  c.warmup_fraction = kv.get_double("train.warmup_fraction", c.warmup_fraction);
  c.momentum = kv.get_double("train.momentum", c.momentum);
  c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
  c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
  c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long long>(c.seed)));
  if (kv.has("train.augmentations")) c.augment.stages = parse_augmentations(kv.get("train.augmentations", ""));
  c.augment.satellite_rotation_probability =
      kv.get_double("train.satellite_rotation", c.augment.satellite_rotation_probability);
  c.loss.temperature = kv.get_double("loss.temperature", c.loss.temperature);
  c.loss.lambda = kv.get_double("loss.lambda", c.loss.lambda);
  if (kv.has("loss.direction")) c.loss.direction = parse_loss_direction(kv.get("loss.direction", ""));
  if (kv.has("loss.ssl_positives")) {
    const std::string v = kv.get("loss.ssl_positives", "");
    if (v == "independent") {
      c.ssl_positives = SslPositives::independent_draws;
    } else if (v == "identical") {
      c.ssl_positives = SslPositives::identical;
    } else {
      throw ConfigError("loss.ssl_positives must be independent or identical");
    }
  }
  if (kv.has("train.epoch_pass")) c.epoch_pass = parse_epoch_pass(kv.get("train.epoch_pass", ""));
  c.run_dir = kv.get("run.dir", c.run_dir.string());
  return c;
}

// Linear warmup from 0 to lr_max over the first warmup_fraction of steps,
// then cosine decay from lr_max to lr_min, reaching lr_min on the last step.
inline double lr_at(long long step, long long total_steps, const TrainConfig& config) {
  if (total_steps < 1 || step < 0 || step >= total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const auto warmup = static_cast<long long>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return config.lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  const long long span = total_steps - 1 - warmup;
  const double t = span > 0 ? static_cast<double>(step - warmup) / static_cast<double>(span) : 1.0;
  return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + std::cos(std::acos(-1.0) * t));
}

inline long long warmup_steps(long long total_steps, const TrainConfig& config) {
  return static_cast<long long>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));
}

struct TrainingData {
  std::vector<LocationPool> locations;
  std::shared_ptr<const ImageSource> images;
};

struct Checkpoint {
  long long step = 0;  // steps completed
  int epoch = 0;       // epochs completed
  std::string config_fingerprint;
  std::string parameters;  // save_parameters blob
  std::map<std::string, Matrix> velocity;
  nlohmann::json metrics;
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write("SKCK", 4);
  io::write_u64(out, static_cast<std::uint64_t>(ck.step));
  io::write_u64(out, static_cast<std::uint64_t>(ck.epoch));
  io::write_string(out, ck.config_fingerprint);
  io::write_string(out, ck.parameters);
  io::write_u64(out, ck.velocity.size());
  for (const auto& [name, m] : ck.velocity) {
    io::write_string(out, name);
    io::write_matrix(out, m);
  }
  io::write_string(out, ck.metrics.dump());
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "SKCK") throw std::runtime_error("not a checkpoint file");
  Checkpoint ck;
  ck.step = static_cast<long long>(io::read_u64(in));
  ck.epoch = static_cast<int>(io::read_u64(in));
  ck.config_fingerprint = io::read_string(in);
  ck.parameters = io::read_string(in);
  const std::uint64_t n = io::read_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = io::read_string(in);
    ck.velocity[name] = io::read_matrix(in);
  }
  ck.metrics = nlohmann::json::parse(io::read_string(in));
  return ck;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  long long step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossReport loss;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_total;
  std::vector<Checkpoint> checkpoints;
};

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j = to_json(r.loss);
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  return j;
}

// Owns the optimizer state for one model. Not thread-safe: the trainer is the
// single writer of model parameters.
class Trainer {
 public:
  Trainer(SkyLinkModel& model, TrainingData data, TrainConfig config, std::string config_fingerprint = "")
      : model_(model), data_(std::move(data)), config_(std::move(config)), fingerprint_(std::move(config_fingerprint)) {
    validate(config_);
    if (data_.locations.size() < 2) throw TrainingError("train: at least two complete locations are required");
    if (!data_.images) throw TrainingError("train: no image source");
    config_.augment.norm_mean = model_.config().backbone.norm_mean;
    config_.augment.norm_std = model_.config().backbone.norm_std;
  }

  int rounds_per_epoch() const {
    if (config_.epoch_pass == EpochPass::locations) return 1;
    std::size_t most = 1;
    for (const auto& p : data_.locations) most = std::max(most, p.streets.size());
    return static_cast<int>(most);
  }

  long long steps_per_round() const { return static_cast<long long>(data_.locations.size()) / config_.batch_size; }
  long long steps_per_epoch() const { return steps_per_round() * rounds_per_epoch(); }
  long long total_steps() const { return steps_per_epoch() * config_.epochs; }

  Checkpoint snapshot(long long step, int epoch, nlohmann::json metrics) const {
    Checkpoint ck;
    ck.step = step;
    ck.epoch = epoch;
    ck.config_fingerprint = fingerprint_;
    std::ostringstream os;
    save_parameters(os, model_.parameters());
    ck.parameters = os.str();
    ck.velocity = velocity_;
    ck.metrics = std::move(metrics);
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (!fingerprint_.empty() && !ck.config_fingerprint.empty() && ck.config_fingerprint != fingerprint_) {
      throw TrainingError("checkpoint was produced under a different configuration");
    }
    std::istringstream is(ck.parameters);
    load_parameters(is, model_.parameters());
    velocity_ = ck.velocity;
    start_epoch_ = ck.epoch;
  }

  // Trains from the restored epoch (0 by default) through `until_epoch`
  // (all epochs when negative). Step records are appended to `log` as JSON lines.
  TrainResult train(std::ostream* log = nullptr, int until_epoch = -1) {
    const int last = until_epoch < 0 ? config_.epochs : std::min(until_epoch, config_.epochs);
    const long long per_epoch = steps_per_epoch();
    const long long total = total_steps();
    if (per_epoch < 1) throw TrainingError("train: fewer locations than one batch");
    TrainResult result;
    for (int epoch = start_epoch_; epoch < last; ++epoch) {
      long long step = static_cast<long long>(epoch) * per_epoch;
      long long count = 0;
      double sum = 0.0;
      for (int round = 0; round < rounds_per_epoch(); ++round) {
        const auto tuples = draw_round(epoch, round);
        const auto batches =
            make_batches(tuples, config_.batch_size, mix(config_.seed, 0xE90C, static_cast<std::uint64_t>(epoch), round));
        for (const auto& batch : batches) {
          StepRecord rec = train_step(batch, step++, total);
          rec.epoch = epoch;
          sum += rec.loss.l_total;
          ++count;
          if (log) *log << to_json(rec).dump() << '\n';
          result.steps.push_back(std::move(rec));
        }
      }
      const double mean = sum / static_cast<double>(count);
      result.epoch_mean_total.push_back(mean);
      nlohmann::json metrics{{"epoch_mean_l_total", mean}};
      Checkpoint ck = snapshot(static_cast<long long>(epoch + 1) * per_epoch, epoch + 1, metrics);
      if (!config_.run_dir.empty()) save(ck);
      result.checkpoints.push_back(std::move(ck));
      start_epoch_ = epoch + 1;
    }
    return result;
  }

  const TrainConfig& config() const { return config_; }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t h = 0x243F6A8885A308D3ull;
    for (std::uint64_t v : {a, b, c, d}) {
      h ^= v + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
      h = detail::splitmix64(h);
    }
    return h;
  }

  std::vector<LocationTuple> draw_round(int epoch, int round) const {
    if (config_.epoch_pass == EpochPass::locations) {
      return draw_tuples(data_.locations, config_.seed, static_cast<std::uint64_t>(epoch));
    }
    std::vector<LocationTuple> tuples;
    tuples.reserve(data_.locations.size());
    for (std::size_t i = 0; i < data_.locations.size(); ++i) {
      const auto& pool = data_.locations[i];
      const std::size_t n = pool.streets.size();
      const std::size_t offset = mix(config_.seed, 0x0FF5E7, static_cast<std::uint64_t>(epoch), i) % n;
      tuples.push_back({pool.location_id, pool.streets[(offset + static_cast<std::size_t>(round)) % n], pool.satellite,
                        pool.scenes});
    }
    return tuples;
  }

  void save(const Checkpoint& ck) const {
    std::filesystem::create_directories(config_.run_dir);
    const std::string name = "checkpoint_" + (fingerprint_.empty() ? std::string("run") : fingerprint_) + "_epoch" +
                             std::to_string(ck.epoch) + ".bin";
    const auto path = config_.run_dir / name;
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      write_checkpoint(out, ck);
    }
    std::filesystem::rename(tmp, path);
  }

  ad::Var embed_draw(const ImageRecord& rec, View view, std::uint64_t draw_seed) const {
    const Image raw = data_.images->load(rec);
    const int size = model_.config().backbone.input_size;
    std::mt19937_64 draw(draw_seed);
    const Image prepared = augment(resize(raw, size, size), view, draw, config_.augment);
    return model_.embed_prepared(prepared, view);
  }

  StepRecord train_step(const Batch& batch, long long step, long long total) {
    const std::size_t n = batch.tuples.size();
    std::vector<ad::Var> ga, gb, sa, sb;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = batch.tuples[i];
      const auto s = static_cast<std::uint64_t>(step);
      ga.push_back(embed_draw(t.street, View::street, mix(config_.seed, s, i, 0)));
      sa.push_back(embed_draw(t.satellite, View::satellite, mix(config_.seed, s, i, 1)));
      if (config_.ssl_positives == SslPositives::identical) {
        gb.push_back(ga.back());
        sb.push_back(sa.back());
      } else {
        gb.push_back(embed_draw(t.street, View::street, mix(config_.seed, s, i, 2)));
        sb.push_back(embed_draw(t.satellite, View::satellite, mix(config_.seed, s, i, 3)));
      }
    }
    const ad::Var street_a = ad::concat_rows(ga);
    const ad::Var street_b = ad::concat_rows(gb);
    const ad::Var sat_a = ad::concat_rows(sa);
    const ad::Var sat_b = ad::concat_rows(sb);

    DroneEmbeddings drone{};
    DroneViewPairs drone_pairs{};
    if (const SceneBridge* bridge = model_.bridge()) {
      for (std::size_t s = 0; s < 3; ++s) {
        std::vector<ad::Var> rows;
        for (const auto& t : batch.tuples) {
          auto feats = bridge->view_features(t.scenes[s]);
          if (!feats) break;
          rows.push_back(bridge->embed_features(*feats, kScales[s]));
        }
        if (rows.size() != n) continue;
        ad::Var d = ad::concat_rows(rows);
        drone[s] = d;
        // the frozen 3D path has no stochastic input, so both draws coincide
        drone_pairs[s] = ViewPair{d, d};
      }
    }

    const LossTerms cc = cross_view_loss(street_a, sat_a, drone, config_.loss);
    const LossTerms sc = self_supervised_loss({street_a, street_b}, {sat_a, sat_b}, drone_pairs, config_.loss);
    Objective obj = total_objective(cc, sc, config_.loss);
    if (!std::isfinite(obj.report.l_total) || !std::isfinite(obj.report.l_cc) || !std::isfinite(obj.report.l_sc)) {
      std::string ids;
      for (const auto& t : batch.tuples) ids += (ids.empty() ? "" : ",") + t.location_id;
      if (!config_.run_dir.empty()) {
        std::filesystem::create_directories(config_.run_dir);
        std::ofstream dump(config_.run_dir / ("nonfinite_step" + std::to_string(step) + ".json"));
        dump << nlohmann::json{{"step", step}, {"locations", ids}, {"loss", to_json(obj.report)}}.dump(2) << '\n';
      }
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; batch locations: " + ids);
    }

    const ParameterSet& params = model_.parameters();
    params.zero_grad();
    ad::backward(obj.total);
    const double lr = lr_at(step, total, config_);
    for (const auto& e : params.entries()) {
      if (!e.trainable || e.var.grad().size() == 0) continue;
      ad::Var v = e.var;
      Matrix g = e.var.grad();
      if (config_.weight_decay != 0.0) g += config_.weight_decay * e.var.value();
      auto [it, fresh] = velocity_.try_emplace(e.name, Matrix::Zero(g.rows(), g.cols()));
      it->second = config_.momentum * it->second + g;
      v.mutable_value() -= lr * it->second;
    }
    params.zero_grad();

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.loss = obj.report;
    return rec;
  }

  SkyLinkModel& model_;
  TrainingData data_;
  TrainConfig config_;
  std::string fingerprint_;
  std::map<std::string, Matrix> velocity_;
  int start_epoch_ = 0;
};

}  // namespace skylink
