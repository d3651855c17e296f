#include "skylink/toy.hpp"
#include "skylink/trainer.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace {

using namespace skylink;
using namespace testing_support;

TrainConfig reference_schedule() { return TrainConfig{}; }

TEST(LrSchedule, EndpointsAndMidpoint) {
  const auto c = reference_schedule();
  const long long total = 1001;  // warmup = floor(100.1) = 100, cosine over steps 100..1000
  EXPECT_EQ(warmup_steps(total, c), 100);
  EXPECT_DOUBLE_EQ(lr_at(0, total, c), 0.0);
  EXPECT_NEAR(lr_at(100, total, c), 5e-4, 1e-9);
  EXPECT_NEAR(lr_at(550, total, c), 3e-4, 1e-9);
  EXPECT_NEAR(lr_at(1000, total, c), 1e-4, 1e-9);
  EXPECT_NEAR(lr_at(50, total, c), 2.5e-4, 1e-15);
}

TEST(LrSchedule, MonotoneRampThenDecay) {
  const auto c = reference_schedule();
  const long long total = 237;
  const long long w = warmup_steps(total, c);
  for (long long s = 1; s < total; ++s) {
    if (s <= w) {
      EXPECT_GT(lr_at(s, total, c), lr_at(s - 1, total, c));
    } else {
      EXPECT_LE(lr_at(s, total, c), lr_at(s - 1, total, c));
    }
  }
  EXPECT_THROW(lr_at(total, total, c), std::out_of_range);
  EXPECT_THROW(lr_at(-1, total, c), std::out_of_range);
  EXPECT_NEAR(lr_at(0, 1, c), 1e-4, 1e-15);  // a single step is both warmup end and last step
}

TEST(TrainConfigValidation, RejectsBadRanges) {
  TrainConfig c;
  c.lr_min = 1e-3;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = {};
  c.warmup_fraction = 1.0;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = {};
  c.batch_size = 1;
  EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(TrainConfigParsing, ReadsFlatKeys) {
  std::istringstream in(
      "train.epochs = 3\ntrain.batch_size=4\nloss.lambda=1.5\nloss.direction=one_way\n"
      "train.augmentations=jpeg:0.2,dropout:0.1\nloss.ssl_positives=identical\ntrain.epoch_pass=locations\n");
  auto kv = KeyValueConfig::parse(in);
  auto c = train_config_from(kv);
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_DOUBLE_EQ(c.loss.lambda, 1.5);
  EXPECT_EQ(c.loss.direction, LossDirection::one_way);
  ASSERT_EQ(c.augment.stages.size(), 2u);
  EXPECT_EQ(c.augment.stages[1].kind, AugmentKind::dropout);
  EXPECT_EQ(c.ssl_positives, SslPositives::identical);
  EXPECT_EQ(c.epoch_pass, EpochPass::locations);
  EXPECT_THROW(parse_augmentations("jpeg:1.5"), std::invalid_argument);
  EXPECT_THROW(parse_augmentations("mosaic:0.1"), std::invalid_argument);
}

Image pattern(int size) {
  Image img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (y < size / 3 ? 0.9 : 0.1) * (x < size / 4 ? 1.0 : 0.5) + 0.02 * c;
  return img;
}

TEST(Augment, ProbabilityZeroIsResizeAndNormalize) {
  auto cfg = AugmentConfig::identity();
  std::mt19937_64 draw(1);
  const Image img = pattern(28);
  EXPECT_EQ(augment(img, View::satellite, draw, cfg).data, normalize(img, 0.5, 0.5).data);
}

TEST(Augment, DeterministicUnderSeed) {
  AugmentConfig cfg;
  for (auto& s : cfg.stages) s.probability = 1.0;
  const Image img = pattern(28);
  std::mt19937_64 a(9), b(9), c(10);
  const auto x = augment(img, View::satellite, a, cfg).data;
  EXPECT_EQ(x, augment(img, View::satellite, b, cfg).data);
  EXPECT_NE(x, augment(img, View::satellite, c, cfg).data);
}

TEST(Augment, StreetViewIsNeverRotated) {
  auto cfg = AugmentConfig::identity();
  cfg.satellite_rotation_probability = 1.0;
  const Image img = pattern(28);
  const auto reference = normalize(img, 0.5, 0.5).data;
  int rotated = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 d1(s), d2(s);
    EXPECT_EQ(augment(img, View::street, d1, cfg).data, reference);
    rotated += augment(img, View::satellite, d2, cfg).data != reference;
  }
  EXPECT_GT(rotated, 0);
}

TEST(Augment, EveryStageKeepsPixelsInRange) {
  const Image img = pattern(28);
  EXPECT_EQ(aug::jpeg_roundtrip(img, 95).height, 28);
  for (const auto& out : {aug::jpeg_roundtrip(img, 30), aug::color_jitter(img, 1.2, 0.8, 1.1), aug::box_blur(img),
                          aug::sharpen(img, 1.0)})
    for (double v : out.data) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  // high-quality JPEG stays close to the input
  double err = 0;
  const auto j = aug::jpeg_roundtrip(img, 95);
  for (std::size_t i = 0; i < img.data.size(); ++i) err = std::max(err, std::abs(j.data[i] - img.data[i]));
  EXPECT_LT(err, 0.1);
}

TEST(CheckpointIo, RoundTripIsBitwise) {
  Checkpoint ck;
  ck.step = 17;
  ck.epoch = 2;
  ck.config_fingerprint = "abc";
  ck.parameters = std::string("\0\x01\xff", 3);
  ck.velocity["w"] = ad::Matrix::Constant(2, 3, 0.1 + 1e-17);
  ck.metrics = {{"epoch_mean_l_total", 1.25}};
  std::stringstream ss;
  write_checkpoint(ss, ck);
  auto back = read_checkpoint(ss);
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.epoch, 2);
  EXPECT_EQ(back.config_fingerprint, "abc");
  EXPECT_EQ(back.parameters, ck.parameters);
  EXPECT_EQ(back.velocity.at("w"), ck.velocity.at("w"));
  EXPECT_EQ(back.metrics, ck.metrics);
  std::stringstream junk("nope");
  EXPECT_THROW(read_checkpoint(junk), std::runtime_error);
}

class TrainerFixture : public ::testing::Test {
 protected:
  SyntheticDataset ds = make_synthetic_dataset(tiny_synthetic(4));
  PipelineConfig pipe = tiny_pipeline();

  TrainConfig small_train() {
    TrainConfig c;
    c.epochs = 2;
    c.batch_size = 2;
    c.seed = 5;
    c.augment.stages = parse_augmentations("jpeg:0.5,dropout:0.3");
    return c;
  }

  std::unique_ptr<SkyLinkModel> model() {
    return std::make_unique<SkyLinkModel>(pipe, std::make_shared<StubReconstructionBackend>(1), ds.images);
  }

  TrainingData data() { return {group_locations(ds.train), ds.images}; }
};

std::vector<double> totals(const TrainResult& r) {
  std::vector<double> out;
  for (const auto& s : r.steps) out.push_back(s.loss.l_total);
  return out;
}

TEST_F(TrainerFixture, StepCountsFollowTheEpochPass) {
  auto m = model();
  Trainer t(*m, data(), small_train());
  EXPECT_EQ(t.rounds_per_epoch(), 2);  // two street renderings per location
  EXPECT_EQ(t.steps_per_epoch(), 4);
  auto c = small_train();
  c.epoch_pass = EpochPass::locations;
  Trainer l(*m, data(), c);
  EXPECT_EQ(l.steps_per_epoch(), 2);
}

TEST_F(TrainerFixture, LogsEveryStepAndCheckpointsEveryEpoch) {
  TempDir dir;
  auto c = small_train();
  c.run_dir = dir.path();
  auto m = model();
  std::ostringstream log;
  Trainer t(*m, data(), c, "fp1");
  auto r = t.train(&log);
  ASSERT_EQ(r.steps.size(), 8u);
  ASSERT_EQ(r.epoch_mean_total.size(), 2u);
  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"], n);
    EXPECT_TRUE(j.contains("l_cc") && j.contains("l_sc") && j.contains("pairs") && j.contains("lr"));
    EXPECT_NEAR(j["l_total"].get<double>(), j["l_cc"].get<double>() + 3.0 * j["l_sc"].get<double>(), 1e-9);
    ++n;
  }
  EXPECT_EQ(n, 8);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "checkpoint_fp1_epoch1.bin"));
  auto ck = read_checkpoint(dir.path() / "checkpoint_fp1_epoch2.bin");
  EXPECT_EQ(ck.step, 8);
  EXPECT_EQ(ck.config_fingerprint, "fp1");
  EXPECT_DOUBLE_EQ(ck.metrics["epoch_mean_l_total"].get<double>(), r.epoch_mean_total[1]);
}

TEST_F(TrainerFixture, SameSeedSameLog) {
  auto m1 = model();
  auto m2 = model();
  auto a = Trainer(*m1, data(), small_train()).train();
  auto b = Trainer(*m2, data(), small_train()).train();
  EXPECT_EQ(totals(a), totals(b));
}

TEST_F(TrainerFixture, ResumeReproducesTheUninterruptedTrajectory) {
  auto m1 = model();
  auto full = Trainer(*m1, data(), small_train()).train();

  auto m2 = model();
  Trainer first(*m2, data(), small_train());
  auto head = first.train(nullptr, 1);
  std::stringstream ss;
  write_checkpoint(ss, head.checkpoints.back());

  auto m3 = model();
  Trainer resumed(*m3, data(), small_train());
  resumed.restore(read_checkpoint(ss));
  auto tail = resumed.train();
  ASSERT_EQ(tail.steps.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(tail.steps[i].step, full.steps[4 + i].step);
    EXPECT_EQ(tail.steps[i].loss.l_total, full.steps[4 + i].loss.l_total);
  }
  for (std::size_t i = 0; i < m1->parameters().size(); ++i) {
    EXPECT_EQ(m1->parameters().entries()[i].var.value(), m3->parameters().entries()[i].var.value());
  }
}

TEST_F(TrainerFixture, FingerprintMismatchRefusesToResume) {
  auto m = model();
  Trainer a(*m, data(), small_train(), "aaa");
  Trainer b(*m, data(), small_train(), "bbb");
  EXPECT_THROW(b.restore(a.snapshot(0, 0, {})), TrainingError);
}

TEST_F(TrainerFixture, ZeroLambdaTotalEqualsCrossViewTerm) {
  auto c = small_train();
  c.epochs = 1;
  c.loss.lambda = 0.0;
  auto m = model();
  auto r = Trainer(*m, data(), c).train();
  for (const auto& s : r.steps) {
    EXPECT_EQ(s.loss.l_total, s.loss.l_cc);
    EXPECT_GT(s.loss.l_sc, 0.0);
  }
}

TEST_F(TrainerFixture, FrozenParametersAreBitwiseUnchanged) {
  pipe.backbone.trainable = TrainableBlocks::frozen;
  auto m = model();
  std::vector<ad::Matrix> before;
  for (const auto& e : m->parameters().entries()) before.push_back(e.var.value());
  std::vector<ad::Matrix> encoder_before;
  for (const auto& e : m->bridge()->encoder().network().parameters().entries()) encoder_before.push_back(e.var.value());
  auto c = small_train();
  c.epochs = 1;
  Trainer(*m, data(), c).train();
  int changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& e = m->parameters().entries()[i];
    if (!e.trainable) {
      EXPECT_EQ(e.var.value(), before[i]) << e.name;
    } else {
      changed += e.var.value() != before[i];
    }
  }
  EXPECT_GT(changed, 0);
  std::size_t k = 0;
  for (const auto& e : m->bridge()->encoder().network().parameters().entries()) EXPECT_EQ(e.var.value(), encoder_before[k++]);
}

TEST_F(TrainerFixture, NonFiniteLossAbortsWithBatchIdsAndDump) {
  TempDir dir;
  auto c = small_train();
  c.loss.temperature = 1e-320;  // logits overflow to infinity
  c.run_dir = dir.path();
  auto m = model();
  Trainer t(*m, data(), c);
  try {
    t.train();
    FAIL() << "expected a TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("L00"), std::string::npos);
  }
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "nonfinite_step0.json"));
}

TEST_F(TrainerFixture, RejectsTooFewLocations) {
  auto m = model();
  auto d = data();
  d.locations.resize(1);
  EXPECT_THROW(Trainer(*m, d, small_train()), TrainingError);
}

}  // namespace
