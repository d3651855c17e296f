#include "skylink/evaluator.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

namespace {

using namespace skylink;
using namespace testing_support;

PipelineConfig flat_pipeline() {
  auto c = tiny_pipeline();
  c.use_bridge = false;
  return c;
}

Image noise_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Image img(h, w);
  for (double& v : img.data) v = u(rng);
  return img;
}

TEST(Tta, SingletonIsThePlainEmbedding) {
  SkyLinkModel m(flat_pipeline());
  const Image img = noise_image(40, 40, 1);
  EXPECT_EQ(embed_with_tta(img, m, View::street, {TtaTransform::identity}).vector, m.embed(img, View::street).vector);
  EXPECT_EQ(embed_with_tta(img, m, View::street, {TtaTransform::hflip}).vector,
            m.embed(hflip(img), View::street).vector);
}

TEST(Tta, SumOfVariantsThenNormalize) {
  SkyLinkModel m(flat_pipeline());
  const Image img = noise_image(30, 30, 2);
  const auto set = default_tta(View::satellite);
  ASSERT_EQ(set.size(), 5u);
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(m.embedding_dim());
  for (auto t : set) sum += m.embed(apply(t, img), View::satellite).vector;
  const auto e = embed_with_tta(img, m, View::satellite, set);
  EXPECT_TRUE(e.vector.isApprox(sum.normalized(), 1e-12));
  EXPECT_NEAR(e.vector.norm(), 1.0, 1e-12);
  EXPECT_TRUE(e.tta);
}

TEST(Tta, FlipSetIsInvariantToAFlippedInputBitwise) {
  SkyLinkModel m(flat_pipeline());
  const Image img = noise_image(28, 35, 3);
  const auto set = default_tta(View::street);
  EXPECT_EQ(embed_with_tta(img, m, View::street, set).vector, embed_with_tta(hflip(img), m, View::street, set).vector);
  const std::vector<TtaTransform> rotations{TtaTransform::identity, TtaTransform::rot90, TtaTransform::rot180,
                                            TtaTransform::rot270};
  const Image square = noise_image(28, 28, 4);
  // rotation orbit: same variants summed in a different order, so equal up to rounding
  EXPECT_TRUE(embed_with_tta(square, m, View::satellite, rotations)
                  .vector.isApprox(embed_with_tta(rot90(square, 1), m, View::satellite, rotations).vector, 1e-12));
}

TEST(Tta, EmptySetThrows) {
  SkyLinkModel m(flat_pipeline());
  EXPECT_THROW(embed_with_tta(noise_image(28, 28, 5), m, View::street, {}), EvaluationError);
}

IndexedEmbedding item(std::string id, std::string loc, Eigen::RowVectorXd v) { return {std::move(id), std::move(loc), std::move(v)}; }

Eigen::RowVectorXd unit(int d, int axis) {
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(d);
  v(axis) = 1;
  return v;
}

TEST(Rank, SelfMatchComesFirst) {
  std::mt19937_64 rng(1);
  const auto m = oracle::random_unit_rows(6, 5, rng);
  std::vector<IndexedEmbedding> g;
  for (int i = 0; i < 6; ++i) g.push_back(item("g" + std::to_string(i), "L" + std::to_string(i), m.row(i)));
  const auto r = rank(g, g);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(r[i].ranked.front().first, g[i].id);
    EXPECT_EQ(r[i].true_ids, std::set<std::string>{g[i].id});
  }
}

TEST(Rank, TiesAreBrokenByIdAscending) {
  std::vector<IndexedEmbedding> g{item("c", "A", unit(3, 1)), item("a", "B", unit(3, 2)), item("b", "C", unit(3, 1))};
  const auto r = rank({item("q", "A", unit(3, 0))}, g);
  ASSERT_EQ(r[0].ranked.size(), 3u);
  EXPECT_EQ(r[0].ranked[0].first, "a");
  EXPECT_EQ(r[0].ranked[1].first, "b");
  EXPECT_EQ(r[0].ranked[2].first, "c");
}

TEST(Rank, RandomInstancesMatchBruteForce) {
  std::mt19937_64 rng(2);
  const auto qm = oracle::random_unit_rows(20, 6, rng);
  auto gm = oracle::random_unit_rows(50, 6, rng);
  gm.row(7) = gm.row(3);  // an exact tie
  std::vector<IndexedEmbedding> q, g;
  std::vector<oracle::Item> og;
  for (int i = 0; i < 50; ++i) {
    g.push_back(item("g" + std::to_string(100 - i), "L" + std::to_string(i % 10), gm.row(i)));
    og.push_back({g.back().id, g.back().location_id, oracle::Vec(gm.row(i).data(), gm.row(i).data() + 6)});
  }
  for (int i = 0; i < 20; ++i) q.push_back(item("q" + std::to_string(i), "L" + std::to_string(i % 10), qm.row(i)));
  const auto r = rank(q, g);
  for (int i = 0; i < 20; ++i) {
    const oracle::Item oq{q[i].id, q[i].location_id, oracle::Vec(qm.row(i).data(), qm.row(i).data() + 6)};
    const auto want = oracle::brute_rank(oq, og);
    std::vector<std::string> got;
    for (const auto& [id, s] : r[i].ranked) got.push_back(id);
    EXPECT_EQ(got, want);
    EXPECT_EQ(r[i].true_ids.size(), 5u);
  }
}

TEST(Rank, Errors) {
  EXPECT_THROW(rank({item("q", "A", unit(3, 0))}, {}), EvaluationError);
  EXPECT_THROW(rank({item("q", "A", 2 * unit(3, 0))}, {item("g", "A", unit(3, 0))}), EvaluationError);
  EXPECT_THROW(rank({item("q", "A", unit(4, 0))}, {item("g", "A", unit(3, 0))}), EvaluationError);
}

RetrievalResult result(std::vector<std::string> ranked, std::set<std::string> truth) {
  RetrievalResult r;
  double s = 1.0;
  for (auto& id : ranked) r.ranked.emplace_back(std::move(id), s -= 0.01);
  r.true_ids = std::move(truth);
  return r;
}

TEST(Metrics, PerfectRetrieval) {
  const auto m = compute_metrics({result({"a", "b"}, {"a"}), result({"b", "a"}, {"b"})});
  EXPECT_DOUBLE_EQ(m.recall_at.at(1), 100.0);
  EXPECT_DOUBLE_EQ(m.ap, 100.0);
  EXPECT_EQ(m.n_queries, 2);
}

TEST(Metrics, SingleTrueItemAtRankFour) {
  const auto m = compute_metrics({result({"w", "x", "y", "t", "z"}, {"t"})});
  EXPECT_DOUBLE_EQ(m.ap, 25.0);
  EXPECT_DOUBLE_EQ(m.recall_at.at(1), 0.0);
  EXPECT_DOUBLE_EQ(m.recall_at.at(5), 100.0);
}

TEST(Metrics, FirstHitModeDiffersOnlyWithSeveralTrueItems) {
  const auto r = result({"x", "a", "y", "b"}, {"a", "b"});
  EXPECT_DOUBLE_EQ(compute_metrics({r}, {1}, ApMode::standard).ap, 100.0 * (0.5 + 0.5) / 2);
  EXPECT_DOUBLE_EQ(compute_metrics({r}, {1}, ApMode::first_hit).ap, 50.0);
  EXPECT_EQ(parse_ap_mode("first_hit"), ApMode::first_hit);
  EXPECT_THROW(parse_ap_mode("mean"), std::invalid_argument);
}

TEST(Metrics, QueriesWithoutTrueItemsAreExcluded) {
  const auto m = compute_metrics({result({"a", "b"}, {"zz"}), result({"b", "a"}, {"a"})});
  EXPECT_EQ(m.n_excluded, 1);
  EXPECT_EQ(m.n_queries, 1);
  EXPECT_DOUBLE_EQ(m.recall_at.at(1), 0.0);
  EXPECT_DOUBLE_EQ(m.ap, 50.0);
  EXPECT_THROW(compute_metrics({}, {0}), EvaluationError);
}

std::vector<RetrievalResult> random_results(std::mt19937_64& rng, std::vector<oracle::QueryOutcome>* outcomes) {
  std::vector<RetrievalResult> out;
  const int nq = 1 + static_cast<int>(rng() % 6);
  for (int q = 0; q < nq; ++q) {
    const int n = 1 + static_cast<int>(rng() % 8);
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("g" + std::to_string(i));
    std::shuffle(ids.begin(), ids.end(), rng);
    std::set<std::string> truth;
    for (const auto& id : ids)
      if (rng() % 3 == 0) truth.insert(id);
    outcomes->push_back({ids, truth});
    out.push_back(result(ids, truth));
  }
  return out;
}

TEST(Metrics, RandomInstancesMatchTheOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<oracle::QueryOutcome> outcomes;
    const auto results = random_results(rng, &outcomes);
    for (bool first_hit : {false, true}) {
      const auto got = compute_metrics(results, {1, 5, 10}, first_hit ? ApMode::first_hit : ApMode::standard);
      const auto want = oracle::metrics(outcomes, {1, 5, 10}, first_hit);
      EXPECT_EQ(got.n_queries, want.n);
      EXPECT_EQ(got.n_excluded, want.excluded);
      EXPECT_NEAR(got.ap, want.ap, 1e-9);
      for (int k : {1, 5, 10}) EXPECT_NEAR(got.recall_at.at(k), want.recall.at(k), 1e-9);
      EXPECT_LE(got.recall_at.at(1), got.recall_at.at(5));
      EXPECT_LE(got.recall_at.at(5), got.recall_at.at(10));
      EXPECT_GE(got.ap, 0.0);
      EXPECT_LE(got.ap, 100.0);
    }
  }
}

TEST(Metrics, QueryOrderDoesNotMatter) {
  std::mt19937_64 rng(4);
  std::vector<oracle::QueryOutcome> outcomes;
  auto results = random_results(rng, &outcomes);
  const auto a = compute_metrics(results);
  std::reverse(results.begin(), results.end());
  const auto b = compute_metrics(results);
  EXPECT_NEAR(a.ap, b.ap, 1e-12);
  EXPECT_EQ(a.recall_at, b.recall_at);
}

TEST(EmbeddingDump, RoundTripKeepsIdsAndRenormalizes) {
  std::mt19937_64 rng(5);
  const auto m = oracle::random_unit_rows(3, 7, rng);
  std::vector<IndexedEmbedding> items;
  for (int i = 0; i < 3; ++i) items.push_back(item("img" + std::to_string(i), "L" + std::to_string(i), m.row(i)));
  std::stringstream ss;
  write_embeddings(ss, items);
  auto back = read_embeddings(ss);
  ASSERT_EQ(back.size(), 3u);
  renormalize(back);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].id, items[i].id);
    EXPECT_EQ(back[i].location_id, items[i].location_id);
    EXPECT_NEAR((back[i].vector - items[i].vector).norm(), 0.0, 1e-6);
    EXPECT_NEAR(back[i].vector.norm(), 1.0, 1e-12);
  }
  std::vector<IndexedEmbedding> ragged{item("a", "A", unit(3, 0)), item("b", "B", unit(4, 0))};
  std::stringstream bad;
  EXPECT_THROW(write_embeddings(bad, ragged), EvaluationError);
}

TEST(Ablation, GridSizesAndLabels) {
  const auto pipe = tiny_pipeline();
  const TrainConfig train;
  const auto comp = ablation_grid(AblationSuite::components, pipe, train);
  ASSERT_EQ(comp.size(), 5u);
  EXPECT_EQ(comp[0].label, "PAFA");
  EXPECT_DOUBLE_EQ(comp[0].train.loss.lambda, 0.0);
  EXPECT_FALSE(comp[0].pipeline.use_bridge);
  EXPECT_TRUE(comp[4].use_grem);
  const auto heads = ablation_grid(AblationSuite::heads, pipe, train);
  ASSERT_EQ(heads.size(), 4u);
  EXPECT_EQ(heads[3].pipeline.head, HeadKind::pafa);
  const auto lambdas = ablation_grid(AblationSuite::lambda, pipe, train);
  ASSERT_EQ(lambdas.size(), 5u);
  EXPECT_EQ(lambdas[2].label, "lambda=3");
  EXPECT_DOUBLE_EQ(lambdas[4].train.loss.lambda, 5.0);
  EXPECT_THROW(parse_ablation_suite("all"), std::invalid_argument);
}

TEST(Ablation, FailingVariantIsReportedNotThrown) {
  auto ds = make_synthetic_dataset(tiny_synthetic(4));
  AblationData data;
  data.locations = group_locations(ds.train);
  data.queries = ds.queries;
  data.gallery = ds.gallery;
  data.images = ds.images;
  data.backend = std::make_shared<StubReconstructionBackend>(1);
  auto variants = ablation_grid(AblationSuite::components, tiny_pipeline(), TrainConfig{});
  const auto row = run_variant(variants[4], data);  // no GREM locations prepared
  EXPECT_FALSE(row.ok);
  EXPECT_NE(row.error.find("GREM"), std::string::npos);
  const auto table = format_table({row});
  EXPECT_NE(table.find("failed"), std::string::npos);
  EXPECT_EQ(to_json(row)["status"], "failed");
}

TEST(Ablation, SmallVariantTrainsAndEvaluates) {
  auto ds = make_synthetic_dataset(tiny_synthetic(4));
  AblationData data;
  data.locations = group_locations(ds.train);
  data.queries = ds.queries;
  data.gallery = ds.gallery;
  data.images = ds.images;
  data.backend = std::make_shared<StubReconstructionBackend>(1);
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 2;
  const auto row = run_variant(ablation_grid(AblationSuite::heads, tiny_pipeline(), t)[1], data);
  ASSERT_TRUE(row.ok) << row.error;
  EXPECT_EQ(row.metrics.n_queries, 4);
  EXPECT_NE(format_table({row}).find("| gem |"), std::string::npos);
}

}  // namespace
