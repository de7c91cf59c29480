#include <gtest/gtest.h>

#include <array>

#include "forenvit/probes/probes.hpp"

using namespace forenvit;

namespace {

FeatureMatrix blobs(std::size_t per_class, std::size_t dim, double sep, double sigma, Rng& rng) {
  std::vector<double> v;
  std::vector<int> l;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int label = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < dim; ++j) v.push_back(rng.normal(j == 0 ? (label ? sep : -sep) : 0.0, sigma));
    l.push_back(label);
  }
  return {2 * per_class, dim, v, l};
}

FeatureMatrix xor_set(std::size_t n, Rng& rng) {
  std::vector<double> v;
  std::vector<int> l;
  for (std::size_t i = 0; i < n; ++i) {
    const int a = static_cast<int>(rng.below(2)), b = static_cast<int>(rng.below(2));
    v.push_back((a ? 1.0 : -1.0) + rng.normal(0, 0.1));
    v.push_back((b ? 1.0 : -1.0) + rng.normal(0, 0.1));
    l.push_back(a ^ b);
  }
  return {n, 2, v, l};
}

double accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  double ok = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ok += (scores[i] >= 0.5) == (labels[i] == 1);
  return ok / scores.size();
}

// Best accuracy over a dense sweep of lines through the square.
double best_linear_separator(const FeatureMatrix& x) {
  double best = 0;
  for (int a = 0; a < 360; a += 2) {
    const double t = a * M_PI / 180, cx = std::cos(t), cy = std::sin(t);
    for (double off = -3; off <= 3; off += 0.05) {
      double ok = 0;
      for (std::size_t i = 0; i < x.rows; ++i) ok += ((cx * x.values[2 * i] + cy * x.values[2 * i + 1] >= off) == (x.labels[i] == 1));
      best = std::max(best, ok / x.rows);
    }
  }
  return best;
}

}  // namespace

TEST(FeatureMatrixContract, RejectsBadEntries) {
  EXPECT_THROW(FeatureMatrix(1, 2, {0.0, NAN}, {0}), InvalidValueError);
  EXPECT_THROW(FeatureMatrix(1, 1, {0.0}, {2}), ContractError);
  EXPECT_THROW(FeatureMatrix(2, 1, {0.0}, {0, 1}), ShapeError);
}

TEST(PcaKMeans, SeparatedBlobs) {
  Rng rng(1);
  const auto train = blobs(100, 5, 5.0, 0.1, rng);
  const auto probe = PcaKMeansProbe::fit(train, Rng(2), 2);
  // Oracle: with blobs this tight the best of both label assignments of the
  // sign split on the first axis is exact.
  double ok = 0;
  for (std::size_t i = 0; i < train.rows; ++i) ok += probe.predict(train.row(i)) == train.labels[i];
  EXPECT_GE(ok / train.rows, 0.99);
}

TEST(PcaKMeans, IdenticalRowsAreDegenerate) {
  FeatureMatrix x(4, 3, std::vector<double>(12, 1.5), {0, 1, 0, 1});
  EXPECT_THROW(PcaKMeansProbe::fit(x, Rng(3)), DegenerateDataError);
}

TEST(Pca, FullRankPreservesDistances) {
  Rng rng(4);
  std::vector<double> v(30 * 6);
  for (auto& x : v) x = rng.normal(0, 2);
  FeatureMatrix x(30, 6, v, std::vector<int>(30, 0));
  const auto z = pca_project(pca_fit(x, 6), x);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = 0; j < 30; ++j)
      ASSERT_NEAR(std::sqrt(squared_distance(x.row(i), x.row(j))), std::sqrt(squared_distance(z.row(i), z.row(j))), 1e-4);
}

TEST(Pca, FirstAxisFollowsLargestVariance) {
  Rng rng(5);
  std::vector<double> v;
  for (int i = 0; i < 200; ++i) {
    v.push_back(rng.normal(0, 0.1));
    v.push_back(rng.normal(0, 3.0));
    v.push_back(rng.normal(0, 0.5));
  }
  const auto p = pca_fit(FeatureMatrix(200, 3, v, std::vector<int>(200, 0)), 2);
  EXPECT_NEAR(std::fabs(p.components[1 * 2 + 0]), 1.0, 1e-2);
  EXPECT_GT(p.variances[0], p.variances[1]);
}

TEST(Pca, ComponentRangeIsConfigError) {
  FeatureMatrix x(3, 2, {1, 2, 3, 4, 5, 7}, {0, 1, 0});
  EXPECT_THROW(pca_fit(x, 3), ConfigError);
  EXPECT_THROW(pca_fit(x, 0), ConfigError);
}

TEST(KMeans, ObjectiveNeverIncreases) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = blobs(40, 3, 1.0, 1.0, rng);
    const auto r = kmeans(x, 2, rng.derive(static_cast<std::uint64_t>(trial)));
    for (std::size_t i = 1; i < r.objective.size(); ++i) ASSERT_LE(r.objective[i], r.objective[i - 1] + 1e-9);
  }
}

TEST(Knn, OnePerClass) {
  FeatureMatrix train(2, 2, {0, 0, 10, 10}, {0, 1});
  const std::vector<double> q{1, 1};
  EXPECT_EQ(knn_classify(train, q, 1), 0);
}

TEST(Knn, KOneMemorizesTraining) {
  Rng rng(7);
  const auto x = blobs(50, 4, 0.3, 1.0, rng);
  for (std::size_t i = 0; i < x.rows; ++i) ASSERT_EQ(knn_classify(x, x.row(i), 1), x.labels[i]);
}

TEST(Knn, TiedVoteGoesToNearerClass) {
  // Distances from the query (0): class 1 at 1, class 0 at 2; k=2 ties 1-1.
  FeatureMatrix train(3, 1, {2.0, 1.0, 5.0}, {0, 1, 1});
  const std::vector<double> q{0.0};
  EXPECT_EQ(knn_classify(train, q, 2), 1);
  // Equidistant tie falls back to label 0.
  FeatureMatrix sym(2, 1, {-1.0, 1.0}, {1, 0});
  EXPECT_EQ(knn_classify(sym, q, 2), 0);
}

TEST(Knn, PermutationInvariant) {
  Rng rng(8);
  auto x = blobs(30, 3, 0.5, 1.0, rng);
  // Duplicate some rows with flipped labels to create distance ties.
  for (std::size_t i = 0; i < 5; ++i) {
    const auto r = x.row(i);
    x.values.insert(x.values.end(), r.begin(), r.end());
    x.labels.push_back(1 - x.labels[i]);
    ++x.rows;
  }
  std::vector<std::vector<double>> queries;
  for (int q = 0; q < 40; ++q) queries.push_back({rng.normal(), rng.normal(), rng.normal()});
  queries.push_back({x.values[0], x.values[1], x.values[2]});
  std::vector<int> base;
  for (auto& q : queries) base.push_back(knn_classify(x, q, 5));
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> perm(x.rows);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    FeatureMatrix y;
    y.rows = x.rows;
    y.cols = x.cols;
    for (auto p : perm) {
      const auto r = x.row(p);
      y.values.insert(y.values.end(), r.begin(), r.end());
      y.labels.push_back(x.labels[p]);
    }
    for (std::size_t q = 0; q < queries.size(); ++q) ASSERT_EQ(knn_classify(y, queries[q], 5), base[q]);
  }
}

TEST(Knn, Contracts) {
  FeatureMatrix empty;
  const std::vector<double> q{0.0};
  EXPECT_THROW(knn_classify(empty, q, 1), ContractError);
  FeatureMatrix one(1, 1, {0.0}, {0});
  EXPECT_THROW(knn_classify(one, q, 2), ConfigError);
}

TEST(LinearProbe, SeparableBlobsHeldOut) {
  Rng rng(9);
  const auto train = blobs(100, 2, 2.0, 0.5, rng);
  const auto test = blobs(100, 2, 2.0, 0.5, rng);
  ProbeHyper h;
  h.epochs = 50;
  const auto p = TrainedProbe::fit(train, HeadKind::linear, h, Rng(10));
  EXPECT_GE(accuracy(p.scores(test), test.labels), 0.99);
}

TEST(Probes, XorNeedsHiddenLayer) {
  Rng rng(11);
  const auto train = xor_set(400, rng);
  const auto test = xor_set(400, rng);
  ASSERT_LE(best_linear_separator(test), 0.80);
  ProbeHyper h;
  h.epochs = 150;
  const double lin = accuracy(TrainedProbe::fit(train, HeadKind::linear, h, Rng(12)).scores(test), test.labels);
  h.hidden = 8;
  const double mlp = accuracy(TrainedProbe::fit(train, HeadKind::mlp2, h, Rng(12)).scores(test), test.labels);
  EXPECT_LE(lin, 0.75);
  EXPECT_GE(mlp, 0.99);
  EXPECT_GE(mlp, lin);
}

TEST(Probes, ParametersRoundTrip) {
  Rng rng(13);
  const auto train = blobs(20, 3, 2.0, 0.5, rng);
  ProbeHyper h;
  h.epochs = 5;
  const auto p = TrainedProbe::fit(train, HeadKind::mlp2, h, Rng(14));
  const auto params = probe_parameters(p);
  for (auto& [n, t] : params) EXPECT_EQ(n.rfind("probe/", 0), 0u);
  const auto back = trained_probe_from(params, HeadKind::mlp2);
  const auto a = p.scores(train), b = back.scores(train);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
  EXPECT_EQ(probe_parameters(PcaKMeansProbe::fit(train, Rng(15), 2)).count("probe/kmeans.centroids"), 1u);
  EXPECT_EQ(probe_parameters(train).at("probe/knn.features").shape(), (Shape{40, 3}));
}

TEST(Probes, Deterministic) {
  Rng rng(16);
  const auto train = blobs(30, 3, 1.0, 1.0, rng);
  ProbeHyper h;
  h.epochs = 10;
  EXPECT_EQ(TrainedProbe::fit(train, HeadKind::linear, h, Rng(17)).scores(train),
            TrainedProbe::fit(train, HeadKind::linear, h, Rng(17)).scores(train));
}
