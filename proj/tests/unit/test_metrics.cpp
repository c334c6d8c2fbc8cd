#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "medvit/metrics.hpp"
#include "oracles.hpp"

using namespace medvit;

TEST(BinaryAuc, KnownValues) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(binary_auc(s, y), 0.75);
  const std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
  EXPECT_DOUBLE_EQ(binary_auc(tied, y), 0.5);
  const std::vector<std::uint8_t> none{0, 0, 0, 0};
  EXPECT_TRUE(std::isnan(binary_auc(s, none)));
}

TEST(BinaryAuc, EqualsPairCountingOnTies) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 40;
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 7) / 7.0;  // heavy ties
      y[i] = rng() % 2;
    }
    const double a = binary_auc(s, y), b = oracle::pair_auc(s, y);
    if (std::isnan(b)) EXPECT_TRUE(std::isnan(a));
    else EXPECT_EQ(a, b);
  }
}

TEST(ComputeMetrics, MulticlassAccuracyAndMacroAuc) {
  Labels l;
  l.num_classes = 3;
  l.classes = {0, 1, 2, 1};
  const std::vector<double> p{0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.5, 0.2, 0.3, 0.2, 0.6, 0.2};
  const MetricReport r = compute_metrics(p, l);
  EXPECT_DOUBLE_EQ(r.acc, 0.75);
  ASSERT_EQ(r.per_class_auc.size(), 3u);
  double mean = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> col;
    std::vector<std::uint8_t> pos;
    for (std::size_t i = 0; i < 4; ++i) {
      col.push_back(p[i * 3 + c]);
      pos.push_back(l.classes[i] == c);
    }
    EXPECT_EQ(r.per_class_auc[c], oracle::pair_auc(col, pos));
    mean += r.per_class_auc[c];
  }
  EXPECT_DOUBLE_EQ(r.auc, mean / 3);
  EXPECT_TRUE(r.skipped_classes.empty());
}

TEST(ComputeMetrics, ClassesWithoutPositivesAreSkipped) {
  Labels l;
  l.num_classes = 3;
  l.classes = {0, 1, 0, 1};
  const std::vector<double> p(12, 1.0 / 3);
  const MetricReport r = compute_metrics(p, l);
  EXPECT_EQ(r.skipped_classes, (std::vector<std::size_t>{2}));
  EXPECT_TRUE(std::isnan(r.per_class_auc[2]));
  EXPECT_DOUBLE_EQ(r.auc, 0.5);

  Labels single;
  single.num_classes = 2;
  single.classes = {1};
  const MetricReport one = compute_metrics(std::vector<double>{0.2, 0.8}, single);
  EXPECT_EQ(one.skipped_classes.size(), 2u);
  EXPECT_EQ(one.auc, 0.5);
  EXPECT_EQ(one.acc, 1.0);
}

TEST(ComputeMetrics, MultilabelThresholdAccuracy) {
  Labels l;
  l.kind = TaskKind::Multilabel;
  l.num_classes = 2;
  l.targets = {1, 0, 1, 1};
  const std::vector<double> p{0.9, 0.4, 0.6, 0.5};
  const MetricReport r = compute_metrics(p, l);
  EXPECT_DOUBLE_EQ(r.acc, 0.75);  // 0.5 is not > 0.5
  EXPECT_EQ(r.skipped_classes, (std::vector<std::size_t>{0}));
  EXPECT_DOUBLE_EQ(r.auc, 1.0);
}

TEST(ComputeMetrics, RejectsBadInput) {
  Labels l;
  l.num_classes = 2;
  l.classes = {0, 1};
  EXPECT_THROW(compute_metrics(std::vector<double>{0.5, 0.5, 0.5}, l), ShapeError);
  l.classes = {0, 2};
  EXPECT_THROW(compute_metrics(std::vector<double>(4, 0.5), l), LabelRangeError);
}
