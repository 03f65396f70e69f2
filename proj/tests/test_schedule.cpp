#include "looprec/schedule.hpp"

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

using looprec::loop_partition;
using looprec::StepCountSampler;

namespace {

TEST(LoopPartition, UniformWithExactEndpoints) {
  for (int k : {1, 3, 8, 17}) {
    auto t = loop_partition(k);
    ASSERT_EQ((int)t.size(), k + 1);
    EXPECT_EQ(t.front(), 0.0);
    EXPECT_EQ(t.back(), 1.0);
    for (int i = 0; i <= k; ++i) EXPECT_DOUBLE_EQ(t[(size_t)i], (double)i / k);
    for (int i = 1; i <= k; ++i) EXPECT_NEAR(t[(size_t)i] - t[(size_t)i - 1], 1.0 / k, 1e-15);
  }
  EXPECT_THROW(loop_partition(0), looprec::Error);
}

// Empirical CDF of sample_x against the analytic Beta(2,1) CDF F(x) = x^2.
TEST(StepSampler, BetaTwoOneMatchesAnalyticCdf) {
  StepCountSampler s(2.0, 1.0, 1, 8, 1234);
  const int n = 200000;
  std::vector<double> xs((size_t)n);
  for (auto& x : xs) x = s.sample_x();
  std::sort(xs.begin(), xs.end());
  double ks = 0;
  for (int i = 0; i < n; ++i) {
    double f = xs[(size_t)i] * xs[(size_t)i];
    ks = std::max(ks, std::abs(f - (double)(i + 1) / n));
    ks = std::max(ks, std::abs(f - (double)i / n));
  }
  EXPECT_LT(ks, 0.01);
}

// General-alpha/beta path: Beta(2,2) has CDF 3x^2 - 2x^3.
TEST(StepSampler, GammaRatioPathMatchesAnalyticCdf) {
  StepCountSampler s(2.0, 2.0, 1, 8, 99);
  const int n = 200000;
  std::vector<double> xs((size_t)n);
  for (auto& x : xs) x = s.sample_x();
  std::sort(xs.begin(), xs.end());
  double ks = 0;
  for (int i = 0; i < n; ++i) {
    double x = xs[(size_t)i];
    double f = 3 * x * x - 2 * x * x * x;
    ks = std::max(ks, std::abs(f - (double)(i + 1) / n));
    ks = std::max(ks, std::abs(f - (double)i / n));
  }
  EXPECT_LT(ks, 0.01);
}

TEST(StepSampler, DrawsStayInBounds) {
  StepCountSampler s(2.0, 1.0, 4, 8, 7);
  std::vector<int> hist(12, 0);
  for (int i = 0; i < 20000; ++i) {
    int k = s.sample_k();
    ASSERT_GE(k, 4);
    ASSERT_LE(k, 8);
    hist[(size_t)k]++;
  }
  for (int k = 4; k <= 8; ++k) EXPECT_GT(hist[(size_t)k], 0) << "k=" << k << " never drawn";
  // Beta(2,1) leans toward x = 1, so the top step count dominates.
  EXPECT_GT(hist[8], hist[4]);
}

TEST(StepSampler, DegenerateRangeIsConstant) {
  StepCountSampler s(2.0, 1.0, 6, 6, 7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(s.sample_k(), 6);
}

TEST(StepSampler, SameSeedSameStream) {
  StepCountSampler a(2.0, 1.0, 2, 9, 42), b(2.0, 1.0, 2, 9, 42), c(2.0, 1.0, 2, 9, 43);
  std::vector<int> da, db, dc;
  for (int i = 0; i < 200; ++i) {
    da.push_back(a.sample_k());
    db.push_back(b.sample_k());
    dc.push_back(c.sample_k());
  }
  EXPECT_EQ(da, db);
  EXPECT_NE(da, dc);
}

TEST(StepSampler, RejectsBadParameters) {
  EXPECT_THROW(StepCountSampler(0.0, 1.0, 1, 8, 1), looprec::Error);
  EXPECT_THROW(StepCountSampler(2.0, -1.0, 1, 8, 1), looprec::Error);
  EXPECT_THROW(StepCountSampler(2.0, 1.0, 0, 8, 1), looprec::Error);
  EXPECT_THROW(StepCountSampler(2.0, 1.0, 5, 4, 1), looprec::Error);
}

}  // namespace
