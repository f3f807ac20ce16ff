#include <gtest/gtest.h>

#include <set>

#include "mg3d/random.hpp"

namespace mg3d {
namespace {

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, StreamsDiffer) { EXPECT_NE(mix_seed(0, 1), mix_seed(0, 2)); }

TEST(Rng, BelowStaysInRange) {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.below(7), 7u);
}

TEST(Rng, SampleIndicesDistinctSorted) {
  Rng r(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto idx = r.sample_indices(20, 7);
    ASSERT_EQ(idx.size(), 7u);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 7u);
    EXPECT_LT(idx.back(), 20u);
  }
}

TEST(Rng, TruncatedNormalBounded) {
  Rng r(3);
  for (int i = 0; i < 1000; ++i) EXPECT_LE(std::fabs(r.truncated_normal(0.02)), 0.04);
}

TEST(MaskedCount, CeilingArithmetic) {
  EXPECT_EQ(masked_count(0.15, 20), 3u);
  EXPECT_EQ(masked_count(0.6, 64), 39u);
  EXPECT_EQ(masked_count(0.01, 5), 1u);
  EXPECT_EQ(masked_count(0.99, 5), 5u);
}

}  // namespace
}  // namespace mg3d
