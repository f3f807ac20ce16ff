#include <gtest/gtest.h>

#include "attention_oracle.hpp"
#include "mg3d/fusion.hpp"
#include "test_util.hpp"

namespace mg3d {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

CrossModalAttention make_attn(std::size_t d, std::size_t heads, AttentionVariant v, std::uint64_t seed,
                              double stddev = 0.5) {
  Rng rng(seed);
  return CrossModalAttention(CrossAttentionConfig{d, heads, v}, rng, stddev);
}

void set_identity(Linear& l) {
  auto w = l.weight.mutable_data();
  const std::size_t n = l.weight.cols();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i / n == i % n) ? 1.0 : 0.0;
  if (l.bias.defined())
    for (double& b : l.bias.mutable_data()) b = 0.0;
}

TEST(Proposed, HandComputedTwoByTwo) {
  auto attn = make_attn(2, 1, AttentionVariant::proposed, 1);
  set_identity(attn.mha.query);
  set_identity(attn.mha.key);
  set_identity(attn.mha.value);
  set_identity(attn.mha.out);
  const Tensor dom = Tensor::matrix({{1, 0}, {0, 2}});
  const Tensor guide = Tensor::matrix({{1, 1}, {2, 0}});
  // Guide row 0 logits: (1, 2)/sqrt 2; row 1: (2, 0)/sqrt 2.
  const double r = 1.0 / std::sqrt(2.0);
  const double p0 = std::exp(r) / (std::exp(r) + std::exp(2 * r));
  const double q0 = std::exp(2 * r) / (std::exp(2 * r) + 1.0);
  const double a0 = 0.5 * (p0 + q0), a1 = 1.0 - a0;
  const Tensor out = proposed_cross_attention(dom, guide, {}, attn);
  EXPECT_NEAR(out.at(0, 0), a0 * 1.0, 1e-12);
  EXPECT_NEAR(out.at(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(out.at(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(out.at(1, 1), a1 * 2.0, 1e-12);
}

TEST(Proposed, MatchesBruteForce) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng.below(2), d = heads * (1 + rng.below(4));
    const auto attn = make_attn(d, heads, AttentionVariant::proposed, 100 + trial);
    const Tensor dom = random_tensor({1 + rng.below(6), d}, rng);
    const Tensor guide = random_tensor({1 + rng.below(6), d}, rng);
    std::vector<bool> valid(guide.rows(), true);
    for (std::size_t i = 1; i < valid.size(); ++i) valid[i] = rng.bernoulli(0.7);
    std::vector<Tensor> maps;
    const Tensor out = proposed_cross_attention(dom, guide, valid, attn, &maps);
    const auto w = oracle::weights_of(attn.mha);
    const auto expect = oracle::proposed(oracle::to_mat(dom), oracle::to_mat(guide), valid, w);
    EXPECT_LT(max_abs_diff(out.values(), oracle::flatten(expect)), 1e-6);
    const auto expect_maps = oracle::proposed_maps(oracle::to_mat(dom), oracle::to_mat(guide), valid, w);
    ASSERT_EQ(maps.size(), heads);
    for (std::size_t h = 0; h < heads; ++h) EXPECT_LT(max_abs_diff(maps[h].values(), expect_maps[h]), 1e-6);
  }
}

TEST(Proposed, AveragedMapsAreDistributions) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto attn = make_attn(8, 4, AttentionVariant::proposed, 200 + trial, 2.0);
    std::vector<Tensor> maps;
    proposed_cross_attention(random_tensor({5, 8}, rng, 3.0), random_tensor({4, 8}, rng, 3.0), {}, attn, &maps);
    for (const auto& m : maps) {
      double s = 0.0;
      for (double x : m.values()) {
        EXPECT_GE(x, 0.0);
        s += x;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Proposed, GuideOrderAndPaddingInvariance) {
  Rng rng(4);
  const auto attn = make_attn(8, 2, AttentionVariant::proposed, 5);
  const Tensor dom = random_tensor({6, 8}, rng);
  const Tensor guide = random_tensor({4, 8}, rng);
  const std::vector<bool> valid{true, true, true, false};
  const Tensor out = proposed_cross_attention(dom, guide, valid, attn);
  const Tensor permuted = take_rows(guide, {2, 0, 1, 3});
  EXPECT_LT(max_abs_diff(proposed_cross_attention(dom, permuted, valid, attn).values(), out.values()), 1e-12);
  Tensor perturbed = guide.clone(false);
  for (std::size_t c = 0; c < 8; ++c) perturbed.mutable_data()[3 * 8 + c] = 100.0 * rng.normal();
  EXPECT_EQ(proposed_cross_attention(dom, perturbed, valid, attn).values(), out.values());
  EXPECT_THROW(proposed_cross_attention(dom, guide, {false, false, false, false}, attn), EmptyInputError);
}

TEST(Proposed, SingleGuideEqualsSingleQueryAttentionWithSwappedRoles) {
  // With one guide row the averaged map is that row's distribution over
  // dominant positions, i.e. classical attention with the guide as query.
  Rng rng(5);
  const auto attn = make_attn(4, 1, AttentionVariant::proposed, 6);
  const Tensor dom = random_tensor({5, 4}, rng);
  const Tensor guide = random_tensor({1, 4}, rng);
  std::vector<Tensor> avg, single;
  proposed_cross_attention(dom, guide, {}, attn, &avg);
  attn.mha.attend(guide, dom, {}, &single);
  EXPECT_LT(max_abs_diff(avg[0].values(), single[0].values()), 1e-12);
}

TEST(Classical, MatchesBruteForceAndSingletonKv) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng.below(2), d = heads * (1 + rng.below(4));
    const auto attn = make_attn(d, heads, AttentionVariant::classical, 300 + trial);
    const Tensor q = random_tensor({1 + rng.below(6), d}, rng);
    const Tensor kv = random_tensor({1 + rng.below(6), d}, rng);
    std::vector<bool> valid(kv.rows(), true);
    for (std::size_t i = 1; i < valid.size(); ++i) valid[i] = rng.bernoulli(0.7);
    const Tensor out = classical_cross_attention(q, kv, valid, attn);
    const auto expect = oracle::classical(oracle::to_mat(q), oracle::to_mat(kv), valid, oracle::weights_of(attn.mha));
    EXPECT_LT(max_abs_diff(out.values(), oracle::flatten(expect)), 1e-6);
  }
  const auto attn = make_attn(4, 2, AttentionVariant::classical, 7);
  const Tensor kv = random_tensor({1, 4}, rng);
  const Tensor out = classical_cross_attention(random_tensor({3, 4}, rng), kv, {}, attn);
  const Tensor expect = attn.mha.out.forward(attn.mha.value.forward(kv));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(i, c), expect.at(0, c), 1e-12);
}

TEST(Classical, EqualsProposedWhenSingleGuideMirrored) {
  // Proposed with one guide row g weights each dominant value by p(g -> j).
  // Classical with g as the query sums those same weighted values.
  Rng rng(7);
  const auto prop = make_attn(4, 1, AttentionVariant::proposed, 8);
  auto cls = make_attn(4, 1, AttentionVariant::classical, 9);
  cls.mha = prop.mha;
  const Tensor dom = random_tensor({5, 4}, rng);
  const Tensor guide = random_tensor({1, 4}, rng);
  // Copies share storage, so this strips the output projection from both.
  set_identity(cls.mha.out);
  auto p2 = prop;
  p2.mha.out = cls.mha.out;
  const Tensor a = proposed_cross_attention(dom, guide, {}, p2);
  const Tensor b = classical_cross_attention(guide, dom, {}, cls);
  std::vector<double> column_sums(4, 0.0);
  for (std::size_t j = 0; j < a.rows(); ++j)
    for (std::size_t c = 0; c < 4; ++c) column_sums[c] += a.at(j, c);
  EXPECT_LT(max_abs_diff(column_sums, b.values()), 1e-12);
}

TEST(Classical, RowsAreDistributions) {
  Rng rng(8);
  const auto attn = make_attn(8, 4, AttentionVariant::classical, 10, 2.0);
  std::vector<Tensor> maps;
  classical_cross_attention(random_tensor({5, 8}, rng, 3.0), random_tensor({3, 8}, rng, 3.0), {}, attn, &maps);
  ASSERT_EQ(maps.size(), 4u);
  for (const auto& m : maps)
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m.cols(); ++j) s += m.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  EXPECT_THROW(classical_cross_attention(random_tensor({2, 8}, rng), Tensor(), {}, attn), EmptyInputError);
}

TEST(Variant, WrongModuleRejected) {
  Rng rng(9);
  const Tensor x = random_tensor({2, 4}, rng);
  EXPECT_THROW(proposed_cross_attention(x, x, {}, make_attn(4, 1, AttentionVariant::classical, 1)), ConfigError);
  EXPECT_THROW(classical_cross_attention(x, x, {}, make_attn(4, 1, AttentionVariant::proposed, 1)), ConfigError);
  EXPECT_THROW(parse_attention_variant("other"), ConfigError);
  EXPECT_EQ(parse_attention_variant("classical"), AttentionVariant::classical);
}

TEST(SentenceSpecific, MatchesBruteForce) {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    Rng init(400 + trial);
    const MultiHeadAttention mha(8, 2, init, 0.5);
    const std::size_t n = 1 + rng.below(4), slots = n + rng.below(3);
    const auto s = SentenceFeatures::padded(random_tensor({n, 8}, rng), slots);
    const Tensor vis = random_tensor({1 + rng.below(6), 8}, rng);
    const auto hs = sentence_specific_global(s, vis, mha);
    EXPECT_EQ(hs.valid, s.valid);
    const auto expect = oracle::sentence_specific(oracle::to_mat(s.features), s.valid, oracle::to_mat(vis),
                                                  oracle::weights_of(mha));
    EXPECT_LT(max_abs_diff(hs.features.values(), oracle::flatten(expect)), 1e-6);
  }
}

TEST(SentenceSpecific, SingletonAndDuplicates) {
  Rng rng(11);
  Rng init(12);
  const MultiHeadAttention mha(4, 2, init, 0.5);
  const Tensor v = random_tensor({1, 4}, rng);
  const Tensor row = random_tensor({1, 4}, rng);
  const auto s = SentenceFeatures::padded(concat_rows({row, random_tensor({1, 4}, rng), row}), 4);
  const auto hs = sentence_specific_global(s, v, mha);
  const Tensor expect = mha.out.forward(mha.value.forward(v));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(hs.features.at(i, c), expect.at(0, c), 1e-12);

  const Tensor vis = random_tensor({5, 4}, rng);
  const auto hs2 = sentence_specific_global(s, vis, mha);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(hs2.features.at(0, c), hs2.features.at(2, c));
  EXPECT_THROW(sentence_specific_global(s, Tensor(), mha), EmptyInputError);
}

TEST(FusionBlock, ShapeAndGuideAblation) {
  Rng init(13);
  const FusionBlock block(CrossAttentionConfig{8, 2, AttentionVariant::proposed}, init, 0.3);
  Rng rng(14);
  const Tensor dom = random_tensor({5, 8}, rng);
  const Tensor g1 = random_tensor({3, 8}, rng), g2 = random_tensor({3, 8}, rng);
  EXPECT_EQ(fusion_block_forward(dom, g1, block).shape(), (Shape{5, 8}));
  EXPECT_GT(max_abs_diff(fusion_block_forward(dom, g1, block).values(), fusion_block_forward(dom, g2, block).values()),
            1e-9);

  // Zeroing the cross-attention value path removes every trace of the guide
  // except the output bias, which is zero at init.
  FusionBlock ablated = block;
  ablated.cross.mha.value.weight = Tensor::zeros({8, 8});
  const Tensor a = fusion_block_forward(dom, g1, ablated);
  const Tensor b = fusion_block_forward(dom, g2, ablated);
  EXPECT_EQ(a.values(), b.values());
  const Tensor n1 = block.ln_self.forward(dom);
  const Tensor x = add(dom, block.self_attn.attend(n1, n1));
  const Tensor expect = add(x, block.ffn.forward(block.ln_ffn.forward(x)));
  EXPECT_LT(max_abs_diff(a.values(), expect.values()), 1e-12);
  EXPECT_THROW(fusion_block_forward(dom, random_tensor({3, 4}, rng), block), DimensionError);
}

TEST(FusionBlock, GradientReachesBothInputs) {
  for (auto variant : {AttentionVariant::proposed, AttentionVariant::classical}) {
    Rng init(15);
    const FusionBlock block(CrossAttentionConfig{8, 2, variant}, init, 0.4);
    Rng rng(16);
    Tensor dom = random_tensor({4, 8}, rng, 1.0, true);
    Tensor guide = random_tensor({3, 8}, rng, 1.0, true);
    const Tensor w = random_tensor({4, 8}, rng);
    const std::vector<bool> valid{true, true, false};
    const FdReport r =
        fd_check([&] { return sum(mul(fusion_block_forward(dom, guide, block, valid), w)); }, {dom, guide}, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(variant);
    backward(sum(mul(fusion_block_forward(dom, guide, block, valid), w)));
    double gsum = 0.0;
    for (std::size_t i = 0; i < 16; ++i) gsum += std::fabs(guide.grad()[i]);
    EXPECT_GT(gsum, 0.0);
    for (std::size_t i = 16; i < 24; ++i) EXPECT_EQ(guide.grad()[i], 0.0);
  }
}

}  // namespace
}  // namespace mg3d
