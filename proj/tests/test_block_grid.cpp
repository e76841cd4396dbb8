#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "stream/block_grid.hpp"
#include "stream/stream_estimator.hpp"

namespace {

using namespace stream;

TEST(MakeGrid, Examples) {
  auto g = make_grid(100, 32, 64);
  EXPECT_EQ(g.T_pad, 128u);
  EXPECT_EQ(g.extra, 28u);
  EXPECT_EQ(g.n_q, 4u);
  EXPECT_EQ(g.n_k, 2u);

  g = make_grid(64, 32, 32);
  EXPECT_EQ(g.T_pad, 64u);
  EXPECT_EQ(g.extra, 0u);

  g = make_grid(1000, 32, 32);
  EXPECT_EQ(g.T_pad, 1024u);
  EXPECT_EQ(g.n_q, 32u);
  EXPECT_EQ(g.n_k, 32u);
}

TEST(MakeGrid, Errors) {
  try {
    make_grid(0, 32, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyContext);
  }
  try {
    make_grid(10, 0, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidParams);
  }
}

TEST(MakeGrid, PaddingIsMinimalAndIdempotent) {
  for (std::size_t T = 1; T <= 300; T += 7)
    for (std::size_t bq : {1, 3, 4, 8, 32})
      for (std::size_t bk : {1, 2, 6, 16, 64}) {
        const auto g = make_grid(T, bq, bk);
        const std::size_t ell = std::lcm(bq, bk);
        EXPECT_EQ(g.T_pad % ell, 0u);
        EXPECT_GE(g.T_pad, T);
        EXPECT_LT(g.T_pad - T, ell);
        EXPECT_EQ(g.n_q * bq, g.T_pad);
        EXPECT_EQ(g.n_k * bk, g.T_pad);
        const auto again = make_grid(g.T_pad, bq, bk);
        EXPECT_EQ(again.T_pad, g.T_pad);
        EXPECT_EQ(again.extra, 0u);
      }
}

TEST(CausalBlockMask, TwoBlocks) {
  const auto bm = causal_block_mask(make_grid(64, 32, 32));
  EXPECT_EQ(bm.bits(), (std::vector<std::uint8_t>{1, 0, 1, 1}));
}

TEST(CausalBlockMask, MixedBlockSizes) {
  const auto bm = causal_block_mask(make_grid(100, 32, 64));
  EXPECT_TRUE(bm(0, 0));
  EXPECT_FALSE(bm(0, 1));
  EXPECT_TRUE(bm(2, 1));  // token 64..95 sees key block 1
  EXPECT_TRUE(bm(3, 1));
}

TEST(CausalBlockMask, AllZeroTokenMask) {
  const auto g = make_grid(64, 32, 32);
  const auto bm = block_mask(g, TokenMask::from_bits(64, std::vector<std::uint8_t>(64 * 64, 0)));
  for (auto b : bm.bits()) EXPECT_EQ(b, 0);
  EXPECT_FALSE(bm.first_valid(1, 0, 1).has_value());
}

// Brute-force block-max over real token pairs, padded cells zero.
std::vector<std::uint8_t> brute_block_bits(const BlockGrid& g, const TokenMask& tok) {
  std::vector<std::uint8_t> out(g.n_q * g.n_k, 0);
  for (std::size_t u = 0; u < g.T_orig; ++u)
    for (std::size_t v = 0; v < g.T_orig; ++v)
      if (tok(u, v)) out[(u / g.b_q) * g.n_k + v / g.b_k] = 1;
  return out;
}

TEST(CausalBlockMask, MatchesBruteForceForCausalAndCustomMasks) {
  std::mt19937 rng(11);
  for (std::size_t T = 1; T <= 128; T += 5)
    for (std::size_t bq : {1, 2, 4, 8, 16, 32})
      for (std::size_t bk : {1, 2, 4, 8, 16, 32}) {
        const auto g = make_grid(T, bq, bk);
        const auto causal = causal_block_mask(g);
        const auto want = brute_block_bits(g, TokenMask::causal(T));
        ASSERT_EQ(causal.bits(), want) << T << " " << bq << " " << bk;
        if (bq == bk && g.extra == 0) {
          for (std::size_t q = 0; q < g.n_q; ++q)
            for (std::size_t r = 0; r < g.n_k; ++r) EXPECT_EQ(causal(q, r), r <= q);
        }

        if ((T + bq + bk) % 3 != 0) continue;
        std::vector<std::uint8_t> bits(T * T);
        std::bernoulli_distribution coin(0.05);
        for (auto& b : bits) b = coin(rng);
        const auto tok = TokenMask::from_bits(T, bits);
        const auto custom = block_mask(g, tok);
        ASSERT_EQ(custom.bits(), brute_block_bits(g, tok));
        // first_valid agrees with a linear scan
        for (std::size_t q = 0; q < g.n_q; ++q)
          for (std::size_t f = 0; f < g.n_k; ++f)
            for (std::size_t l = f; l < g.n_k; l += 2) {
              std::optional<std::size_t> scan;
              for (std::size_t r = f; r <= l && !scan; ++r)
                if (custom(q, r)) scan = r;
              ASSERT_EQ(custom.first_valid(q, f, l), scan);
            }
      }
}

TEST(CausalBlockMask, TokenMaskSizeMustMatch) {
  try {
    block_mask(make_grid(10, 2, 2), TokenMask::causal(9));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
}

TEST(BlockMean, IdentityUsesFullBlockArea) {
  Matrix P(4, 4, 0.0f);
  for (std::size_t i = 0; i < 4; ++i) P(i, i) = 1.0f;
  const Matrix bm = block_mean(P, make_grid(4, 2, 2));
  EXPECT_EQ(bm, Matrix(2, 2, {0.5f, 0.0f, 0.0f, 0.5f}));
}

TEST(BlockMean, UniformCausalMatchesEnumeration) {
  for (std::size_t T : {4u, 7u, 33u})
    for (std::size_t b : {1u, 2u, 3u, 8u}) {
      Matrix P(T, T, 0.0f);
      for (std::size_t u = 0; u < T; ++u)
        for (std::size_t v = 0; v <= u; ++v) P(u, v) = 1.0f / static_cast<float>(u + 1);
      const auto g = make_grid(T, b, b);
      const Matrix got = block_mean(P, g);
      for (std::size_t q = 0; q < g.n_q; ++q)
        for (std::size_t r = 0; r < g.n_k; ++r) {
          double sum = 0.0;
          for (std::size_t m = 0; m < b; ++m)
            for (std::size_t n = 0; n < b; ++n) {
              const std::size_t u = q * b + m, v = r * b + n;
              if (u < T && v <= u) sum += P(u, v);
            }
          EXPECT_NEAR(got(q, r), sum / static_cast<double>(b * b), 1e-7) << T << " " << b << " " << q << " " << r;
        }
    }
}

TEST(BlockMean, RejectsUnnormalizedRows) {
  try {
    block_mean(Matrix(4, 4, 0.0f), make_grid(4, 2, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonNormalizedRows);
  }
}

}  // namespace
