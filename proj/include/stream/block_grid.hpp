#pragma once

// Padding, block partitioning and block-level mask reduction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stream/error.hpp"
#include "stream/matrix.hpp"

namespace stream {

struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
  bool empty() const noexcept { return end <= begin; }
};

// Token grid padded to a multiple of lcm(b_q, b_k) so that both block sizes
// tile it exactly. Padding tokens exist only inside this module's arithmetic.
struct BlockGrid {
  std::size_t T_orig = 0;
  std::size_t T_pad = 0;
  std::size_t b_q = 1;
  std::size_t b_k = 1;
  std::size_t n_q = 0;
  std::size_t n_k = 0;
  std::size_t extra = 0;

  // Query / key blocks holding at least one real token.
  std::size_t n_q_valid() const noexcept { return (T_orig + b_q - 1) / b_q; }
  std::size_t n_k_valid() const noexcept { return (T_orig + b_k - 1) / b_k; }

  // Real (non-padded) tokens of a block.
  TokenSpan query_tokens(std::size_t q) const noexcept {
    return {q * b_q, std::min((q + 1) * b_q, T_orig)};
  }
  TokenSpan key_tokens(std::size_t r) const noexcept {
    return {r * b_k, std::min((r + 1) * b_k, T_orig)};
  }

  friend bool operator==(const BlockGrid&, const BlockGrid&) = default;
};

inline BlockGrid make_grid(std::size_t T, std::size_t b_q, std::size_t b_k) {
  if (T < 1) throw Error(Errc::EmptyContext, "T must be >= 1");
  if (b_q < 1 || b_k < 1) throw Error(Errc::InvalidParams, "block sizes must be >= 1");
  const std::size_t ell = std::lcm(b_q, b_k);
  BlockGrid g;
  g.T_orig = T;
  g.T_pad = (T + ell - 1) / ell * ell;
  g.b_q = b_q;
  g.b_k = b_k;
  g.n_q = g.T_pad / b_q;
  g.n_k = g.T_pad / b_k;
  g.extra = g.T_pad - T;
  return g;
}

// Token-level attention mask C over the real tokens. Either the standard
// causal mask (v <= u) or an arbitrary T x T bit matrix.
class TokenMask {
 public:
  static TokenMask causal(std::size_t T) {
    TokenMask m;
    m.T_ = T;
    return m;
  }

  static TokenMask from_bits(std::size_t T, std::vector<std::uint8_t> bits) {
    if (bits.size() != T * T) throw Error(Errc::DimensionMismatch, "token mask must have T*T entries");
    TokenMask m;
    m.T_ = T;
    m.bits_ = std::move(bits);
    return m;
  }

  std::size_t size() const noexcept { return T_; }
  bool is_causal() const noexcept { return bits_.empty(); }

  bool operator()(std::size_t u, std::size_t v) const noexcept {
    if (u >= T_ || v >= T_) return false;
    return bits_.empty() ? v <= u : bits_[u * T_ + v] != 0;
  }

  // Number of set pairs in the rectangle us x vs.
  std::uint64_t count(TokenSpan us, TokenSpan vs) const noexcept {
    std::uint64_t n = 0;
    for (std::size_t u = us.begin; u < us.end; ++u) {
      if (bits_.empty()) {
        const std::size_t hi = std::min(vs.end, u + 1);
        if (hi > vs.begin) n += hi - vs.begin;
      } else {
        for (std::size_t v = vs.begin; v < vs.end; ++v) n += (*this)(u, v);
      }
    }
    return n;
  }

 private:
  std::size_t T_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Block-level reduction of a token mask: bit (q, r) is set iff some real
// token pair inside query block q and key block r is set. Each row is kept
// as sorted, disjoint runs of set key blocks, so range queries are
// logarithmic and the causal case needs one run per row.
class BlockCausalMask {
 public:
  struct Run {
    std::size_t begin;
    std::size_t end;  // exclusive
  };

  BlockCausalMask() = default;

  const BlockGrid& grid() const noexcept { return grid_; }
  const TokenMask& tokens() const noexcept { return tokens_; }

  bool operator()(std::size_t q, std::size_t r) const noexcept {
    if (q >= rows_.size()) return false;
    const auto& runs = rows_[q];
    auto it = std::upper_bound(runs.begin(), runs.end(), r, [](std::size_t x, const Run& run) { return x < run.begin; });
    if (it == runs.begin()) return false;
    --it;
    return r < it->end;
  }

  // First set key block in the inclusive range [f, l].
  std::optional<std::size_t> first_valid(std::size_t q, std::size_t f, std::size_t l) const noexcept {
    if (q >= rows_.size() || f > l) return std::nullopt;
    const auto& runs = rows_[q];
    // first run whose end is beyond f
    auto it = std::upper_bound(runs.begin(), runs.end(), f, [](std::size_t x, const Run& run) { return x < run.end; });
    if (it == runs.end()) return std::nullopt;
    const std::size_t r = std::max(f, it->begin);
    if (r > l) return std::nullopt;
    return r;
  }

  std::size_t valid_count(std::size_t q) const noexcept {
    if (q >= rows_.size()) return 0;
    std::size_t n = 0;
    for (const auto& run : rows_[q]) n += run.end - run.begin;
    return n;
  }

  std::vector<std::size_t> valid_blocks(std::size_t q) const {
    std::vector<std::size_t> out;
    if (q >= rows_.size()) return out;
    for (const auto& run : rows_[q])
      for (std::size_t r = run.begin; r < run.end; ++r) out.push_back(r);
    return out;
  }

  // Dense n_q x n_k 0/1 view, for tests and small-scale inspection.
  std::vector<std::uint8_t> bits() const {
    std::vector<std::uint8_t> out(grid_.n_q * grid_.n_k, 0);
    for (std::size_t q = 0; q < rows_.size(); ++q)
      for (const auto& run : rows_[q])
        for (std::size_t r = run.begin; r < run.end; ++r) out[q * grid_.n_k + r] = 1;
    return out;
  }

 private:
  friend BlockCausalMask block_mask(const BlockGrid&, TokenMask);

  BlockGrid grid_;
  TokenMask tokens_;
  std::vector<std::vector<Run>> rows_;  // n_q rows
};

// Reduces `tokens` (over T_orig real tokens) onto the grid by block-max.
inline BlockCausalMask block_mask(const BlockGrid& grid, TokenMask tokens) {
  if (tokens.size() != grid.T_orig)
    throw Error(Errc::DimensionMismatch, "token mask covers " + std::to_string(tokens.size()) + " tokens, grid has " +
                                             std::to_string(grid.T_orig));
  BlockCausalMask m;
  m.grid_ = grid;
  m.rows_.assign(grid.n_q, {});
  for (std::size_t q = 0; q < grid.n_q_valid(); ++q) {
    const TokenSpan us = grid.query_tokens(q);
    auto& runs = m.rows_[q];
    if (tokens.is_causal()) {
      // key block r is reachable iff its first token precedes the block's last query
      const std::size_t last = (us.end - 1) / grid.b_k;
      runs.push_back({0, last + 1});
      continue;
    }
    for (std::size_t r = 0; r < grid.n_k_valid(); ++r) {
      const TokenSpan vs = grid.key_tokens(r);
      bool any = false;
      for (std::size_t u = us.begin; u < us.end && !any; ++u)
        for (std::size_t v = vs.begin; v < vs.end && !any; ++v) any = tokens(u, v);
      if (!any) continue;
      if (!runs.empty() && runs.back().end == r)
        runs.back().end = r + 1;
      else
        runs.push_back({r, r + 1});
    }
  }
  m.tokens_ = std::move(tokens);
  return m;
}

inline BlockCausalMask causal_block_mask(const BlockGrid& grid) { return block_mask(grid, TokenMask::causal(grid.T_orig)); }

// Block averages of a token-level probability matrix P (T_orig x T_orig).
// Each block is divided by the full b_q * b_k area; masked and padded pairs
// contribute zero. Rows of P must sum to 1 over their valid entries.
inline Matrix block_mean(const Matrix& P, const BlockCausalMask& mask) {
  const BlockGrid& g = mask.grid();
  const TokenMask& tok = mask.tokens();
  if (P.rows() != g.T_orig || P.cols() != g.T_orig)
    throw Error(Errc::DimensionMismatch, "P must be T x T with T = " + std::to_string(g.T_orig));
  for (std::size_t u = 0; u < g.T_orig; ++u) {
    double sum = 0.0;
    bool any = false;
    for (std::size_t v = 0; v < g.T_orig; ++v) {
      if (!tok(u, v)) continue;
      any = true;
      sum += P(u, v);
    }
    if (any && std::abs(sum - 1.0) > 1e-3)
      throw Error(Errc::NonNormalizedRows, "row " + std::to_string(u) + " sums to " + std::to_string(sum));
  }
  Matrix out(g.n_q, g.n_k, 0.0f);
  const double area = static_cast<double>(g.b_q * g.b_k);
  for (std::size_t q = 0; q < g.n_q_valid(); ++q) {
    const TokenSpan us = g.query_tokens(q);
    for (std::size_t r = 0; r < g.n_k_valid(); ++r) {
      if (!mask(q, r)) continue;
      const TokenSpan vs = g.key_tokens(r);
      double sum = 0.0;
      for (std::size_t u = us.begin; u < us.end; ++u)
        for (std::size_t v = vs.begin; v < vs.end; ++v)
          if (tok(u, v)) sum += P(u, v);
      out(q, r) = static_cast<float>(sum / area);
    }
  }
  return out;
}

inline Matrix block_mean(const Matrix& P, const BlockGrid& grid) { return block_mean(P, causal_block_mask(grid)); }

}  // namespace stream
