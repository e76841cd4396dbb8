#pragma once

// Hierarchical top-k block mask estimation with causal-mask gating, and the
// sparse score / softmax application of the resulting mask.
//
// For each query block the key-block axis is split into k branch ranges.
// Every iteration bisects each surviving range, scores each half by its first
// valid key block (max token-level dot product against the query block), and
// keeps the k best halves. Ranges shrink to single blocks after
// ceil(log2(ceil(n_k / k))) iterations; the surviving blocks form the row.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stream/block_grid.hpp"
#include "stream/error.hpp"
#include "stream/matrix.hpp"

namespace stream {

inline constexpr float kNegInf = -std::numeric_limits<float>::infinity();

struct StreamParams {
  std::size_t b_q = 32;
  std::size_t b_k = 32;
  std::size_t k = 8;
  // Top-r approximation constant. Accepted and reported, never read.
  std::optional<std::size_t> r_top;
};

// Throws InvalidParams on hard violations; returns advisory warnings.
inline std::vector<std::string> validate_params(const StreamParams& p, const BlockGrid& grid) {
  if (p.b_q != grid.b_q || p.b_k != grid.b_k)
    throw Error(Errc::InvalidParams, "block sizes do not match the grid");
  if (p.k < 1 || p.k > grid.n_k)
    throw Error(Errc::InvalidParams,
                "k must satisfy 1 <= k <= n_k (k=" + std::to_string(p.k) + ", n_k=" + std::to_string(grid.n_k) + ")");
  std::vector<std::string> warnings;
  if (p.r_top) warnings.push_back("top-r constant r=" + std::to_string(*p.r_top) + " is accepted but has no effect");
  return warnings;
}

struct SparseBlockMask {
  BlockGrid grid;
  std::size_t k = 0;
  // One row per non-padded query block: sorted, unique key-block indices.
  std::vector<std::vector<std::size_t>> rows;
  // Representative score of each selected block, aligned with rows.
  std::optional<std::vector<std::vector<float>>> scores;

  friend bool operator==(const SparseBlockMask&, const SparseBlockMask&) = default;
};

struct EstimateStats {
  std::size_t iterations = 0;           // bisection rounds per row
  std::size_t score_calls = 0;          // representative scores computed during bisection
  std::size_t max_row_score_calls = 0;  // worst single row
  std::size_t emission_score_calls = 0; // scores computed only to label rows when no bisection ran
};

inline std::size_t ceil_log2(std::size_t x) {
  std::size_t n = 0;
  while ((std::size_t{1} << n) < x) ++n;
  return n;
}

inline std::size_t stream_iterations(std::size_t n_k, std::size_t k) {
  return ceil_log2(std::max<std::size_t>(1, (n_k + k - 1) / k));
}

// Max over set bits (u, v) of <Q_u, K_v>. Unscaled: rank-equivalent to the
// softmax-scaled score and cheaper.
inline float representative_score(const Matrix& q_block, const Matrix& k_block, std::span<const std::uint8_t> bits) {
  if (q_block.cols() != k_block.cols()) throw Error(Errc::DimensionMismatch, "query/key head dims differ");
  if (bits.size() != q_block.rows() * k_block.rows())
    throw Error(Errc::DimensionMismatch, "bits must be b_q x b_k");
  float best = kNegInf;
  bool any = false;
  for (std::size_t m = 0; m < q_block.rows(); ++m)
    for (std::size_t n = 0; n < k_block.rows(); ++n) {
      if (!bits[m * k_block.rows() + n]) continue;
      const float s = dot(q_block.row(m), k_block.row(n));
      if (!any || s > best) best = s;
      any = true;
    }
  if (!any) throw Error(Errc::NoValidPair, "block pair has no valid token pair");
  return best;
}

// Score of key block r for query block q over the valid token pairs.
inline float block_pair_score(const Matrix& Q, const Matrix& K, const BlockCausalMask& mask, std::size_t q,
                              std::size_t r) {
  const BlockGrid& g = mask.grid();
  const TokenMask& tok = mask.tokens();
  const TokenSpan us = g.query_tokens(q), vs = g.key_tokens(r);
  float best = kNegInf;
  bool any = false;
  for (std::size_t u = us.begin; u < us.end; ++u) {
    const auto qu = Q.row(u);
    const std::size_t v_end = tok.is_causal() ? std::min(vs.end, u + 1) : vs.end;
    for (std::size_t v = vs.begin; v < v_end; ++v) {
      if (!tok(u, v)) continue;
      const float s = dot(qu, K.row(v));
      if (!any || s > best) best = s;
      any = true;
    }
  }
  if (!any) throw Error(Errc::NoValidPair, "block pair (" + std::to_string(q) + ", " + std::to_string(r) + ") has no valid token pair");
  return best;
}

namespace detail {

inline void check_inputs(const Matrix& Q, const Matrix& K, const BlockGrid& g) {
  if (Q.rows() == 0 || g.T_orig == 0) throw Error(Errc::EmptyContext, "no tokens");
  if (Q.cols() != K.cols()) throw Error(Errc::DimensionMismatch, "Q and K head dims differ");
  if (Q.rows() != g.T_orig || K.rows() != g.T_orig)
    throw Error(Errc::DimensionMismatch, "Q/K rows (" + std::to_string(Q.rows()) + ", " + std::to_string(K.rows()) +
                                             ") do not match T = " + std::to_string(g.T_orig));
}

// Ordering key for branch selection: higher score first, then lower first
// index, then lower branch position. NaN scores rank with -inf.
struct BranchKey {
  float score;
  std::size_t first;
  std::size_t pos;

  static float norm(float s) { return std::isnan(s) ? kNegInf : s; }

  bool before(const BranchKey& o) const {
    const float a = norm(score), b = norm(o.score);
    if (a != b) return a > b;
    if (first != o.first) return first < o.first;
    return pos < o.pos;
  }
};

}  // namespace detail

// k initial ranges tiling [0, n_k): range j = [floor(j n_k / k), floor((j+1) n_k / k) - 1].
inline std::vector<std::pair<std::size_t, std::size_t>> initial_ranges(std::size_t n_k, std::size_t k) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j) out.emplace_back(j * n_k / k, (j + 1) * n_k / k - 1);
  return out;
}

inline SparseBlockMask estimate_mask(const Matrix& Q, const Matrix& K, const BlockCausalMask& mask,
                                     const StreamParams& params, EstimateStats* stats = nullptr) {
  const BlockGrid& g = mask.grid();
  detail::check_inputs(Q, K, g);
  validate_params(params, g);

  const std::size_t k = params.k;
  const std::size_t n_it = stream_iterations(g.n_k, k);
  const auto init = initial_ranges(g.n_k, k);

  struct Node {
    std::size_t f, l;  // inclusive; empty when f > l
    std::optional<std::size_t> rep;
    float score;
  };
  struct Branch {
    Node node;
    detail::BranchKey key;
  };

  SparseBlockMask out;
  out.grid = g;
  out.k = k;
  out.rows.resize(g.n_q_valid());
  std::vector<std::vector<float>> scores(g.n_q_valid());
  EstimateStats st;
  st.iterations = n_it;

  std::vector<Node> nodes;
  std::vector<Branch> branches;
  std::vector<std::size_t> order;
  for (std::size_t q = 0; q < g.n_q_valid(); ++q) {
    nodes.clear();
    for (auto [f, l] : init) nodes.push_back({f, l, std::nullopt, kNegInf});
    std::size_t row_calls = 0;

    auto score_branch = [&](std::size_t f, std::size_t l, const Node& parent) -> Node {
      Node b{f, l, mask.first_valid(q, f, l), kNegInf};
      if (!b.rep) return b;
      if (parent.rep && *parent.rep == *b.rep) {
        b.score = parent.score;  // same representative as the parent range
      } else {
        b.score = block_pair_score(Q, K, mask, q, *b.rep);
        ++row_calls;
      }
      return b;
    };

    for (std::size_t it = 0; it < n_it; ++it) {
      branches.clear();
      for (const Node& n : nodes) {
        const std::size_t m = (n.f + n.l) / 2;
        const Node left = score_branch(n.f, m, n);
        // a single-block range keeps itself on the left; the right half is empty
        const Node right = n.f == n.l ? Node{m + 1, n.l, std::nullopt, kNegInf} : score_branch(m + 1, n.l, n);
        branches.push_back({left, {left.score, left.f, branches.size()}});
        branches.push_back({right, {right.score, right.f, branches.size()}});
      }
      order.resize(branches.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t a, std::size_t b) { return branches[a].key.before(branches[b].key); });
      order.resize(k);
      std::sort(order.begin(), order.end());
      nodes.clear();
      for (std::size_t i : order) nodes.push_back(branches[i].node);
    }

    std::vector<std::pair<std::size_t, float>> picked;
    for (const Node& n : nodes) {
      const auto r = mask.first_valid(q, n.f, n.l);
      if (!r) continue;
      float s = n.score;
      if (n_it == 0) {
        s = block_pair_score(Q, K, mask, q, *r);
        ++st.emission_score_calls;
      }
      picked.emplace_back(*r, s);
    }
    std::sort(picked.begin(), picked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto [r, s] : picked) {
      out.rows[q].push_back(r);
      scores[q].push_back(s);
    }
    st.score_calls += row_calls;
    st.max_row_score_calls = std::max(st.max_row_score_calls, row_calls);
  }
  out.scores = std::move(scores);
  if (stats) *stats = st;
  return out;
}

// Checks the structural invariants of a mask against its block mask:
// cardinality min(k, valid), validity, sortedness and uniqueness.
inline void check_mask(const SparseBlockMask& m, const BlockCausalMask& bm) {
  const BlockGrid& g = bm.grid();
  if (!(m.grid == g)) throw Error(Errc::GridMismatch, "mask grid differs from block mask grid");
  if (m.rows.size() != g.n_q_valid()) throw Error(Errc::GridMismatch, "row count differs from non-padded query blocks");
  if (m.scores && m.scores->size() != m.rows.size()) throw Error(Errc::GridMismatch, "scores misaligned with rows");
  for (std::size_t q = 0; q < m.rows.size(); ++q) {
    const auto& row = m.rows[q];
    const std::size_t want = std::min(m.k, bm.valid_count(q));
    if (row.size() != want)
      throw Error(Errc::InvalidParams, "row " + std::to_string(q) + " has " + std::to_string(row.size()) +
                                           " blocks, expected " + std::to_string(want));
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0 && row[i] <= row[i - 1]) throw Error(Errc::InvalidParams, "row " + std::to_string(q) + " not sorted/unique");
      if (!bm(q, row[i])) throw Error(Errc::InvalidParams, "row " + std::to_string(q) + " selects masked block " + std::to_string(row[i]));
    }
    if (m.scores && (*m.scores)[q].size() != row.size()) throw Error(Errc::GridMismatch, "scores misaligned with rows");
  }
}

// Score/probability tiles for the selected (query block, key block) pairs.
// Tile values are b_q x b_k row-major; `present` marks valid real pairs.
struct SparseTile {
  std::size_t q = 0;
  std::size_t r = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> present;
};

struct SparseAttention {
  BlockGrid grid;
  std::vector<SparseTile> tiles;       // grouped by q, ascending r
  std::vector<std::size_t> row_begin;  // tiles of query block q: [row_begin[q], row_begin[q+1])

  std::size_t live_entries() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tiles) n += t.values.size();
    return n;
  }

  std::optional<float> at(std::size_t u, std::size_t v) const {
    if (u >= grid.T_orig || v >= grid.T_orig) return std::nullopt;
    const std::size_t q = u / grid.b_q, r = v / grid.b_k;
    if (q + 1 >= row_begin.size()) return std::nullopt;
    for (std::size_t i = row_begin[q]; i < row_begin[q + 1]; ++i) {
      const auto& t = tiles[i];
      if (t.r != r) continue;
      const std::size_t idx = (u - q * grid.b_q) * grid.b_k + (v - r * grid.b_k);
      if (t.present[idx]) return t.values[idx];
      return std::nullopt;
    }
    return std::nullopt;
  }
};

// Materializes 1/sqrt(d)-scaled scores for the selected blocks only.
inline SparseAttention apply_mask(const Matrix& Q, const Matrix& K, const SparseBlockMask& m, const BlockCausalMask& bm) {
  const BlockGrid& g = bm.grid();
  detail::check_inputs(Q, K, g);
  if (!(m.grid == g) || m.rows.size() != g.n_q_valid()) throw Error(Errc::GridMismatch, "mask does not match grid");
  const float scale = 1.0f / std::sqrt(static_cast<float>(Q.cols()));
  const TokenMask& tok = bm.tokens();
  SparseAttention out;
  out.grid = g;
  out.row_begin.push_back(0);
  for (std::size_t q = 0; q < m.rows.size(); ++q) {
    const TokenSpan us = g.query_tokens(q);
    for (std::size_t r : m.rows[q]) {
      if (r >= g.n_k) throw Error(Errc::GridMismatch, "key block index out of range");
      const TokenSpan vs = g.key_tokens(r);
      SparseTile t{q, r, std::vector<float>(g.b_q * g.b_k, kNegInf), std::vector<std::uint8_t>(g.b_q * g.b_k, 0)};
      for (std::size_t u = us.begin; u < us.end; ++u)
        for (std::size_t v = vs.begin; v < vs.end; ++v) {
          if (!tok(u, v)) continue;
          const std::size_t idx = (u - us.begin) * g.b_k + (v - vs.begin);
          t.values[idx] = dot(Q.row(u), K.row(v)) * scale;
          t.present[idx] = 1;
        }
      out.tiles.push_back(std::move(t));
    }
    out.row_begin.push_back(out.tiles.size());
  }
  return out;
}

inline SparseAttention apply_mask(const Matrix& Q, const Matrix& K, const SparseBlockMask& m) {
  return apply_mask(Q, K, m, causal_block_mask(m.grid));
}

// Row-wise softmax over present entries; absent entries become 0.
inline SparseAttention masked_softmax(const SparseAttention& scores) {
  const BlockGrid& g = scores.grid;
  SparseAttention out = scores;
  for (std::size_t q = 0; q + 1 < scores.row_begin.size(); ++q) {
    const std::size_t t0 = scores.row_begin[q], t1 = scores.row_begin[q + 1];
    const TokenSpan us = g.query_tokens(q);
    for (std::size_t u = us.begin; u < us.end; ++u) {
      const std::size_t m = u - us.begin;
      float mx = kNegInf;
      bool any = false;
      for (std::size_t i = t0; i < t1; ++i)
        for (std::size_t n = 0; n < g.b_k; ++n) {
          const std::size_t idx = m * g.b_k + n;
          if (!scores.tiles[i].present[idx]) continue;
          mx = any ? std::max(mx, scores.tiles[i].values[idx]) : scores.tiles[i].values[idx];
          any = true;
        }
      if (!any) throw Error(Errc::EmptyRow, "token " + std::to_string(u) + " has no selected entries");
      double sum = 0.0;
      for (std::size_t i = t0; i < t1; ++i)
        for (std::size_t n = 0; n < g.b_k; ++n) {
          const std::size_t idx = m * g.b_k + n;
          if (scores.tiles[i].present[idx]) sum += std::exp(static_cast<double>(scores.tiles[i].values[idx]) - mx);
        }
      for (std::size_t i = t0; i < t1; ++i)
        for (std::size_t n = 0; n < g.b_k; ++n) {
          const std::size_t idx = m * g.b_k + n;
          auto& t = out.tiles[i];
          t.values[idx] = t.present[idx]
                              ? static_cast<float>(std::exp(static_cast<double>(scores.tiles[i].values[idx]) - mx) / sum)
                              : 0.0f;
        }
    }
    // padded query rows carry no probability mass
    for (std::size_t i = t0; i < t1; ++i)
      for (std::size_t m = us.size(); m < g.b_q; ++m)
        for (std::size_t n = 0; n < g.b_k; ++n) out.tiles[i].values[m * g.b_k + n] = 0.0f;
  }
  return out;
}

// Mask JSON: {"T","b_q","b_k","k","rows","scores"}; rows ordered by query
// block with padded rows omitted.
inline nlohmann::ordered_json mask_to_json(const SparseBlockMask& m) {
  nlohmann::ordered_json j;
  j["T"] = m.grid.T_orig;
  j["b_q"] = m.grid.b_q;
  j["b_k"] = m.grid.b_k;
  j["k"] = m.k;
  j["rows"] = m.rows;
  if (m.scores)
    j["scores"] = *m.scores;
  else
    j["scores"] = nullptr;
  return j;
}

inline SparseBlockMask mask_from_json(const nlohmann::json& j) {
  SparseBlockMask m;
  try {
    m.grid = make_grid(j.at("T").get<std::size_t>(), j.at("b_q").get<std::size_t>(), j.at("b_k").get<std::size_t>());
    m.k = j.at("k").get<std::size_t>();
    m.rows = j.at("rows").get<std::vector<std::vector<std::size_t>>>();
    if (j.contains("scores") && !j["scores"].is_null()) {
      std::vector<std::vector<float>> scores;
      for (const auto& row : j["scores"]) {
        auto& out = scores.emplace_back();
        for (const auto& v : row) out.push_back(v.is_null() ? std::numeric_limits<float>::quiet_NaN() : v.get<float>());
      }
      m.scores = std::move(scores);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidParams, std::string("mask json: ") + e.what());
  }
  if (m.rows.size() != m.grid.n_q_valid()) throw Error(Errc::GridMismatch, "mask json: row count does not match T / b_q");
  for (const auto& row : m.rows)
    for (std::size_t i = 0; i < row.size(); ++i)
      if (row[i] >= m.grid.n_k || (i > 0 && row[i] <= row[i - 1]))
        throw Error(Errc::GridMismatch, "mask json: rows must hold sorted unique key-block indices < n_k");
  if (m.scores) {
    if (m.scores->size() != m.rows.size()) throw Error(Errc::GridMismatch, "mask json: scores misaligned");
    for (std::size_t q = 0; q < m.rows.size(); ++q)
      if ((*m.scores)[q].size() != m.rows[q].size()) throw Error(Errc::GridMismatch, "mask json: scores misaligned");
  }
  return m;
}

}  // namespace stream
