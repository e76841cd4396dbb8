#pragma once

// Block-level analytics: vertical attention profiles, kurtosis, receiver
// head ranking, effective sparsity and pruning statistics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stream/block_grid.hpp"
#include "stream/error.hpp"
#include "stream/matrix.hpp"
#include "stream/stream_estimator.hpp"
#include "stream/tensor_store.hpp"

namespace stream {

enum class ProfileSource { block_mean, mask_frequency, mask_score };

inline std::string_view to_string(ProfileSource s) {
  switch (s) {
    case ProfileSource::block_mean: return "block_mean";
    case ProfileSource::mask_frequency: return "mask_frequency";
    case ProfileSource::mask_score: return "mask_score";
  }
  return "?";
}

inline std::optional<ProfileSource> parse_profile_source(std::string_view s) {
  if (s == "block_mean") return ProfileSource::block_mean;
  if (s == "mask_frequency") return ProfileSource::mask_frequency;
  if (s == "mask_score") return ProfileSource::mask_score;
  return std::nullopt;
}

struct VerticalProfile {
  HeadId head;
  ProfileSource source = ProfileSource::mask_frequency;
  std::vector<double> values;     // one per non-padded key block
  std::optional<double> kurtosis; // excess; absent when degenerate
};

// Excess kurtosis m4 / m2^2 - 3 with population moments.
inline double excess_kurtosis(std::span<const double> v) {
  if (v.size() < 4) throw Error(Errc::DegenerateDistribution, "kurtosis needs at least 4 values");
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double c = x - mean;
    const double c2 = c * c;
    m2 += c2;
    m4 += c2 * c2;
  }
  m2 /= n;
  m4 /= n;
  // relative threshold: a constant vector can leave rounding residue in m2
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (!(m2 > 0.0) || m2 <= 1e-24 * scale * scale) throw Error(Errc::DegenerateDistribution, "zero variance");
  return m4 / (m2 * m2) - 3.0;
}

namespace detail {

inline std::optional<double> try_kurtosis(std::span<const double> v) {
  try {
    return excess_kurtosis(v);
  } catch (const Error&) {
    return std::nullopt;
  }
}

// Per-column average over the non-padded query rows that may attend to the
// column; `cell(q, r)` supplies the per-row contribution.
template <typename Cell>
std::vector<double> column_average(const BlockCausalMask& bm, Cell&& cell) {
  const BlockGrid& g = bm.grid();
  std::vector<double> sum(g.n_k_valid(), 0.0);
  std::vector<std::size_t> rows(g.n_k_valid(), 0);
  for (std::size_t q = 0; q < g.n_q_valid(); ++q)
    for (std::size_t r = 0; r < g.n_k_valid(); ++r) {
      if (!bm(q, r)) continue;
      ++rows[r];
      sum[r] += cell(q, r);
    }
  for (std::size_t r = 0; r < sum.size(); ++r) sum[r] = rows[r] ? sum[r] / static_cast<double>(rows[r]) : 0.0;
  return sum;
}

}  // namespace detail

// Profile from an n_q x n_k block-mean matrix.
inline VerticalProfile vertical_profile(const Matrix& block_means, const BlockCausalMask& bm, HeadId head = {}) {
  const BlockGrid& g = bm.grid();
  if (block_means.rows() != g.n_q || block_means.cols() != g.n_k)
    throw Error(Errc::GridMismatch, "block mean matrix must be n_q x n_k");
  VerticalProfile p;
  p.head = head;
  p.source = ProfileSource::block_mean;
  p.values = detail::column_average(bm, [&](std::size_t q, std::size_t r) { return static_cast<double>(block_means(q, r)); });
  p.kurtosis = detail::try_kurtosis(p.values);
  return p;
}

// Profile from a sparse mask. mask_frequency: fraction of attending query
// blocks that select the column. mask_score: average over attending rows of
// exp(s - row max) for selected blocks, so each row's best block weighs 1.
inline VerticalProfile vertical_profile(const SparseBlockMask& m, ProfileSource mode, const BlockCausalMask& bm,
                                        HeadId head = {}) {
  const BlockGrid& g = bm.grid();
  if (!(m.grid == g) || m.rows.size() != g.n_q_valid()) throw Error(Errc::GridMismatch, "mask does not match grid");
  if (mode == ProfileSource::block_mean) throw Error(Errc::InvalidParams, "block_mean profiles need a block-mean matrix");
  if (mode == ProfileSource::mask_score && !m.scores) throw Error(Errc::InvalidParams, "mask carries no scores");

  std::vector<std::vector<double>> weight(m.rows.size());
  for (std::size_t q = 0; q < m.rows.size(); ++q) {
    const auto& row = m.rows[q];
    if (mode == ProfileSource::mask_frequency) {
      weight[q].assign(row.size(), 1.0);
      continue;
    }
    const auto& sc = (*m.scores)[q];
    double mx = -std::numeric_limits<double>::infinity();
    for (float s : sc)
      if (std::isfinite(s)) mx = std::max(mx, static_cast<double>(s));
    for (float s : sc) weight[q].push_back(std::isfinite(s) ? std::exp(static_cast<double>(s) - mx) : 0.0);
  }
  VerticalProfile p;
  p.head = head;
  p.source = mode;
  p.values = detail::column_average(bm, [&](std::size_t q, std::size_t r) {
    const auto& row = m.rows[q];
    const auto it = std::lower_bound(row.begin(), row.end(), r);
    if (it == row.end() || *it != r) return 0.0;
    return weight[q][static_cast<std::size_t>(it - row.begin())];
  });
  p.kurtosis = detail::try_kurtosis(p.values);
  return p;
}

inline VerticalProfile vertical_profile(const SparseBlockMask& m, ProfileSource mode, HeadId head = {}) {
  return vertical_profile(m, mode, causal_block_mask(m.grid), head);
}

// Block means of the full softmax attention computed one query row at a
// time: O(T^2 d) work, O(T + n_q n_k) memory. Equals block_mean of the dense
// softmax matrix.
inline Matrix streaming_block_mean(const Matrix& Q, const Matrix& K, const BlockCausalMask& bm) {
  const BlockGrid& g = bm.grid();
  detail::check_inputs(Q, K, g);
  const TokenMask& tok = bm.tokens();
  const float scale = 1.0f / std::sqrt(static_cast<float>(Q.cols()));
  std::vector<double> acc(g.n_q * g.n_k, 0.0);
  std::vector<float> row(g.T_orig);
  for (std::size_t u = 0; u < g.T_orig; ++u) {
    float mx = kNegInf;
    bool any = false;
    for (std::size_t v = 0; v < g.T_orig; ++v) {
      if (!tok(u, v)) continue;
      row[v] = dot(Q.row(u), K.row(v)) * scale;
      mx = any ? std::max(mx, row[v]) : row[v];
      any = true;
    }
    if (!any) continue;
    double sum = 0.0;
    for (std::size_t v = 0; v < g.T_orig; ++v)
      if (tok(u, v)) sum += std::exp(static_cast<double>(row[v]) - mx);
    const std::size_t q = u / g.b_q;
    for (std::size_t v = 0; v < g.T_orig; ++v)
      if (tok(u, v)) acc[q * g.n_k + v / g.b_k] += static_cast<double>(static_cast<float>(std::exp(static_cast<double>(row[v]) - mx) / sum));
  }
  Matrix out(g.n_q, g.n_k, 0.0f);
  const double area = static_cast<double>(g.b_q * g.b_k);
  for (std::size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i] / area);
  return out;
}

struct ReceiverRank {
  HeadId head;
  std::optional<double> kurtosis;  // absent for degenerate profiles (ranked last)
};

// Descending kurtosis; degenerate heads last; ties by (layer, head).
inline std::vector<ReceiverRank> rank_receiver_heads(std::span<const VerticalProfile> profiles) {
  std::vector<ReceiverRank> out;
  bool any = false;
  for (const auto& p : profiles) {
    out.push_back({p.head, p.kurtosis});
    any = any || p.kurtosis.has_value();
  }
  if (!any) throw Error(Errc::NoValidProfiles, "every profile is degenerate");
  std::sort(out.begin(), out.end(), [](const ReceiverRank& a, const ReceiverRank& b) {
    if (a.kurtosis.has_value() != b.kurtosis.has_value()) return a.kurtosis.has_value();
    if (a.kurtosis && *a.kurtosis != *b.kurtosis) return *a.kurtosis > *b.kurtosis;
    return a.head < b.head;
  });
  return out;
}

// k = floor(1 + (T / b_q - 1) * s), clamped to [1, floor(T / b_q)].
inline std::size_t effective_k(std::size_t T, std::size_t b_q, double s) {
  if (!(s > 0.0 && s < 1.0)) throw Error(Errc::SparsityOutOfRange, "s must lie in (0, 1)");
  if (b_q < 1) throw Error(Errc::InvalidParams, "b_q must be >= 1");
  const double ratio = static_cast<double>(T) / static_cast<double>(b_q);
  const double raw = std::floor(1.0 + (ratio - 1.0) * s);
  const double hi = std::max(1.0, std::floor(ratio));
  return static_cast<std::size_t>(std::clamp(raw, 1.0, hi));
}

struct SparsityStats {
  std::size_t T = 0;
  std::size_t b_q = 0;
  std::size_t b_k = 0;
  std::size_t k = 0;
  std::uint64_t selected_pairs = 0;
  std::uint64_t valid_pairs = 0;
  double pruned_fraction = 0.0;  // 1 - selected / valid
};

inline SparsityStats sparsity_stats(const SparseBlockMask& m, const BlockCausalMask& bm) {
  const BlockGrid& g = bm.grid();
  if (!(m.grid == g) || m.rows.size() != g.n_q_valid()) throw Error(Errc::GridMismatch, "mask does not match grid");
  SparsityStats st{g.T_orig, g.b_q, g.b_k, m.k, 0, 0, 0.0};
  const TokenMask& tok = bm.tokens();
  for (std::size_t q = 0; q < m.rows.size(); ++q) {
    const TokenSpan us = g.query_tokens(q);
    if (m.rows[q].empty() && bm.valid_count(q) > 0)
      throw Error(Errc::InvalidParams, "row " + std::to_string(q) + " is empty but has valid key blocks");
    for (std::size_t r : m.rows[q]) st.selected_pairs += tok.count(us, g.key_tokens(r));
  }
  if (tok.is_causal()) {
    st.valid_pairs = static_cast<std::uint64_t>(g.T_orig) * (g.T_orig + 1) / 2;
  } else {
    st.valid_pairs = tok.count({0, g.T_orig}, {0, g.T_orig});
  }
  st.pruned_fraction = st.valid_pairs ? 1.0 - static_cast<double>(st.selected_pairs) / static_cast<double>(st.valid_pairs) : 0.0;
  return st;
}

inline SparsityStats sparsity_stats(const SparseBlockMask& m) { return sparsity_stats(m, causal_block_mask(m.grid)); }

}  // namespace stream
