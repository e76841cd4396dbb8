#pragma once

// Quadratic reference implementations used to validate the estimator.
// Deliberately slow and obvious: nothing here should be clever.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stream/block_grid.hpp"
#include "stream/error.hpp"
#include "stream/matrix.hpp"
#include "stream/stream_estimator.hpp"

namespace stream {

struct OracleLimits {
  std::size_t max_T = 4096;
};

namespace detail {

inline void guard(std::size_t T, const OracleLimits& lim) {
  if (T > lim.max_T)
    throw Error(Errc::ContextTooLarge, "T = " + std::to_string(T) + " exceeds dense limit " + std::to_string(lim.max_T));
}

}  // namespace detail

// T x T scores scaled by 1/sqrt(d); masked-out entries are -inf.
inline Matrix dense_scores(const Matrix& Q, const Matrix& K, const TokenMask& mask, const OracleLimits& lim = {}) {
  detail::guard(Q.rows(), lim);
  if (Q.cols() != K.cols() || Q.rows() != K.rows() || mask.size() != Q.rows())
    throw Error(Errc::DimensionMismatch, "Q, K and mask disagree on shape");
  const std::size_t T = Q.rows();
  const float scale = 1.0f / std::sqrt(static_cast<float>(Q.cols()));
  Matrix S(T, T, kNegInf);
  for (std::size_t u = 0; u < T; ++u)
    for (std::size_t v = 0; v < T; ++v)
      if (mask(u, v)) S(u, v) = dot(Q.row(u), K.row(v)) * scale;
  return S;
}

// Exact block top-k: per query block, the k valid key blocks with the largest
// block-max dot product, ties to the lower block index.
inline SparseBlockMask exact_topk_mask(const Matrix& Q, const Matrix& K, const BlockCausalMask& mask, std::size_t k,
                                       const OracleLimits& lim = {}) {
  const BlockGrid& g = mask.grid();
  detail::guard(g.T_orig, lim);
  detail::check_inputs(Q, K, g);
  if (k < 1) throw Error(Errc::InvalidParams, "k must be >= 1");
  const TokenMask& tok = mask.tokens();

  SparseBlockMask out;
  out.grid = g;
  out.k = k;
  out.rows.resize(g.n_q_valid());
  std::vector<std::vector<float>> scores(g.n_q_valid());
  for (std::size_t q = 0; q < g.n_q_valid(); ++q) {
    std::vector<std::pair<float, std::size_t>> cand;
    for (std::size_t r = 0; r < g.n_k; ++r) {
      std::optional<float> best;
      for (std::size_t u = q * g.b_q; u < (q + 1) * g.b_q; ++u)
        for (std::size_t v = r * g.b_k; v < (r + 1) * g.b_k; ++v) {
          if (!tok(u, v)) continue;
          const float s = dot(Q.row(u), K.row(v));
          if (!best || s > *best) best = s;
        }
      if (best) cand.emplace_back(*best, r);
    }
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    if (cand.size() > k) cand.resize(k);
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    for (auto [s, r] : cand) {
      out.rows[q].push_back(r);
      scores[q].push_back(s);
    }
  }
  out.scores = std::move(scores);
  return out;
}

// Loop-for-loop transcription of the masked hierarchical estimator over a
// padded, fully materialized token mask. Same conventions as estimate_mask:
// bisection into [f, m] and [m+1, l]; single-block ranges keep themselves on
// the left; ties go to the lower first index, then the earlier branch.
inline SparseBlockMask naive_stream_reference(const Matrix& Q, const Matrix& K, const BlockCausalMask& mask,
                                              const StreamParams& params, const OracleLimits& lim = {}) {
  const BlockGrid& g = mask.grid();
  detail::guard(g.T_orig, lim);
  detail::check_inputs(Q, K, g);
  validate_params(params, g);
  const std::size_t T = g.T_pad, d = Q.cols(), b_q = g.b_q, b_k = g.b_k, k = params.k;
  const std::size_t n_q = T / b_q, n_k = T / b_k;

  // pad Q, K and C with zeros
  Matrix Qp(T, d, 0.0f), Kp(T, d, 0.0f);
  for (std::size_t u = 0; u < g.T_orig; ++u)
    for (std::size_t c = 0; c < d; ++c) {
      Qp(u, c) = Q(u, c);
      Kp(u, c) = K(u, c);
    }
  std::vector<std::uint8_t> C(T * T, 0);
  for (std::size_t u = 0; u < g.T_orig; ++u)
    for (std::size_t v = 0; v < g.T_orig; ++v) C[u * T + v] = mask.tokens()(u, v) ? 1 : 0;

  // block-max reduction
  std::vector<std::uint8_t> Cblk(n_q * n_k, 0);
  for (std::size_t q = 0; q < n_q; ++q)
    for (std::size_t r = 0; r < n_k; ++r)
      for (std::size_t m = 0; m < b_q; ++m)
        for (std::size_t n = 0; n < b_k; ++n)
          if (C[(q * b_q + m) * T + r * b_k + n]) Cblk[q * n_k + r] = 1;

  const std::size_t n_it = stream_iterations(n_k, k);

  auto score = [&](std::size_t q, std::size_t r) {
    float s = kNegInf;
    bool any = false;
    for (std::size_t m = 0; m < b_q; ++m)
      for (std::size_t n = 0; n < b_k; ++n) {
        if (!C[(q * b_q + m) * T + r * b_k + n]) continue;
        const float x = dot(Qp.row(q * b_q + m), Kp.row(r * b_k + n));
        if (!any || x > s) s = x;
        any = true;
      }
    return s;
  };

  SparseBlockMask out;
  out.grid = g;
  out.k = k;
  out.rows.resize(g.n_q_valid());
  std::vector<std::vector<float>> scores(g.n_q_valid());

  for (std::size_t q = 0; q < n_q; ++q) {
    std::vector<long long> f(k), l(k);
    std::vector<float> node_score(k, kNegInf);
    for (std::size_t j = 0; j < k; ++j) {
      f[j] = static_cast<long long>(j * n_k / k);
      l[j] = static_cast<long long>((j + 1) * n_k / k) - 1;
    }
    for (std::size_t i = 0; i < n_it; ++i) {
      std::vector<long long> bf(2 * k), bl(2 * k);
      for (std::size_t j = 0; j < k; ++j) {
        const long long m = (f[j] + l[j]) / 2;
        bf[2 * j] = f[j];
        bl[2 * j] = m;
        bf[2 * j + 1] = m + 1;
        bl[2 * j + 1] = l[j];
      }
      std::vector<float> s(2 * k, kNegInf);
      for (std::size_t h = 0; h < 2 * k; ++h) {
        int omega = 0;
        for (long long r = bf[h]; r <= bl[h]; ++r) omega = std::max<int>(omega, Cblk[q * n_k + r]);
        if (omega == 0) {
          s[h] = kNegInf;
          continue;
        }
        long long rep = bf[h];
        while (!Cblk[q * n_k + rep]) ++rep;
        s[h] = score(q, static_cast<std::size_t>(rep));
      }
      // pick top-k by repeated selection
      std::vector<bool> taken(2 * k, false);
      for (std::size_t t = 0; t < k; ++t) {
        std::size_t best = 2 * k;
        for (std::size_t h = 0; h < 2 * k; ++h) {
          if (taken[h]) continue;
          if (best == 2 * k) {
            best = h;
            continue;
          }
          const float a = std::isnan(s[h]) ? kNegInf : s[h];
          const float b = std::isnan(s[best]) ? kNegInf : s[best];
          if (a > b || (a == b && bf[h] < bf[best])) best = h;
        }
        taken[best] = true;
      }
      std::size_t j = 0;
      for (std::size_t h = 0; h < 2 * k; ++h) {
        if (!taken[h]) continue;
        f[j] = bf[h];
        l[j] = bl[h];
        node_score[j] = s[h];
        ++j;
      }
    }
    if (q >= g.n_q_valid()) continue;  // padded query rows are dropped
    std::vector<std::pair<std::size_t, float>> picked;
    for (std::size_t j = 0; j < k; ++j) {
      for (long long r = f[j]; r <= l[j]; ++r) {
        if (!Cblk[q * n_k + r]) continue;
        picked.emplace_back(static_cast<std::size_t>(r), n_it == 0 ? score(q, static_cast<std::size_t>(r)) : node_score[j]);
        break;
      }
    }
    std::sort(picked.begin(), picked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto [r, sc] : picked) {
      out.rows[q].push_back(r);
      scores[q].push_back(sc);
    }
  }
  out.scores = std::move(scores);
  return out;
}

struct RecallReport {
  std::vector<std::optional<double>> per_row;  // nullopt where the exact row is empty
  double mean = 1.0;
};

inline RecallReport recall_against_exact(const SparseBlockMask& est, const SparseBlockMask& exact) {
  if (!(est.grid == exact.grid) || est.k != exact.k || est.rows.size() != exact.rows.size())
    throw Error(Errc::GridMismatch, "masks differ in grid or k");
  RecallReport rep;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t q = 0; q < exact.rows.size(); ++q) {
    const auto& ex = exact.rows[q];
    if (ex.empty()) {
      rep.per_row.push_back(std::nullopt);
      continue;
    }
    std::size_t hit = 0;
    for (std::size_t r : est.rows[q]) hit += std::count(ex.begin(), ex.end(), r) > 0;
    const double rc = static_cast<double>(hit) / static_cast<double>(ex.size());
    rep.per_row.push_back(rc);
    sum += rc;
    ++n;
  }
  rep.mean = n ? sum / static_cast<double>(n) : 1.0;
  return rep;
}

}  // namespace stream
