#pragma once

// Brute-force reference for flow-graph reachability and a random layered
// mask generator, shared by the unit and acceptance suites.

#include <random>
#include <set>
#include <tuple>
#include <vector>

#include "stream/flow_graph.hpp"

namespace stream::testing {

using EdgeKey = std::tuple<int, std::size_t, std::size_t>;  // (layer, from, to)

// Enumerates every needle -> output path explicitly and returns the union of
// their edges.
inline std::set<EdgeKey> edges_on_paths(const std::set<EdgeKey>& edges, int L, std::size_t needle, std::size_t output) {
  std::set<EdgeKey> on_path;
  std::vector<EdgeKey> path;
  auto walk = [&](auto&& self, int layer, std::size_t node) -> void {
    if (layer == L) {
      if (node == output) on_path.insert(path.begin(), path.end());
      return;
    }
    for (const auto& e : edges) {
      if (std::get<0>(e) != layer || std::get<1>(e) != node) continue;
      path.push_back(e);
      self(self, layer + 1, std::get<2>(e));
      path.pop_back();
    }
  };
  walk(walk, 0, needle);
  return on_path;
}

struct RandomLayered {
  MaskSet masks;
  std::set<EdgeKey> edges;
  int L = 0;
  std::size_t n_q = 0;
};

// Masks over `heads` heads per layer whose union has at most max_edges edges.
inline RandomLayered random_layered(std::mt19937& rng, int max_layers, std::size_t max_blocks, std::size_t max_edges,
                                    int heads = 2) {
  RandomLayered out;
  out.L = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_layers));
  out.n_q = 2 + rng() % (max_blocks - 1);
  const std::size_t b = 4;
  const auto grid = make_grid(out.n_q * b, b, b);
  const double density = std::uniform_real_distribution<double>(0.05, 0.5)(rng);
  std::bernoulli_distribution coin(density);
  std::uniform_real_distribution<float> weight(-2.0f, 2.0f);
  for (int l = 0; l < out.L; ++l)
    for (int h = 0; h < heads; ++h) {
      SparseBlockMask m{grid, out.n_q, std::vector<std::vector<std::size_t>>(out.n_q), std::vector<std::vector<float>>(out.n_q)};
      for (std::size_t q = 0; q < out.n_q; ++q)
        for (std::size_t r = 0; r < out.n_q; ++r) {
          if (!coin(rng)) continue;
          if (out.edges.size() >= max_edges && !out.edges.count({l, r, q})) continue;
          m.rows[q].push_back(r);
          (*m.scores)[q].push_back(weight(rng));
          out.edges.insert({l, r, q});
        }
      out.masks.emplace(HeadId{l, h}, std::move(m));
    }
  return out;
}

}  // namespace stream::testing
