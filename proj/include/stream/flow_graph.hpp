#pragma once

// Layered information-flow graphs built from per-(layer, head) masks.
//
// An attention mask at layer l selecting key block r for query block q
// becomes the edge (l, r) -> (l + 1, q). Edges on some directed path from the
// needle node (0, needle) to the output node (L, output) are marked
// needle_path.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "stream/error.hpp"
#include "stream/stream_estimator.hpp"
#include "stream/tensor_store.hpp"

namespace stream {

using MaskSet = std::map<HeadId, SparseBlockMask>;

// Per (layer, head, q): success row minus fail row. Scores come from the
// success mask.
inline MaskSet subtract_masks(const MaskSet& success, const MaskSet& fail) {
  if (success.size() != fail.size()) throw Error(Errc::LayerSetMismatch, "success and fail cover different heads");
  MaskSet out;
  for (const auto& [id, s] : success) {
    const auto it = fail.find(id);
    if (it == fail.end()) throw Error(Errc::LayerSetMismatch, "no fail mask for " + to_string(id));
    const SparseBlockMask& f = it->second;
    if (!(s.grid == f.grid) || s.rows.size() != f.rows.size())
      throw Error(Errc::GridMismatch, "grids differ for " + to_string(id));
    SparseBlockMask d;
    d.grid = s.grid;
    d.k = s.k;
    d.rows.resize(s.rows.size());
    std::vector<std::vector<float>> scores(s.rows.size());
    for (std::size_t q = 0; q < s.rows.size(); ++q) {
      const auto& fr = f.rows[q];
      for (std::size_t i = 0; i < s.rows[q].size(); ++i) {
        const std::size_t r = s.rows[q][i];
        if (std::binary_search(fr.begin(), fr.end(), r)) continue;
        d.rows[q].push_back(r);
        if (s.scores) scores[q].push_back((*s.scores)[q][i]);
      }
    }
    if (s.scores) d.scores = std::move(scores);
    out.emplace(id, std::move(d));
  }
  return out;
}

enum class EdgeClass { needle_path, other };

struct FlowEdge {
  int layer = 0;          // source layer; the edge lands in layer + 1
  std::size_t from = 0;   // key block at `layer`
  std::size_t to = 0;     // query block at `layer + 1`
  double weight = 0.0;    // max over contributing heads
  std::vector<int> heads; // contributing heads, ascending; empty for residual edges
  EdgeClass cls = EdgeClass::other;

  friend bool operator==(const FlowEdge&, const FlowEdge&) = default;
};

struct FlowGraph {
  int L = 0;
  std::size_t n_q = 0;
  std::size_t needle = 0;
  std::size_t output = 0;
  std::vector<FlowEdge> edges;  // sorted by (layer, from, to)

  friend bool operator==(const FlowGraph&, const FlowGraph&) = default;
};

struct GraphOptions {
  bool residual_edges = false;
};

// Marks every edge that lies on a needle -> output path:
// forward-reachable from (0, needle) and backward-reachable from (L, output).
inline void classify_edges(FlowGraph& g) {
  const std::size_t layers = static_cast<std::size_t>(g.L) + 1;
  std::vector<std::vector<char>> fwd(layers, std::vector<char>(g.n_q, 0)), bwd = fwd;
  fwd[0][g.needle] = 1;
  for (int l = 0; l < g.L; ++l)
    for (const auto& e : g.edges)
      if (e.layer == l && fwd[l][e.from]) fwd[l + 1][e.to] = 1;
  bwd[g.L][g.output] = 1;
  for (int l = g.L - 1; l >= 0; --l)
    for (const auto& e : g.edges)
      if (e.layer == l && bwd[l + 1][e.to]) bwd[l][e.from] = 1;
  for (auto& e : g.edges)
    e.cls = fwd[e.layer][e.from] && bwd[e.layer + 1][e.to] ? EdgeClass::needle_path : EdgeClass::other;
}

inline FlowGraph build_graph(const MaskSet& diff, int num_layers, std::size_t needle, std::size_t output,
                             const GraphOptions& opt = {}) {
  if (num_layers < 1) throw Error(Errc::LayerSetMismatch, "graph needs at least one layer");
  if (diff.empty()) throw Error(Errc::LayerSetMismatch, "no masks");
  const BlockGrid& grid = diff.begin()->second.grid;
  if (grid.b_q != grid.b_k) throw Error(Errc::LayerSetMismatch, "flow graphs need b_q == b_k");
  FlowGraph g;
  g.L = num_layers;
  g.n_q = grid.n_q_valid();
  g.needle = needle;
  g.output = output;
  if (needle >= g.n_q || output >= g.n_q)
    throw Error(Errc::BlockOutOfRange, "needle/output block must be < n_q = " + std::to_string(g.n_q));

  std::map<std::tuple<int, std::size_t, std::size_t>, FlowEdge> edges;
  for (const auto& [id, m] : diff) {
    if (!(m.grid == grid)) throw Error(Errc::LayerSetMismatch, "masks disagree on block sizes or T");
    if (id.layer < 0 || id.layer >= num_layers)
      throw Error(Errc::LayerSetMismatch, to_string(id) + " outside [0, " + std::to_string(num_layers) + ")");
    for (std::size_t q = 0; q < m.rows.size(); ++q)
      for (std::size_t i = 0; i < m.rows[q].size(); ++i) {
        const std::size_t r = m.rows[q][i];
        if (r >= g.n_q) throw Error(Errc::BlockOutOfRange, "key block " + std::to_string(r) + " out of range");
        double w = 1.0;
        if (m.scores && std::isfinite((*m.scores)[q][i])) w = (*m.scores)[q][i];
        const auto key = std::tuple{id.layer, r, q};
        auto it = edges.find(key);
        if (it == edges.end()) {
          edges.emplace(key, FlowEdge{id.layer, r, q, w, {id.head}, EdgeClass::other});
        } else {
          it->second.weight = std::max(it->second.weight, w);
          it->second.heads.push_back(id.head);
        }
      }
  }
  if (opt.residual_edges)
    for (int l = 0; l < num_layers; ++l)
      for (std::size_t b = 0; b < g.n_q; ++b) edges.try_emplace(std::tuple{l, b, b}, FlowEdge{l, b, b, 0.0, {}, EdgeClass::other});
  for (auto& [_, e] : edges) {
    std::sort(e.heads.begin(), e.heads.end());
    e.heads.erase(std::unique(e.heads.begin(), e.heads.end()), e.heads.end());
    g.edges.push_back(std::move(e));
  }
  classify_edges(g);
  return g;
}

inline const char* to_string(EdgeClass c) { return c == EdgeClass::needle_path ? "needle_path" : "other"; }

inline nlohmann::ordered_json graph_to_json(const FlowGraph& g) {
  nlohmann::ordered_json j;
  j["L"] = g.L;
  j["n_q"] = g.n_q;
  j["needle"] = g.needle;
  j["output"] = g.output;
  auto nodes = nlohmann::ordered_json::array();
  for (int l = 0; l <= g.L; ++l)
    for (std::size_t b = 0; b < g.n_q; ++b) nodes.push_back({{"layer", l}, {"block", b}});
  j["nodes"] = std::move(nodes);
  auto edges = nlohmann::ordered_json::array();
  for (const auto& e : g.edges)
    edges.push_back({{"layer", e.layer}, {"from", e.from}, {"to", e.to}, {"weight", e.weight}, {"heads", e.heads},
                     {"class", to_string(e.cls)}});
  j["edges"] = std::move(edges);
  return j;
}

inline FlowGraph graph_from_json(const nlohmann::json& j) {
  FlowGraph g;
  try {
    g.L = j.at("L").get<int>();
    g.n_q = j.at("n_q").get<std::size_t>();
    g.needle = j.at("needle").get<std::size_t>();
    g.output = j.at("output").get<std::size_t>();
    for (const auto& e : j.at("edges")) {
      FlowEdge fe;
      fe.layer = e.at("layer").get<int>();
      fe.from = e.at("from").get<std::size_t>();
      fe.to = e.at("to").get<std::size_t>();
      fe.weight = e.at("weight").get<double>();
      fe.heads = e.at("heads").get<std::vector<int>>();
      fe.cls = e.at("class") == "needle_path" ? EdgeClass::needle_path : EdgeClass::other;
      g.edges.push_back(std::move(fe));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidParams, std::string("graph json: ") + e.what());
  }
  if (g.L < 1 || g.needle >= g.n_q || g.output >= g.n_q) throw Error(Errc::BlockOutOfRange, "graph json: bad header");
  for (const auto& e : g.edges)
    if (e.layer < 0 || e.layer >= g.L || e.from >= g.n_q || e.to >= g.n_q)
      throw Error(Errc::BlockOutOfRange, "graph json: edge out of range");
  return g;
}

inline std::string graph_to_dot(const FlowGraph& g) {
  std::string out = "digraph flow {\n  rankdir=LR;\n  node [shape=circle, fontsize=10];\n";
  char buf[160];
  for (int l = 0; l <= g.L; ++l) {
    std::snprintf(buf, sizeof buf, "  subgraph layer_%d {\n    rank=same;\n", l);
    out += buf;
    for (std::size_t b = 0; b < g.n_q; ++b) {
      const bool special = (l == 0 && b == g.needle) || (l == g.L && b == g.output);
      std::snprintf(buf, sizeof buf, "    \"%d_%zu\" [label=\"L%d:B%zu\"%s];\n", l, b, l, b,
                    special ? ", style=filled, fillcolor=gold" : "");
      out += buf;
    }
    out += "  }\n";
  }
  for (const auto& e : g.edges) {
    std::snprintf(buf, sizeof buf, "  \"%d_%zu\" -> \"%d_%zu\" [color=%s, label=\"%.6g\"];\n", e.layer, e.from,
                  e.layer + 1, e.to, e.cls == EdgeClass::needle_path ? "red" : "blue", e.weight);
    out += buf;
  }
  out += "}\n";
  return out;
}

}  // namespace stream
