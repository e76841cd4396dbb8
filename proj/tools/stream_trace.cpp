// stream-trace: command-line driver over a run directory.
//
//   stream-trace estimate RUN (--k N | --s X) [--bq N] [--bk N] [--out DIR]
//   stream-trace validate RUN [--max-T N] [--k N]
//   stream-trace analyze  RUN --profiles mask_frequency,block_mean [--masks DIR] [--labels CSV]
//   stream-trace search   RUN --evaluator "<cmd>" [--n-match 2]
//   stream-trace flow     RUN --success DIR --fail DIR --needle B --output B
//   stream-trace synth    OUT --layers L --heads H --T T --d D
//
// Exit codes: 0 ok, 2 usage/config, 3 data, 4 evaluator.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stream/stream.hpp"

namespace {

using namespace stream;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitEvaluator = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(Errc c) {
  switch (c) {
    case Errc::InvalidParams:
    case Errc::SparsityOutOfRange:
      return kExitUsage;
    case Errc::EvaluatorFailure:
      return kExitEvaluator;
    default:
      return kExitData;
  }
}

// Wraps a library error with the head it concerns.
Error with_head(const Error& e, HeadId id) { return Error(e.code(), to_string(id) + ": " + e.what()); }

Run open_run(const fs::path& dir) {
  const fs::path manifest = fs::is_directory(dir) ? dir / "manifest.json" : dir;
  if (!fs::exists(manifest)) throw UsageError("no manifest.json in " + dir.string());
  return load_run(dir);
}

std::size_t dense_limit(std::optional<std::size_t> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("STREAM_MAX_DENSE_T")) {
    try {
      return static_cast<std::size_t>(std::stoull(env));
    } catch (const std::exception&) {
      throw UsageError(std::string("STREAM_MAX_DENSE_T is not an integer: ") + env);
    }
  }
  return OracleLimits{}.max_T;
}

std::vector<HeadId> select_heads(const Run& run, const std::vector<int>& layers, const std::vector<int>& heads) {
  std::vector<HeadId> out;
  for (const HeadId id : run.heads()) {
    if (!layers.empty() && std::find(layers.begin(), layers.end(), id.layer) == layers.end()) continue;
    if (!heads.empty() && std::find(heads.begin(), heads.end(), id.head) == heads.end()) continue;
    out.push_back(id);
  }
  if (out.empty()) throw UsageError("layer/head filter selects nothing");
  return out;
}

struct SparsityChoice {
  std::optional<std::size_t> k;
  std::optional<double> s;

  std::size_t resolve(const BlockGrid& grid) const {
    if (k.has_value() == s.has_value()) throw UsageError("give exactly one of --k or --s");
    const std::size_t value = k ? *k : effective_k(grid.T_orig, grid.b_q, *s);
    if (value < 1 || value > grid.n_k)
      throw UsageError("k = " + std::to_string(value) + " outside [1, n_k = " + std::to_string(grid.n_k) + "]");
    return value;
  }
};

std::string fmt_double(double x, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, x);
  return buf;
}

// ---------------------------------------------------------------- estimate

struct EstimateArgs {
  std::string run;
  std::optional<std::size_t> b_q, b_k;
  SparsityChoice sparsity;
  std::optional<std::size_t> r_top;
  std::vector<int> layers, heads;
  std::string out;
  std::size_t jobs = 1;
};

int cmd_estimate(const EstimateArgs& a) {
  const Run run = open_run(a.run);
  const auto& man = run.manifest();
  const BlockGrid grid = make_grid(man.T, a.b_q.value_or(man.b_q), a.b_k.value_or(man.b_k));
  const std::size_t k = a.sparsity.resolve(grid);
  StreamParams params{grid.b_q, grid.b_k, k, a.r_top};
  for (const auto& w : validate_params(params, grid)) std::cerr << "warning: " << w << "\n";
  const fs::path out = a.out.empty() ? fs::path(a.run) / ("masks_k" + std::to_string(k)) : fs::path(a.out);
  const auto ids = select_heads(run, a.layers, a.heads);
  const BlockCausalMask bm = causal_block_mask(grid);

  std::vector<SparsityStats> stats(ids.size());
  parallel_for(ids.size(), a.jobs, [&](std::size_t i) {
    try {
      const auto in = run.inputs(ids[i]);
      const auto mask = estimate_mask(in.q, in.k, bm, params);
      write_mask(mask_path(out, ids[i]), mask);
      stats[i] = sparsity_stats(mask, bm);
    } catch (const Error& e) {
      throw with_head(e, ids[i]);
    }
  });

  nlohmann::ordered_json summary;
  summary["T"] = grid.T_orig;
  summary["b_q"] = grid.b_q;
  summary["b_k"] = grid.b_k;
  summary["k"] = k;
  auto per_head = nlohmann::ordered_json::array();
  std::uint64_t selected = 0, valid = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    selected += stats[i].selected_pairs;
    valid += stats[i].valid_pairs;
    per_head.push_back({{"layer", ids[i].layer},
                        {"head", ids[i].head},
                        {"selected_pairs", stats[i].selected_pairs},
                        {"valid_pairs", stats[i].valid_pairs},
                        {"pruned_fraction", stats[i].pruned_fraction}});
  }
  const double pruned = valid ? 1.0 - static_cast<double>(selected) / static_cast<double>(valid) : 0.0;
  summary["heads"] = std::move(per_head);
  summary["pruned_fraction"] = pruned;
  write_file_atomic(out / "stats.json", summary.dump(2) + "\n");

  std::cout << "estimated " << ids.size() << " heads: T=" << grid.T_orig << " b_q=" << grid.b_q << " b_k=" << grid.b_k
            << " k=" << k << " selected_pairs=" << selected << " valid_pairs=" << valid
            << " pruned_fraction=" << fmt_double(pruned) << " out=" << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- validate

struct ValidateArgs {
  std::string run;
  std::optional<std::size_t> max_T;
  std::optional<std::size_t> b_q, b_k;
  SparsityChoice sparsity;
  std::vector<int> layers, heads;
  std::size_t jobs = 1;
};

int cmd_validate(ValidateArgs a) {
  const Run run = open_run(a.run);
  const auto& man = run.manifest();
  const OracleLimits lim{dense_limit(a.max_T)};
  if (man.T > lim.max_T)
    throw Error(Errc::ContextTooLarge, "T = " + std::to_string(man.T) + " exceeds dense limit " + std::to_string(lim.max_T));
  const BlockGrid grid = make_grid(man.T, a.b_q.value_or(man.b_q), a.b_k.value_or(man.b_k));
  if (!a.sparsity.k && !a.sparsity.s) a.sparsity.k = std::min<std::size_t>(4, grid.n_k);
  const std::size_t k = a.sparsity.resolve(grid);
  const StreamParams params{grid.b_q, grid.b_k, k, std::nullopt};
  const BlockCausalMask bm = causal_block_mask(grid);
  const auto ids = select_heads(run, a.layers, a.heads);

  struct Row {
    double agreement = 0.0;
    double recall = 0.0;
  };
  std::vector<Row> rows(ids.size());
  parallel_for(ids.size(), a.jobs, [&](std::size_t i) {
    try {
      const auto in = run.inputs(ids[i]);
      const auto est = estimate_mask(in.q, in.k, bm, params);
      const auto ref = naive_stream_reference(in.q, in.k, bm, params, lim);
      const auto exact = exact_topk_mask(in.q, in.k, bm, k, lim);
      std::size_t same = 0;
      for (std::size_t q = 0; q < est.rows.size(); ++q) same += est.rows[q] == ref.rows[q];
      rows[i].agreement = est.rows.empty() ? 1.0 : static_cast<double>(same) / static_cast<double>(est.rows.size());
      rows[i].recall = recall_against_exact(est, exact).mean;
    } catch (const Error& e) {
      throw with_head(e, ids[i]);
    }
  });
  bool all_agree = true;
  std::cout << "layer,head,agreement,exact_recall\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::cout << ids[i].layer << "," << ids[i].head << "," << fmt_double(rows[i].agreement) << ","
              << fmt_double(rows[i].recall) << "\n";
    all_agree = all_agree && rows[i].agreement == 1.0;
  }
  if (!all_agree) {
    std::cerr << "error: estimator disagrees with the reference transcription\n";
    return kExitData;
  }
  return kExitOk;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string run;
  std::vector<std::string> profiles{"mask_frequency"};
  std::string masks;
  std::optional<std::size_t> b_q, b_k;
  SparsityChoice sparsity;
  std::string labels;
  std::string out;
  std::vector<int> layers, heads;
  std::size_t jobs = 1;
};

std::map<std::size_t, std::string> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::MissingFile, "labels file " + path.string());
  std::map<std::size_t, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("block_index", 0) == 0)) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw Error(Errc::InvalidParams, path.string() + ":" + std::to_string(lineno) + ": expected block_index,label");
    try {
      out[std::stoul(line.substr(0, comma))] = line.substr(comma + 1);
    } catch (const std::exception&) {
      throw Error(Errc::InvalidParams, path.string() + ":" + std::to_string(lineno) + ": bad block index");
    }
  }
  return out;
}

int cmd_analyze(const AnalyzeArgs& a) {
  const Run run = open_run(a.run);
  const auto& man = run.manifest();
  std::vector<ProfileSource> sources;
  for (const auto& p : a.profiles) {
    const auto s = parse_profile_source(p);
    if (!s) throw UsageError("unknown profile source '" + p + "'");
    sources.push_back(*s);
  }
  const bool need_masks = std::any_of(sources.begin(), sources.end(), [](auto s) { return s != ProfileSource::block_mean; });
  const auto ids = select_heads(run, a.layers, a.heads);

  BlockGrid grid = make_grid(man.T, a.b_q.value_or(man.b_q), a.b_k.value_or(man.b_k));
  MaskSet masks;
  if (need_masks && !a.masks.empty()) {
    masks = read_mask_set(a.masks);
    grid = masks.begin()->second.grid;
    for (const auto id : ids)
      if (!masks.count(id)) throw Error(Errc::MissingFile, "no mask for " + to_string(id) + " in " + a.masks);
  }
  const BlockCausalMask bm = causal_block_mask(grid);
  std::optional<StreamParams> params;
  if (need_masks && a.masks.empty()) {
    SparsityChoice sc = a.sparsity;
    if (!sc.k && !sc.s) throw UsageError("mask profiles need --masks, --k or --s");
    params = StreamParams{grid.b_q, grid.b_k, sc.resolve(grid), std::nullopt};
  }

  std::vector<std::vector<VerticalProfile>> per_head(ids.size());
  parallel_for(ids.size(), a.jobs, [&](std::size_t i) {
    try {
      std::optional<AttentionInputs> in;
      auto inputs = [&]() -> const AttentionInputs& {
        if (!in) in = run.inputs(ids[i]);
        return *in;
      };
      std::optional<SparseBlockMask> mask;
      if (need_masks) mask = params ? estimate_mask(inputs().q, inputs().k, bm, *params) : masks.at(ids[i]);
      for (const auto src : sources) {
        if (src == ProfileSource::block_mean)
          per_head[i].push_back(vertical_profile(streaming_block_mean(inputs().q, inputs().k, bm), bm, ids[i]));
        else
          per_head[i].push_back(vertical_profile(*mask, src, bm, ids[i]));
      }
    } catch (const Error& e) {
      throw with_head(e, ids[i]);
    }
  });

  const fs::path out = a.out.empty() ? fs::path(a.run) / "analysis" : fs::path(a.out);
  std::ostringstream prof, kurt;
  prof << "layer,head,source,block_index,value\n";
  kurt << "source,rank,layer,head,kurtosis\n";
  const auto labels = a.labels.empty() ? std::map<std::size_t, std::string>{} : read_labels(a.labels);
  std::ostringstream cats;
  cats << "layer,head,source,category,blocks,mean_value\n";
  for (std::size_t s = 0; s < sources.size(); ++s) {
    std::vector<VerticalProfile> profs;
    for (std::size_t i = 0; i < ids.size(); ++i) profs.push_back(per_head[i][s]);
    for (const auto& p : profs) {
      for (std::size_t r = 0; r < p.values.size(); ++r)
        prof << p.head.layer << "," << p.head.head << "," << to_string(p.source) << "," << r << ","
             << fmt_double(p.values[r], 9) << "\n";
      if (!labels.empty()) {
        std::map<std::string, std::pair<std::size_t, double>> group;
        for (std::size_t r = 0; r < p.values.size(); ++r) {
          const auto it = labels.find(r);
          if (it == labels.end()) continue;
          auto& g = group[it->second];
          ++g.first;
          g.second += p.values[r];
        }
        for (const auto& [cat, g] : group)
          cats << p.head.layer << "," << p.head.head << "," << to_string(p.source) << "," << cat << "," << g.first
               << "," << fmt_double(g.second / static_cast<double>(g.first), 9) << "\n";
      }
    }
    std::vector<ReceiverRank> ranking;
    try {
      ranking = rank_receiver_heads(profs);
    } catch (const Error& e) {
      if (e.code() != Errc::NoValidProfiles) throw;
      std::cerr << "warning: " << to_string(sources[s]) << ": every profile is degenerate\n";
      continue;
    }
    std::cout << "receiver heads by " << to_string(sources[s]) << " kurtosis:\n";
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      const auto& e = ranking[r];
      kurt << to_string(sources[s]) << "," << r + 1 << "," << e.head.layer << "," << e.head.head << ","
           << (e.kurtosis ? fmt_double(*e.kurtosis) : std::string{}) << "\n";
      if (r < 5)
        std::cout << "  " << r + 1 << ". layer " << e.head.layer << " head " << e.head.head << "  kurtosis "
                  << (e.kurtosis ? fmt_double(*e.kurtosis, 4) : std::string("n/a")) << "\n";
    }
  }
  write_file_atomic(out / "profiles.csv", prof.str());
  write_file_atomic(out / "kurtosis.csv", kurt.str());
  if (!labels.empty()) write_file_atomic(out / "categories.csv", cats.str());
  return kExitOk;
}

// ---------------------------------------------------------------- search

struct SearchArgs {
  std::string run;
  std::string evaluator;
  std::string socket;
  std::size_t n_match = 2;
  std::optional<std::size_t> k_min, k_max, b_q, b_k, max_tokens;
  std::optional<int> l_d;
  std::string out;
};

int cmd_search(const SearchArgs& a) {
  const Run run = open_run(a.run);
  const auto& man = run.manifest();
  if (a.evaluator.empty() == a.socket.empty()) throw UsageError("give exactly one of --evaluator or --evaluator-socket");
  const BlockGrid grid = make_grid(man.T, a.b_q.value_or(man.b_q), a.b_k.value_or(man.b_k));
  SearchConfig cfg;
  cfg.k_min = a.k_min.value_or(1);
  cfg.k_max = a.k_max.value_or(grid.n_k);
  cfg.n_match = a.n_match;
  cfg.l_d = a.l_d.value_or(man.l_d);
  cfg.b_q = grid.b_q;
  cfg.b_k = grid.b_k;
  cfg.max_tokens = a.max_tokens.value_or(cfg.n_match);
  validate_config(cfg);
  const fs::path out = a.out.empty() ? fs::path(a.run) / "search.json" : fs::path(a.out);

  std::unique_ptr<Evaluator> eval;
  try {
    if (!a.evaluator.empty())
      eval = std::make_unique<ProcessEvaluator>(a.evaluator);
    else
      eval = std::make_unique<SocketEvaluator>(a.socket);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEvaluator;
  }
  try {
    const auto res = find_min_k(cfg, *eval);
    write_file_atomic(out, search_to_json(cfg, res.probes, res.k_star).dump(2) + "\n");
    std::cout << "k_star=" << res.k_star << " probes=" << res.probes.size() << " log=" << out.string() << "\n";
    return kExitOk;
  } catch (const SearchError& e) {
    write_file_atomic(out, search_to_json(cfg, e.probes(), std::nullopt).dump(2) + "\n");
    throw;
  }
}

// ---------------------------------------------------------------- flow

struct FlowArgs {
  std::string run;
  std::string success, fail;
  std::optional<std::size_t> needle, output;
  bool residual = false;
  std::string out;
};

int cmd_flow(const FlowArgs& a) {
  const Run run = open_run(a.run);
  const auto& man = run.manifest();
  const MaskSet success = read_mask_set(a.success);
  const MaskSet fail = read_mask_set(a.fail);
  const MaskSet diff = subtract_masks(success, fail);
  const BlockGrid& grid = diff.begin()->second.grid;
  std::size_t needle;
  if (a.needle) {
    needle = *a.needle;
  } else if (man.needle_span) {
    needle = man.needle_span->first / grid.b_q;
  } else {
    throw UsageError("--needle is required when the manifest has no needle_span");
  }
  const std::size_t output = a.output.value_or(grid.n_q_valid() - 1);
  const FlowGraph g = build_graph(diff, man.num_layers, needle, output, {a.residual});
  const fs::path out = a.out.empty() ? fs::path(a.run) / "flow" : fs::path(a.out);
  write_file_atomic(out / "graph.json", graph_to_json(g).dump(2) + "\n");
  write_file_atomic(out / "graph.dot", graph_to_dot(g));
  const auto on_path = std::count_if(g.edges.begin(), g.edges.end(), [](const FlowEdge& e) { return e.cls == EdgeClass::needle_path; });
  std::cout << "edges=" << g.edges.size() << " needle_path=" << on_path << " needle=" << needle << " output=" << output
            << " out=" << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  int layers = 2, heads = 2, l_d = 0;
  std::size_t T = 256, d = 16, b_q = 32, b_k = 32;
  std::uint32_t seed = 0;
  std::optional<std::size_t> needle_token;
};

// Gaussian Q/K; with a needle token, every head's keys in the needle's block
// are pulled toward the mean query so the block draws attention.
int cmd_synth(const SynthArgs& a) {
  if (a.layers < 1 || a.heads < 1 || a.T < 1 || a.d < 1) throw UsageError("layers, heads, T and d must be >= 1");
  if (a.needle_token && *a.needle_token >= a.T) throw UsageError("needle token must be < T");
  RunManifest man;
  man.model = "synthetic";
  man.num_layers = a.layers;
  man.num_heads = a.heads;
  man.T = a.T;
  man.d = a.d;
  man.b_q = a.b_q;
  man.b_k = a.b_k;
  man.l_d = a.l_d;
  if (a.needle_token) man.needle_span = std::pair{*a.needle_token, *a.needle_token};
  std::mt19937 rng(a.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::map<HeadId, AttentionInputs> tensors;
  for (int l = 0; l < a.layers; ++l)
    for (int h = 0; h < a.heads; ++h) {
      AttentionInputs in{Matrix(a.T, a.d), Matrix(a.T, a.d)};
      for (auto& x : in.q.data()) x = normal(rng);
      for (auto& x : in.k.data()) x = normal(rng);
      if (a.needle_token) {
        const std::size_t b0 = *a.needle_token / a.b_k * a.b_k;
        for (std::size_t v = b0; v < std::min(a.T, b0 + a.b_k); ++v)
          for (std::size_t c = 0; c < a.d; ++c) in.k(v, c) += 3.0f;
        for (std::size_t u = 0; u < a.T; ++u)
          for (std::size_t c = 0; c < a.d; ++c) in.q(u, c) += 0.5f;
      }
      tensors.emplace(HeadId{l, h}, std::move(in));
    }
  write_run(a.out, man, tensors);
  std::cout << "wrote " << a.layers * a.heads << " heads to " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical sparse attention tracing over exported Q/K runs"};
  app.require_subcommand(1);

  auto add_blocks = [](CLI::App* c, std::optional<std::size_t>& bq, std::optional<std::size_t>& bk) {
    c->add_option("--bq", bq, "Query block size (default: manifest)");
    c->add_option("--bk", bk, "Key block size (default: manifest)");
  };
  auto add_sparsity = [](CLI::App* c, SparsityChoice& s) {
    auto* k = c->add_option("--k", s.k, "Sparsity constant (key blocks per query block)");
    auto* e = c->add_option("--s", s.s, "Effective sparsity in (0, 1), mapped to k");
    k->excludes(e);
  };
  auto add_filter = [](CLI::App* c, std::vector<int>& layers, std::vector<int>& heads) {
    c->add_option("--layers", layers, "Comma-separated layer subset")->delimiter(',');
    c->add_option("--heads", heads, "Comma-separated head subset")->delimiter(',');
  };

  EstimateArgs est;
  auto* c_est = app.add_subcommand("estimate", "Estimate block masks for every head");
  c_est->add_option("run", est.run, "Run directory")->required();
  add_blocks(c_est, est.b_q, est.b_k);
  add_sparsity(c_est, est.sparsity);
  c_est->add_option("--r", est.r_top, "Top-r constant (accepted, unused)");
  add_filter(c_est, est.layers, est.heads);
  c_est->add_option("--out", est.out, "Output mask directory (default RUN/masks_k{k})");
  c_est->add_option("--jobs", est.jobs, "Worker threads")->check(CLI::PositiveNumber);

  ValidateArgs val;
  auto* c_val = app.add_subcommand("validate", "Compare the estimator with the dense oracles");
  c_val->add_option("run", val.run, "Run directory")->required();
  c_val->add_option("--max-T", val.max_T, "Dense guard (default: $STREAM_MAX_DENSE_T or 4096)");
  add_blocks(c_val, val.b_q, val.b_k);
  add_sparsity(c_val, val.sparsity);
  add_filter(c_val, val.layers, val.heads);
  c_val->add_option("--jobs", val.jobs, "Worker threads")->check(CLI::PositiveNumber);

  AnalyzeArgs ana;
  auto* c_ana = app.add_subcommand("analyze", "Vertical profiles and receiver-head ranking");
  c_ana->add_option("run", ana.run, "Run directory")->required();
  c_ana->add_option("--profiles", ana.profiles, "block_mean, mask_frequency, mask_score")->delimiter(',');
  c_ana->add_option("--masks", ana.masks, "Mask directory from `estimate`");
  add_blocks(c_ana, ana.b_q, ana.b_k);
  add_sparsity(c_ana, ana.sparsity);
  c_ana->add_option("--labels", ana.labels, "CSV block_index,label for category aggregation");
  c_ana->add_option("--out", ana.out, "Output directory (default RUN/analysis)");
  add_filter(c_ana, ana.layers, ana.heads);
  c_ana->add_option("--jobs", ana.jobs, "Worker threads")->check(CLI::PositiveNumber);

  SearchArgs sea;
  auto* c_sea = app.add_subcommand("search", "Binary search for the minimal behaviour-preserving k");
  c_sea->add_option("run", sea.run, "Run directory")->required();
  c_sea->add_option("--evaluator", sea.evaluator, "Evaluator command (spoken to over stdin/stdout)");
  c_sea->add_option("--evaluator-socket", sea.socket, "Unix socket of a running evaluator");
  c_sea->add_option("--n-match", sea.n_match, "Consecutive matching tokens required");
  c_sea->add_option("--k-min", sea.k_min);
  c_sea->add_option("--k-max", sea.k_max, "Default: n_k");
  c_sea->add_option("--l-d", sea.l_d, "Dense leading layers (default: manifest)");
  c_sea->add_option("--max-tokens", sea.max_tokens, "Tokens to generate per probe (default: n_match)");
  add_blocks(c_sea, sea.b_q, sea.b_k);
  c_sea->add_option("--out", sea.out, "Probe log path (default RUN/search.json)");

  FlowArgs flo;
  auto* c_flo = app.add_subcommand("flow", "Needle-to-output flow graph from mask differences");
  c_flo->add_option("run", flo.run, "Run directory")->required();
  c_flo->add_option("--success", flo.success, "Masks at the succeeding k")->required();
  c_flo->add_option("--fail", flo.fail, "Masks at the failing k")->required();
  c_flo->add_option("--needle", flo.needle, "Needle block (default: manifest needle_span)");
  c_flo->add_option("--output", flo.output, "Output block (default: last block)");
  c_flo->add_flag("--residual", flo.residual, "Add residual self-edges");
  c_flo->add_option("--out", flo.out, "Output directory (default RUN/flow)");

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "Write a synthetic run directory (fixtures, demos)");
  c_syn->add_option("out", syn.out, "Run directory to create")->required();
  c_syn->add_option("--layers", syn.layers);
  c_syn->add_option("--heads", syn.heads);
  c_syn->add_option("--T", syn.T);
  c_syn->add_option("--d", syn.d);
  c_syn->add_option("--bq", syn.b_q);
  c_syn->add_option("--bk", syn.b_k);
  c_syn->add_option("--l-d", syn.l_d);
  c_syn->add_option("--seed", syn.seed);
  c_syn->add_option("--needle-token", syn.needle_token);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (c_est->parsed()) return cmd_estimate(est);
    if (c_val->parsed()) return cmd_validate(val);
    if (c_ana->parsed()) return cmd_analyze(ana);
    if (c_sea->parsed()) return cmd_search(sea);
    if (c_flo->parsed()) return cmd_flow(flo);
    if (c_syn->parsed()) return cmd_synth(syn);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
