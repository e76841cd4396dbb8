#pragma once

// Mask directories: one mask JSON per head at <dir>/layer_{L}/head_{H}.json.

#include <filesystem>
#include <regex>
#include <string>

#include <json.hpp>

#include "stream/error.hpp"
#include "stream/flow_graph.hpp"
#include "stream/io.hpp"
#include "stream/stream_estimator.hpp"

namespace stream {

inline fs::path mask_path(const fs::path& dir, HeadId id) {
  return dir / ("layer_" + std::to_string(id.layer)) / ("head_" + std::to_string(id.head) + ".json");
}

inline void write_mask(const fs::path& path, const SparseBlockMask& m) {
  write_file_atomic(path, mask_to_json(m).dump() + "\n");
}

inline SparseBlockMask read_mask(const fs::path& path) {
  try {
    return mask_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidParams, path.string() + ": " + e.what());
  }
}

inline MaskSet read_mask_set(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(Errc::MissingFile, "mask directory " + dir.string());
  static const std::regex layer_re("layer_([0-9]+)"), head_re("head_([0-9]+)\\.json");
  MaskSet out;
  for (const auto& layer_dir : fs::directory_iterator(dir)) {
    std::smatch lm;
    const std::string lname = layer_dir.path().filename().string();
    if (!layer_dir.is_directory() || !std::regex_match(lname, lm, layer_re)) continue;
    for (const auto& f : fs::directory_iterator(layer_dir.path())) {
      std::smatch hm;
      const std::string hname = f.path().filename().string();
      if (!std::regex_match(hname, hm, head_re)) continue;
      out.emplace(HeadId{std::stoi(lm[1]), std::stoi(hm[1])}, read_mask(f.path()));
    }
  }
  if (out.empty()) throw Error(Errc::MissingFile, "no masks under " + dir.string());
  return out;
}

}  // namespace stream
