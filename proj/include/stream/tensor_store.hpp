#pragma once

// Tensor files and run manifests exchanged with the model harness.
//
// Tensor file layout: one UTF-8 JSON header line terminated by '\n', then the
// raw little-endian row-major payload:
//
//   {"dtype":"f32","shape":[T,d],"layout":"row_major","endian":"little"}\n<payload>
//
// A run directory holds manifest.json plus layer_{L}/head_{H}/{q,k}.bin.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stream/error.hpp"
#include "stream/io.hpp"
#include "stream/matrix.hpp"

namespace stream {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are read by memcpy and require a little-endian host");

enum class Dtype { f32, f16 };

inline std::size_t dtype_width(Dtype t) { return t == Dtype::f32 ? 4 : 2; }

struct TensorHeader {
  Dtype dtype = Dtype::f32;
  std::vector<std::size_t> shape;
};

// IEEE 754 binary16 -> binary32. Exact for every input, including
// subnormals, infinities and NaN payloads.
inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else if (exp != 0) {
    bits = sign | ((exp + 112u) << 23) | (mant << 13);
  } else if (mant == 0) {
    bits = sign;
  } else {
    // subnormal: renormalize
    int shift = 0;
    while ((mant & 0x400u) == 0) {
      mant <<= 1;
      ++shift;
    }
    mant &= 0x3FFu;
    bits = sign | (static_cast<std::uint32_t>(113 - shift) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

namespace detail {

inline TensorHeader parse_tensor_header(const std::string& line, const std::string& where) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::MalformedHeader, where + ": " + e.what());
  }
  if (!h.is_object() || !h.contains("dtype") || !h.contains("shape"))
    throw Error(Errc::MalformedHeader, where + ": header needs 'dtype' and 'shape'");
  TensorHeader out;
  const auto& dt = h["dtype"];
  if (!dt.is_string()) throw Error(Errc::MalformedHeader, where + ": dtype must be a string");
  if (dt == "f32") {
    out.dtype = Dtype::f32;
  } else if (dt == "f16") {
    out.dtype = Dtype::f16;
  } else {
    throw Error(Errc::UnsupportedDtype, where + ": dtype " + dt.get<std::string>());
  }
  if (h.contains("layout") && h["layout"] != "row_major")
    throw Error(Errc::MalformedHeader, where + ": layout must be row_major");
  if (h.contains("endian") && h["endian"] != "little")
    throw Error(Errc::MalformedHeader, where + ": endian must be little");
  const auto& sh = h["shape"];
  if (!sh.is_array() || sh.size() != 2)
    throw Error(Errc::MalformedHeader, where + ": shape must have rank 2");
  for (const auto& v : sh) {
    if (!v.is_number_unsigned()) throw Error(Errc::MalformedHeader, where + ": shape entries must be non-negative integers");
    out.shape.push_back(v.get<std::size_t>());
  }
  return out;
}

constexpr std::size_t kMaxHeaderBytes = 1 << 16;

inline std::string read_header_line(std::istream& in, const std::string& where) {
  std::string line;
  char c;
  while (in.get(c)) {
    if (c == '\n') return line;
    line.push_back(c);
    if (line.size() > kMaxHeaderBytes) break;
  }
  throw Error(Errc::MalformedHeader, where + ": missing header line terminator");
}

}  // namespace detail

// Reads only the header and checks the payload length against the file size.
inline TensorHeader read_tensor_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::MissingFile, path.string());
  auto header = detail::parse_tensor_header(detail::read_header_line(in, path.string()), path.string());
  const auto payload_start = static_cast<std::uintmax_t>(in.tellg());
  const auto expected = header.shape[0] * header.shape[1] * dtype_width(header.dtype);
  const auto total = fs::file_size(path);
  if (total - payload_start != expected)
    throw Error(Errc::ShapeMismatch, path.string() + ": payload has " + std::to_string(total - payload_start) +
                                         " bytes, shape requires " + std::to_string(expected));
  return header;
}

inline Matrix decode_tensor(const std::string& bytes, const std::string& where = "<memory>") {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos || nl > detail::kMaxHeaderBytes)
    throw Error(Errc::MalformedHeader, where + ": missing header line terminator");
  const auto header = detail::parse_tensor_header(bytes.substr(0, nl), where);
  const std::size_t rows = header.shape[0], cols = header.shape[1];
  const std::size_t count = rows * cols;
  const std::size_t width = dtype_width(header.dtype);
  const std::size_t payload = bytes.size() - nl - 1;
  if (payload != count * width)
    throw Error(Errc::ShapeMismatch, where + ": payload has " + std::to_string(payload) + " bytes, shape requires " +
                                         std::to_string(count * width));
  std::vector<float> data(count);
  const char* src = bytes.data() + nl + 1;
  if (header.dtype == Dtype::f32) {
    std::memcpy(data.data(), src, count * 4);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint16_t h;
      std::memcpy(&h, src + 2 * i, 2);
      data[i] = half_to_float(h);
    }
  }
  return Matrix(rows, cols, std::move(data));
}

inline std::string encode_tensor(const Matrix& m) {
  nlohmann::ordered_json h;
  h["dtype"] = "f32";
  h["shape"] = {m.rows(), m.cols()};
  h["layout"] = "row_major";
  h["endian"] = "little";
  std::string out = h.dump();
  out.push_back('\n');
  const auto payload = m.data();
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(float));
  return out;
}

inline Matrix read_tensor(const fs::path& path) { return decode_tensor(read_file(path), path.string()); }

inline void write_tensor(const fs::path& path, const Matrix& m) { write_file_atomic(path, encode_tensor(m)); }

struct HeadId {
  int layer = 0;
  int head = 0;
  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

inline std::string to_string(HeadId id) {
  return "(layer " + std::to_string(id.layer) + ", head " + std::to_string(id.head) + ")";
}

struct TensorPaths {
  fs::path q;
  fs::path k;
};

struct RunManifest {
  std::string model;
  int num_layers = 0;
  int num_heads = 0;
  std::size_t T = 0;
  std::size_t d = 0;
  std::size_t b_q = 32;
  std::size_t b_k = 32;
  int l_d = 3;
  std::map<HeadId, TensorPaths> files;  // relative to the run root
  std::optional<std::vector<std::int64_t>> reference_tokens;
  std::optional<std::pair<std::size_t, std::size_t>> needle_span;
};

inline fs::path default_tensor_path(HeadId id, char which) {
  return fs::path("layer_" + std::to_string(id.layer)) / ("head_" + std::to_string(id.head)) /
         (std::string(1, which) + ".bin");
}

inline RunManifest parse_manifest(const nlohmann::json& j, const std::string& where = "manifest.json") {
  auto bad = [&](const std::string& msg) { return Error(Errc::InvalidManifest, where + ": " + msg); };
  if (!j.is_object()) throw bad("not a JSON object");
  RunManifest m;
  try {
    m.model = j.value("model", std::string{});
    m.num_layers = j.at("num_layers").get<int>();
    m.num_heads = j.at("num_heads").get<int>();
    m.T = j.at("T").get<std::size_t>();
    m.d = j.at("d").get<std::size_t>();
    m.b_q = j.value("b_q", std::size_t{32});
    m.b_k = j.value("b_k", std::size_t{32});
    m.l_d = j.value("l_d", 3);
    if (j.contains("reference_tokens") && !j["reference_tokens"].is_null())
      m.reference_tokens = j["reference_tokens"].get<std::vector<std::int64_t>>();
    if (j.contains("needle_span") && !j["needle_span"].is_null()) {
      const auto span = j["needle_span"].get<std::vector<std::size_t>>();
      if (span.size() != 2 || span[0] > span[1]) throw bad("needle_span must be [start, end]");
      m.needle_span = std::pair{span[0], span[1]};
    }
  } catch (const nlohmann::json::exception& e) {
    throw bad(e.what());
  }
  if (m.num_layers < 1 || m.num_heads < 1) throw bad("num_layers and num_heads must be >= 1");
  if (m.T < 1 || m.d < 1) throw bad("T and d must be >= 1");
  if (m.b_q < 1 || m.b_k < 1) throw bad("block sizes must be >= 1");
  if (m.l_d < 0 || m.l_d >= m.num_layers) throw bad("l_d must satisfy 0 <= l_d < num_layers");

  if (j.contains("files")) {
    const auto& files = j["files"];
    if (!files.is_array()) throw bad("'files' must be an array");
    for (const auto& e : files) {
      HeadId id;
      TensorPaths p;
      try {
        id = {e.at("layer").get<int>(), e.at("head").get<int>()};
        p = {e.at("q").get<std::string>(), e.at("k").get<std::string>()};
      } catch (const nlohmann::json::exception& ex) {
        throw bad(ex.what());
      }
      if (id.layer < 0 || id.layer >= m.num_layers || id.head < 0 || id.head >= m.num_heads)
        throw bad("file entry " + to_string(id) + " out of range");
      if (!m.files.emplace(id, std::move(p)).second) throw bad("duplicate file entry for " + to_string(id));
    }
    for (int l = 0; l < m.num_layers; ++l)
      for (int h = 0; h < m.num_heads; ++h)
        if (!m.files.count({l, h})) throw bad("no file entry for " + to_string({l, h}));
  } else {
    for (int l = 0; l < m.num_layers; ++l)
      for (int h = 0; h < m.num_heads; ++h)
        m.files[{l, h}] = {default_tensor_path({l, h}, 'q'), default_tensor_path({l, h}, 'k')};
  }
  return m;
}

inline nlohmann::ordered_json manifest_to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["model"] = m.model;
  j["num_layers"] = m.num_layers;
  j["num_heads"] = m.num_heads;
  j["T"] = m.T;
  j["d"] = m.d;
  j["b_q"] = m.b_q;
  j["b_k"] = m.b_k;
  j["l_d"] = m.l_d;
  auto files = nlohmann::ordered_json::array();
  for (const auto& [id, p] : m.files)
    files.push_back({{"layer", id.layer}, {"head", id.head}, {"q", p.q.generic_string()}, {"k", p.k.generic_string()}});
  j["files"] = std::move(files);
  j["reference_tokens"] = m.reference_tokens ? nlohmann::ordered_json(*m.reference_tokens) : nlohmann::ordered_json();
  j["needle_span"] = m.needle_span ? nlohmann::ordered_json({m.needle_span->first, m.needle_span->second})
                                   : nlohmann::ordered_json();
  return j;
}

struct AttentionInputs {
  Matrix q;
  Matrix k;
};

// A loaded run directory. Tensors are validated at load (existence, header,
// payload size, shape [T, d]) but payloads are read only when requested.
// Concurrent calls to inputs() are safe.
class Run {
 public:
  Run(fs::path root, RunManifest manifest) : root_(std::move(root)), manifest_(std::move(manifest)) {}

  const RunManifest& manifest() const noexcept { return manifest_; }
  const fs::path& root() const noexcept { return root_; }

  std::vector<HeadId> heads() const {
    std::vector<HeadId> out;
    for (const auto& [id, _] : manifest_.files) out.push_back(id);
    return out;
  }

  AttentionInputs inputs(HeadId id) const {
    const auto it = manifest_.files.find(id);
    if (it == manifest_.files.end()) throw Error(Errc::MissingFile, "no tensors for " + to_string(id));
    AttentionInputs in{read_tensor(root_ / it->second.q), read_tensor(root_ / it->second.k)};
    check_shape(id, in.q.rows(), in.q.cols());
    check_shape(id, in.k.rows(), in.k.cols());
    return in;
  }

 private:
  friend Run load_run(const fs::path&);

  void check_shape(HeadId id, std::size_t rows, std::size_t cols) const {
    if (rows != manifest_.T || cols != manifest_.d)
      throw Error(Errc::InconsistentShape, to_string(id) + ": tensor shape [" + std::to_string(rows) + ", " +
                                               std::to_string(cols) + "], manifest says [" +
                                               std::to_string(manifest_.T) + ", " + std::to_string(manifest_.d) + "]");
  }

  fs::path root_;
  RunManifest manifest_;
};

// `path` is either the run directory or its manifest.json.
inline Run load_run(const fs::path& path) {
  const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
  const fs::path root = manifest_path.parent_path();
  if (!fs::exists(manifest_path)) throw Error(Errc::MissingFile, manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidManifest, manifest_path.string() + ": " + e.what());
  }
  Run run(root, parse_manifest(j, manifest_path.string()));
  for (const auto& [id, paths] : run.manifest_.files) {
    for (const auto& rel : {paths.q, paths.k}) {
      const auto full = root / rel;
      if (!fs::exists(full)) throw Error(Errc::MissingFile, to_string(id) + ": " + full.string());
      const auto h = read_tensor_header(full);
      run.check_shape(id, h.shape[0], h.shape[1]);
    }
  }
  return run;
}

// Writes a complete run directory using the default file layout.
inline void write_run(const fs::path& root, RunManifest manifest, const std::map<HeadId, AttentionInputs>& tensors) {
  manifest.files.clear();
  for (const auto& [id, in] : tensors) {
    const TensorPaths p{default_tensor_path(id, 'q'), default_tensor_path(id, 'k')};
    write_tensor(root / p.q, in.q);
    write_tensor(root / p.k, in.k);
    manifest.files[id] = p;
  }
  write_file_atomic(root / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
}

}  // namespace stream
