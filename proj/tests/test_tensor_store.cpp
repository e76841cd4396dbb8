#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "stream/tensor_store.hpp"
#include "test_support.hpp"

namespace {

using namespace stream;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("stream_ts_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

std::string raw_tensor(const std::string& header, const std::vector<std::uint8_t>& payload) {
  std::string s = header + "\n";
  s.append(reinterpret_cast<const char*>(payload.data()), payload.size());
  return s;
}

// Decodes binary16 from its definition: (-1)^s * 2^(e-15) * (1 + m/1024),
// subnormal 2^-14 * m/1024.
float half_reference(std::uint16_t h) {
  const int s = h >> 15, e = (h >> 10) & 0x1F, m = h & 0x3FF;
  const double sign = s ? -1.0 : 1.0;
  if (e == 0) return static_cast<float>(sign * std::ldexp(m / 1024.0, -14));
  if (e == 31) return m ? std::numeric_limits<float>::quiet_NaN() : static_cast<float>(sign * INFINITY);
  return static_cast<float>(sign * std::ldexp(1.0 + m / 1024.0, e - 15));
}

TEST(TensorStore, F32RoundTripIsBitExact) {
  TempDir dir;
  Matrix m(4, 2, {1.5f, -2.0f, 0.0f, 3.25f, -0.0f, 1e-30f, 7.0f, INFINITY});
  write_tensor(dir.path() / "t.bin", m);
  const Matrix back = read_tensor(dir.path() / "t.bin");
  ASSERT_EQ(back.rows(), 4u);
  ASSERT_EQ(back.cols(), 2u);
  EXPECT_EQ(std::memcmp(back.data().data(), m.data().data(), 8 * sizeof(float)), 0);
  // writing the loaded matrix reproduces the file byte for byte
  write_tensor(dir.path() / "u.bin", back);
  EXPECT_EQ(read_file(dir.path() / "t.bin"), read_file(dir.path() / "u.bin"));
}

TEST(TensorStore, RandomPayloadsRoundTrip) {
  std::mt19937 rng(7);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 17, c = 1 + rng() % 9;
    Matrix m(r, c);
    for (auto& x : m.data()) {
      std::uint32_t b = bits(rng);
      if ((b & 0x7F800000u) == 0x7F800000u) b &= ~0x00400000u;  // avoid NaN payload canonicalization concerns
      x = std::bit_cast<float>(b);
    }
    const std::string enc = encode_tensor(m);
    EXPECT_EQ(encode_tensor(decode_tensor(enc)), enc);
  }
}

TEST(TensorStore, ShortPayloadIsShapeMismatch) {
  std::vector<std::uint8_t> payload(7 * 4, 0);
  const auto s = raw_tensor(R"({"dtype":"f32","shape":[4,2],"layout":"row_major","endian":"little"})", payload);
  try {
    decode_tensor(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
}

TEST(TensorStore, HalfOneDecodes) {
  const auto s = raw_tensor(R"({"dtype":"f16","shape":[1,1]})", {0x00, 0x3C});
  const Matrix m = decode_tensor(s);
  ASSERT_EQ(m.rows(), 1u);
  EXPECT_EQ(m(0, 0), 1.0f);
}

TEST(TensorStore, HalfDecodeMatchesDefinitionForAllCodes) {
  for (std::uint32_t h = 0; h <= 0xFFFF; ++h) {
    const float got = half_to_float(static_cast<std::uint16_t>(h));
    const float want = half_reference(static_cast<std::uint16_t>(h));
    if (std::isnan(want)) {
      EXPECT_TRUE(std::isnan(got)) << h;
    } else {
      EXPECT_EQ(std::bit_cast<std::uint32_t>(got), std::bit_cast<std::uint32_t>(want)) << std::hex << h;
    }
  }
}

TEST(TensorStore, HeaderErrors) {
  auto code_of = [](const std::string& s) {
    try {
      decode_tensor(s);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Io;
  };
  EXPECT_EQ(code_of(raw_tensor(R"({"dtype":"bf16","shape":[1,1]})", {0, 0})), Errc::UnsupportedDtype);
  EXPECT_EQ(code_of(raw_tensor(R"({"dtype":"f32","shape":[1,1,1]})", {0, 0, 0, 0})), Errc::MalformedHeader);
  EXPECT_EQ(code_of(raw_tensor(R"({"dtype":"f32")", {})), Errc::MalformedHeader);
  EXPECT_EQ(code_of(R"({"dtype":"f32","shape":[1,1]})"), Errc::MalformedHeader);  // no newline
  EXPECT_EQ(code_of(raw_tensor(R"({"dtype":"f32","shape":[1,1],"endian":"big"})", {0, 0, 0, 0})), Errc::MalformedHeader);
}

RunManifest small_manifest(int layers, int heads, std::size_t T, std::size_t d) {
  RunManifest m;
  m.model = "test";
  m.num_layers = layers;
  m.num_heads = heads;
  m.T = T;
  m.d = d;
  m.l_d = 0;
  return m;
}

std::map<HeadId, AttentionInputs> random_tensors(int layers, int heads, std::size_t T, std::size_t d, std::mt19937& rng) {
  std::map<HeadId, AttentionInputs> t;
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < heads; ++h) t[{l, h}] = {stream::testing::gaussian(T, d, rng), stream::testing::gaussian(T, d, rng)};
  return t;
}

TEST(LoadRun, TwoByTwoRunHasFourPairs) {
  TempDir dir;
  std::mt19937 rng(1);
  const auto tensors = random_tensors(2, 2, 10, 3, rng);
  write_run(dir.path(), small_manifest(2, 2, 10, 3), tensors);
  const stream::Run run = load_run(dir.path());
  ASSERT_EQ(run.heads().size(), 4u);
  for (const auto& [id, t] : tensors) {
    const auto in = run.inputs(id);
    EXPECT_EQ(in.q, t.q);
    EXPECT_EQ(in.k, t.k);
  }
}

TEST(LoadRun, AccessOrderDoesNotMatter) {
  TempDir dir;
  std::mt19937 rng(2);
  write_run(dir.path(), small_manifest(3, 2, 8, 4), random_tensors(3, 2, 8, 4, rng));
  const stream::Run run = load_run(dir.path());
  auto ids = run.heads();
  std::map<HeadId, AttentionInputs> first;
  for (auto id : ids) first[id] = run.inputs(id);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (auto id : ids) {
      const auto in = run.inputs(id);
      EXPECT_EQ(in.q, first[id].q);
      EXPECT_EQ(in.k, first[id].k);
    }
  }
}

TEST(LoadRun, MissingFileNamesHead) {
  TempDir dir;
  std::mt19937 rng(3);
  write_run(dir.path(), small_manifest(2, 2, 6, 2), random_tensors(2, 2, 6, 2, rng));
  fs::remove(dir.path() / "layer_1" / "head_0" / "k.bin");
  try {
    load_run(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MissingFile);
    EXPECT_NE(std::string(e.what()).find("(layer 1, head 0)"), std::string::npos) << e.what();
  }
}

TEST(LoadRun, WrongShapeIsInconsistentShape) {
  TempDir dir;
  std::mt19937 rng(4);
  write_run(dir.path(), small_manifest(1, 2, 6, 2), random_tensors(1, 2, 6, 2, rng));
  write_tensor(dir.path() / "layer_0" / "head_1" / "q.bin", Matrix(6, 3));
  try {
    load_run(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InconsistentShape);
  }
}

TEST(LoadRun, ManifestValidation) {
  auto code_of = [](const nlohmann::json& j) {
    try {
      parse_manifest(j);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Io;
  };
  nlohmann::json ok = {{"num_layers", 2}, {"num_heads", 1}, {"T", 4}, {"d", 2}, {"l_d", 1}};
  EXPECT_NO_THROW(parse_manifest(ok));
  auto bad = ok;
  bad["l_d"] = 2;
  EXPECT_EQ(code_of(bad), Errc::InvalidManifest);
  bad = ok;
  bad["T"] = 0;
  EXPECT_EQ(code_of(bad), Errc::InvalidManifest);
  bad = ok;
  bad["files"] = {{{"layer", 0}, {"head", 0}, {"q", "a"}, {"k", "b"}}, {{"layer", 0}, {"head", 0}, {"q", "c"}, {"k", "d"}}};
  EXPECT_EQ(code_of(bad), Errc::InvalidManifest);  // duplicate
  bad["files"] = {{{"layer", 0}, {"head", 0}, {"q", "a"}, {"k", "b"}}};
  EXPECT_EQ(code_of(bad), Errc::InvalidManifest);  // layer 1 missing
}

TEST(LoadRun, ManifestJsonRoundTrip) {
  RunManifest m = small_manifest(2, 3, 100, 8);
  m.reference_tokens = std::vector<std::int64_t>{5, 6, 7};
  m.needle_span = std::pair<std::size_t, std::size_t>{40, 47};
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 3; ++h) m.files[{l, h}] = {default_tensor_path({l, h}, 'q'), default_tensor_path({l, h}, 'k')};
  const auto j = manifest_to_json(m);
  const auto back = parse_manifest(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(manifest_to_json(back).dump(), j.dump());
}

}  // namespace
