#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "lbyl/error.hpp"
#include "lbyl/serialize.hpp"
#include "test_util.hpp"

using namespace lbyl;

namespace {

ErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)deserialize(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("decode unexpectedly succeeded");
  return ErrorCode::kConfig;
}

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

// Hand-assembles a container around a manifest and payload.
std::vector<std::uint8_t> assemble(const std::string& manifest, const std::vector<std::uint8_t>& payload,
                                   std::uint32_t version = 1) {
  std::vector<std::uint8_t> out = {0x4C, 0x42, 0x4E, 0x5A};
  put_le(out, version, 4);
  put_le(out, manifest.size(), 8);
  out.insert(out.end(), manifest.begin(), manifest.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_le(out, crc32_of(out), 4);
  return out;
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  put_le(out, bits, 4);
}

}  // namespace

TEST_CASE("model round trip is bit exact") {
  for (const char* arch : {"vgg-tiny", "resnet-tiny", "mlp-tiny"}) {
    const NetworkModel m = generate_synthetic(arch, 7);
    const std::vector<std::uint8_t> bytes = serialize(m);
    const NetworkModel back = deserialize(bytes);
    CHECK(back == m);
    CHECK(serialize(back) == bytes);
  }
}

TEST_CASE("dataset round trip") {
  Dataset d;
  d.sample_shape = {1, 2, 2};
  d.inputs = {Tensor3(d.sample_shape, {1, 2, 3, 4}), Tensor3(d.sample_shape, {-1, 0, 0.5, 9})};
  d.labels = {3, -1};
  const auto bytes = serialize_dataset(d);
  CHECK(deserialize_dataset(bytes) == d);
  CHECK_THROWS_AS(deserialize(bytes), Error);
}

TEST_CASE("header failures") {
  const std::vector<std::uint8_t> good = serialize(generate_synthetic("mlp-tiny", 0));
  auto magic = good;
  magic[0] = 'X';
  CHECK(decode_error(magic) == ErrorCode::kBadMagic);

  CHECK(decode_error(assemble("{}", {}, 2)) == ErrorCode::kUnsupportedVersion);
  CHECK(decode_error(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)) == ErrorCode::kTruncatedStream);
  CHECK(decode_error(std::vector<std::uint8_t>(good.begin(), good.end() - 40)) == ErrorCode::kTruncatedStream);
}

TEST_CASE("payload corruption is caught by the checksum") {
  const std::vector<std::uint8_t> good = serialize(generate_synthetic("vgg-tiny", 0));
  auto bad = good;
  bad[bad.size() - 100] ^= 0x01;
  CHECK(decode_error(bad) == ErrorCode::kChecksumMismatch);
}

TEST_CASE("a well-formed container with an invalid manifest is MalformedManifest") {
  CHECK(decode_error(assemble("not json", {})) == ErrorCode::kMalformedManifest);
  CHECK(decode_error(assemble(R"({"kind":"model","input_shape":[1,1,1]})", {})) ==
        ErrorCode::kMalformedManifest);
}

TEST_CASE("f32 tensors and variance-form BN are accepted") {
  // One 1x1 conv with two output channels, BN given as variance + eps.
  std::vector<std::uint8_t> payload;
  for (float v : {2.0f, -1.0f}) put_f32(payload, v);               // weight
  for (float v : {1.0f, 2.0f}) put_f32(payload, v);                // gamma
  for (float v : {0.0f, 0.5f}) put_f32(payload, v);                // beta
  for (float v : {0.0f, 1.0f}) put_f32(payload, v);                // mean
  for (float v : {3.0f, 0.0f}) put_f32(payload, v);                // var
  auto t = [](const char* name, std::size_t off) {
    return nlohmann::json{{"name", name}, {"dtype", "f32"}, {"shape", {2}}, {"offset", off}, {"length", 8}};
  };
  nlohmann::json w = t("weight", 0);
  w["shape"] = {2, 1, 1, 1};
  nlohmann::json manifest = {
      {"kind", "model"},
      {"input_shape", {1, 1, 1}},
      {"layers",
       {{{"kind", "conv"},
         {"activation", "none"},
         {"bn", true},
         {"bn_eps", 1.0},
         {"shape", {2, 1, 1, 1}},
         {"stride", 1},
         {"padding", 0},
         {"tensors", {w, t("bn.gamma", 8), t("bn.beta", 16), t("bn.mean", 24), t("bn.var", 32)}}}}}};
  const NetworkModel m = deserialize(assemble(manifest.dump(), payload));
  REQUIRE(m.layers.size() == 1);
  CHECK(m.layers[0].conv.at(1, 0, 0, 0) == -1.0);
  REQUIRE(m.layers[0].bn.has_value());
  CHECK(m.layers[0].bn->sigma[0] == doctest::Approx(2.0));
  CHECK(m.layers[0].bn->sigma[1] == doctest::Approx(1.0));
  // x = 1: channel 0 -> 1 * (2 - 0) / 2 + 0 = 1; channel 1 -> 2 * (-1 - 1) / 1 + 0.5 = -3.5
  const Tensor3 out = forward(m, Tensor3(Shape3{1, 1, 1}, 1.0));
  CHECK(out.at(0, 0, 0) == doctest::Approx(1.0));
  CHECK(out.at(1, 0, 0) == doctest::Approx(-3.5));
}

TEST_CASE("atomic file writes and loads") {
  const auto dir = std::filesystem::temp_directory_path() / "lbyl_serialize_test";
  std::filesystem::create_directories(dir);
  const NetworkModel m = generate_synthetic("resnet-tiny", 1);
  save_model(dir / "m.lbnz", m);
  CHECK(load_model(dir / "m.lbnz") == m);
  CHECK_FALSE(std::filesystem::exists(dir / "m.lbnz.tmp"));
  CHECK_THROWS_WITH_AS(load_model(dir / "missing.lbnz"), doctest::Contains("IO"), Error);
  std::filesystem::remove_all(dir);
}
