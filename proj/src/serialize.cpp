#include "lbyl/serialize.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"
#include "lbyl/error.hpp"

namespace lbyl {

namespace {

using nlohmann::json;

constexpr std::uint8_t kMagic[4] = {0x4C, 0x42, 0x4E, 0x5A};
constexpr std::size_t kHeaderSize = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

/// Accumulates tensor payloads and their manifest descriptors.
class PayloadWriter {
 public:
  json f64(const std::string& name, std::span<const double> values, std::vector<std::size_t> shape) {
    json d = {{"name", name}, {"dtype", "f64"}, {"shape", shape}, {"offset", bytes_.size()},
              {"length", values.size() * 8}};
    for (double v : values) put_u64(bytes_, std::bit_cast<std::uint64_t>(v));
    return d;
  }

  json i32(const std::string& name, std::span<const std::int32_t> values) {
    json d = {{"name", name}, {"dtype", "i32"}, {"shape", {values.size()}}, {"offset", bytes_.size()},
              {"length", values.size() * 4}};
    for (std::int32_t v : values) put_u32(bytes_, static_cast<std::uint32_t>(v));
    return d;
  }

  std::vector<std::uint8_t> finish(const json& manifest) const {
    const std::string text = manifest.dump();
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_u32(out, kContainerVersion);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), bytes_.begin(), bytes_.end());
    put_u32(out, crc32_of(out));
    return out;
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Validated view over a container's header, manifest and payload region.
struct Container {
  json manifest;
  std::span<const std::uint8_t> payload;
};

std::size_t declared_payload_end(const json& manifest) {
  std::size_t end = 0;
  auto visit = [&](const json& tensors) {
    for (const json& t : tensors) {
      end = std::max(end, t.at("offset").get<std::size_t>() + t.at("length").get<std::size_t>());
    }
  };
  if (manifest.contains("tensors")) visit(manifest.at("tensors"));
  if (manifest.contains("layers")) {
    for (const json& l : manifest.at("layers")) {
      if (l.contains("tensors")) visit(l.at("tensors"));
    }
  }
  return end;
}

Container open_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw Error(ErrorCode::kTruncatedStream, "stream shorter than the header");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw Error(ErrorCode::kBadMagic, "not an LBNZ container");
  }
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw Error(ErrorCode::kUnsupportedVersion, "version " + std::to_string(version));
  }
  const std::uint64_t manifest_len = get_u64(bytes.data() + 8);
  if (manifest_len > bytes.size() || kHeaderSize + manifest_len + 4 > bytes.size()) {
    throw Error(ErrorCode::kTruncatedStream, "manifest extends past the end of the stream");
  }
  const std::size_t payload_begin = kHeaderSize + manifest_len;
  const std::size_t body_end = bytes.size() - 4;
  const bool crc_ok = crc32_of(bytes.first(body_end)) == get_u32(bytes.data() + body_end);

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(payload_begin));
    const std::size_t end = declared_payload_end(manifest);
    if (payload_begin + end > body_end) {
      throw Error(ErrorCode::kTruncatedStream, "payload shorter than the manifest declares");
    }
  } catch (const json::exception& e) {
    if (!crc_ok) throw Error(ErrorCode::kChecksumMismatch, "crc32 does not match");
    throw Error(ErrorCode::kMalformedManifest, e.what());
  }
  if (!crc_ok) throw Error(ErrorCode::kChecksumMismatch, "crc32 does not match");
  return {std::move(manifest), bytes.subspan(payload_begin, body_end - payload_begin)};
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::vector<double> read_f64(const Container& c, const json& desc, const std::vector<std::size_t>& expect_shape) {
  const auto shape = desc.at("shape").get<std::vector<std::size_t>>();
  if (shape != expect_shape) {
    throw Error(ErrorCode::kMalformedManifest, "tensor '" + desc.at("name").get<std::string>() + "' has wrong shape");
  }
  const std::string dtype = desc.at("dtype").get<std::string>();
  const std::size_t n = shape_numel(shape);
  const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
  if (width == 0) throw Error(ErrorCode::kMalformedManifest, "unsupported dtype '" + dtype + "'");
  const auto offset = desc.at("offset").get<std::size_t>();
  const auto length = desc.at("length").get<std::size_t>();
  if (length != n * width) throw Error(ErrorCode::kMalformedManifest, "tensor length does not match its shape");
  if (offset + length > c.payload.size()) throw Error(ErrorCode::kTruncatedStream, "tensor past payload end");
  const std::uint8_t* p = c.payload.data() + offset;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = width == 8 ? std::bit_cast<double>(get_u64(p + 8 * i))
                        : static_cast<double>(std::bit_cast<float>(get_u32(p + 4 * i)));
  }
  return out;
}

const json* find_tensor(const json& tensors, const std::string& name) {
  for (const json& t : tensors) {
    if (t.at("name").get<std::string>() == name) return &t;
  }
  return nullptr;
}

const json& need_tensor(const json& tensors, const std::string& name) {
  const json* t = find_tensor(tensors, name);
  if (t == nullptr) throw Error(ErrorCode::kMalformedManifest, "missing tensor '" + name + "'");
  return *t;
}

void write_bn(PayloadWriter& w, json& tensors, const BatchNormParams& bn) {
  const std::size_t m = bn.size();
  tensors.push_back(w.f64("bn.gamma", bn.gamma, {m}));
  tensors.push_back(w.f64("bn.beta", bn.beta, {m}));
  tensors.push_back(w.f64("bn.mean", bn.mu, {m}));
  tensors.push_back(w.f64("bn.std", bn.sigma, {m}));
}

BatchNormParams read_bn(const Container& c, const json& layer, std::size_t m) {
  const json& tensors = layer.at("tensors");
  BatchNormParams bn;
  bn.gamma = read_f64(c, need_tensor(tensors, "bn.gamma"), {m});
  bn.beta = read_f64(c, need_tensor(tensors, "bn.beta"), {m});
  bn.mu = read_f64(c, need_tensor(tensors, "bn.mean"), {m});
  if (const json* sd = find_tensor(tensors, "bn.std")) {
    bn.sigma = read_f64(c, *sd, {m});
  } else {
    // Running variance plus epsilon, folded into a standard deviation.
    const std::vector<double> var = read_f64(c, need_tensor(tensors, "bn.var"), {m});
    const double eps = layer.value("bn_eps", 0.0);
    for (double v : var) bn.sigma.push_back(std::sqrt(v + eps));
  }
  bn.validate();
  return bn;
}

std::vector<std::size_t> shape_vec(const Shape4& s) { return {s.m, s.n, s.k1, s.k2}; }

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> serialize(const NetworkModel& model) {
  validate(model);
  PayloadWriter w;
  json layers = json::array();
  for (const LayerSpec& l : model.layers) {
    json entry = {{"kind", to_string(l.kind)}, {"activation", to_string(l.activation)}, {"bn", l.bn.has_value()}};
    json tensors = json::array();
    switch (l.kind) {
      case LayerKind::kConv:
        entry["stride"] = l.stride;
        entry["padding"] = l.padding;
        entry["shape"] = shape_vec(l.conv.shape());
        tensors.push_back(w.f64("weight", l.conv.values(), shape_vec(l.conv.shape())));
        break;
      case LayerKind::kFC:
        entry["shape"] = {l.fc.rows(), l.fc.cols()};
        entry["has_bias"] = l.bias.size() > 0;
        tensors.push_back(w.f64("weight", l.fc.values(), {l.fc.rows(), l.fc.cols()}));
        if (l.bias.size() > 0) tensors.push_back(w.f64("bias", l.bias.values(), {l.bias.size()}));
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        entry["pool"] = l.pool;
        break;
      case LayerKind::kResidualEnd:
        if (l.has_projection()) {
          entry["stride"] = l.stride;
          entry["padding"] = l.padding;
          entry["shape"] = shape_vec(l.conv.shape());
          tensors.push_back(w.f64("weight", l.conv.values(), shape_vec(l.conv.shape())));
        }
        break;
      default:
        break;
    }
    if (l.bn) write_bn(w, tensors, *l.bn);
    entry["tensors"] = std::move(tensors);
    layers.push_back(std::move(entry));
  }
  json manifest = {{"kind", "model"},
                   {"input_shape", {model.input_shape.c, model.input_shape.w, model.input_shape.h}},
                   {"metadata", model.metadata},
                   {"layers", std::move(layers)}};
  return w.finish(manifest);
}

NetworkModel deserialize(std::span<const std::uint8_t> bytes) {
  const Container c = open_container(bytes);
  NetworkModel model;
  try {
    if (c.manifest.at("kind").get<std::string>() != "model") {
      throw Error(ErrorCode::kMalformedManifest, "container does not hold a model");
    }
    const auto in = c.manifest.at("input_shape").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw Error(ErrorCode::kMalformedManifest, "input_shape must have 3 entries");
    model.input_shape = {in[0], in[1], in[2]};
    if (c.manifest.contains("metadata")) {
      model.metadata = c.manifest.at("metadata").get<std::map<std::string, std::string>>();
    }
    for (const json& entry : c.manifest.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(entry.at("kind").get<std::string>());
      l.activation = activation_from_string(entry.value("activation", std::string("none")));
      const json empty = json::array();
      const json& tensors = entry.contains("tensors") ? entry.at("tensors") : empty;
      std::size_t channels = 0;
      const bool conv_like = l.kind == LayerKind::kConv ||
                             (l.kind == LayerKind::kResidualEnd && entry.contains("shape"));
      if (conv_like) {
        const auto s = entry.at("shape").get<std::vector<std::size_t>>();
        if (s.size() != 4) throw Error(ErrorCode::kMalformedManifest, "conv shape must have 4 entries");
        const Shape4 shape{s[0], s[1], s[2], s[3]};
        l.conv = Tensor4(shape, read_f64(c, need_tensor(tensors, "weight"), s));
        l.stride = entry.value("stride", std::size_t{1});
        l.padding = entry.value("padding", std::size_t{0});
        channels = shape.m;
      } else if (l.kind == LayerKind::kFC) {
        const auto s = entry.at("shape").get<std::vector<std::size_t>>();
        if (s.size() != 2) throw Error(ErrorCode::kMalformedManifest, "fc shape must have 2 entries");
        l.fc = Matrix(s[0], s[1], read_f64(c, need_tensor(tensors, "weight"), s));
        if (const json* b = find_tensor(tensors, "bias")) l.bias = Vector(read_f64(c, *b, {s[0]}));
        channels = s[0];
      } else if (l.kind == LayerKind::kMaxPool || l.kind == LayerKind::kAvgPool) {
        l.pool = entry.at("pool").get<std::size_t>();
      }
      if (entry.value("bn", false)) l.bn = read_bn(c, entry, channels);
      model.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedManifest, e.what());
  }
  validate(model);
  return model;
}

std::vector<std::uint8_t> serialize_dataset(const Dataset& data) {
  if (data.labels.size() != data.inputs.size()) {
    throw Error(ErrorCode::kShapeMismatch, "dataset has different input and label counts");
  }
  std::vector<double> flat;
  flat.reserve(data.inputs.size() * data.sample_shape.numel());
  for (const Tensor3& x : data.inputs) {
    if (!(x.shape() == data.sample_shape)) throw Error(ErrorCode::kShapeMismatch, "ragged dataset inputs");
    flat.insert(flat.end(), x.values().begin(), x.values().end());
  }
  PayloadWriter w;
  const Shape3& s = data.sample_shape;
  json tensors = json::array();
  tensors.push_back(w.f64("inputs", flat, {data.inputs.size(), s.c, s.w, s.h}));
  tensors.push_back(w.i32("labels", data.labels));
  json manifest = {{"kind", "dataset"}, {"tensors", std::move(tensors)}};
  return w.finish(manifest);
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  const Container c = open_container(bytes);
  Dataset data;
  try {
    if (c.manifest.at("kind").get<std::string>() != "dataset") {
      throw Error(ErrorCode::kMalformedManifest, "container does not hold a dataset");
    }
    const json& tensors = c.manifest.at("tensors");
    const json& in = need_tensor(tensors, "inputs");
    const auto shape = in.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 4) throw Error(ErrorCode::kMalformedManifest, "inputs must be N x c x w x h");
    data.sample_shape = {shape[1], shape[2], shape[3]};
    const std::vector<double> flat = read_f64(c, in, shape);
    const std::size_t per = data.sample_shape.numel();
    for (std::size_t i = 0; i < shape[0]; ++i) {
      data.inputs.emplace_back(data.sample_shape,
                               std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                   flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    }
    const json& lab = need_tensor(tensors, "labels");
    if (lab.at("dtype").get<std::string>() != "i32" ||
        lab.at("shape").get<std::vector<std::size_t>>() != std::vector<std::size_t>{shape[0]} ||
        lab.at("length").get<std::size_t>() != shape[0] * 4) {
      throw Error(ErrorCode::kMalformedManifest, "labels must be N int32 values");
    }
    const auto offset = lab.at("offset").get<std::size_t>();
    if (offset + shape[0] * 4 > c.payload.size()) throw Error(ErrorCode::kTruncatedStream, "labels past end");
    for (std::size_t i = 0; i < shape[0]; ++i) {
      data.labels.push_back(static_cast<std::int32_t>(get_u32(c.payload.data() + offset + 4 * i)));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedManifest, e.what());
  }
  return data;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIO, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIO, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIO, "cannot rename " + tmp.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIO, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

NetworkModel load_model(const std::filesystem::path& path) { return deserialize(read_file(path)); }
void save_model(const std::filesystem::path& path, const NetworkModel& model) {
  write_file_atomic(path, serialize(model));
}
Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }
void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  write_file_atomic(path, serialize_dataset(data));
}

}  // namespace lbyl
