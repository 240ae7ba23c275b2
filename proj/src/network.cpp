#include "lbyl/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "lbyl/error.hpp"

namespace lbyl {

namespace {

std::string at_layer(std::size_t i) { return "layer " + std::to_string(i) + ": "; }

Shape3 conv_out_shape(const Shape3& in, const Tensor4& w, std::size_t stride, std::size_t padding) {
  const Shape4& fs = w.shape();
  if (fs.n != in.c) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv expects " + std::to_string(fs.n) + " input channels, got " + std::to_string(in.c));
  }
  if (fs.k1 != fs.k2) throw Error(ErrorCode::kGeometryError, "non-square kernel");
  if (stride == 0) throw Error(ErrorCode::kGeometryError, "zero stride");
  const std::size_t pw = in.w + 2 * padding;
  const std::size_t ph = in.h + 2 * padding;
  if (pw < fs.k1 || ph < fs.k1 || (pw - fs.k1) % stride != 0 || (ph - fs.k1) % stride != 0) {
    throw Error(ErrorCode::kGeometryError, "conv window does not tile the padded input");
  }
  return {fs.m, (pw - fs.k1) / stride + 1, (ph - fs.k1) / stride + 1};
}

void check_bn(const std::optional<BatchNormParams>& bn, std::size_t channels) {
  if (!bn) return;
  bn->validate();
  if (bn->size() != channels) {
    throw Error(ErrorCode::kShapeMismatch,
                "BN has " + std::to_string(bn->size()) + " channels, layer has " + std::to_string(channels));
  }
}

Tensor3 pool_apply(const Tensor3& in, LayerKind kind, std::size_t pool) {
  const Shape3& s = in.shape();
  Tensor3 out(Shape3{s.c, s.w / pool, s.h / pool});
  const double inv = 1.0 / static_cast<double>(pool * pool);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t x = 0; x < s.w / pool; ++x)
      for (std::size_t y = 0; y < s.h / pool; ++y) {
        double acc = kind == LayerKind::kMaxPool ? in.at(c, x * pool, y * pool) : 0.0;
        for (std::size_t a = 0; a < pool; ++a)
          for (std::size_t b = 0; b < pool; ++b) {
            const double v = in.at(c, x * pool + a, y * pool + b);
            if (kind == LayerKind::kMaxPool) acc = std::max(acc, v);
            else acc += v;
          }
        out.at(c, x, y) = kind == LayerKind::kMaxPool ? acc : acc * inv;
      }
  return out;
}

Tensor3 fc_apply(const Tensor3& in, const LayerSpec& layer) {
  const Matrix& w = layer.fc;
  Tensor3 out(Shape3{w.rows(), 1, 1});
  auto x = in.values();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double acc = dot(w.row(r), x);
    if (layer.bias.size() > 0) acc += layer.bias[r];
    out.at(r, 0, 0) = acc;
  }
  ensure_finite(out.values(), "fc output");
  return out;
}

Tensor3 activate(Tensor3 x, Activation act) { return act == Activation::kReLU ? relu(std::move(x)) : x; }

}  // namespace

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
          std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

BatchNormParams BatchNormParams::select(const std::vector<std::size_t>& channels) const {
  BatchNormParams out;
  for (std::size_t c : channels) {
    out.gamma.push_back(gamma.at(c));
    out.beta.push_back(beta.at(c));
    out.mu.push_back(mu.at(c));
    out.sigma.push_back(sigma.at(c));
  }
  return out;
}

void BatchNormParams::validate() const {
  const std::size_t m = gamma.size();
  if (beta.size() != m || mu.size() != m || sigma.size() != m) {
    throw Error(ErrorCode::kShapeMismatch, "BN arrays have different lengths");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (!(sigma[i] > 0.0) || !std::isfinite(sigma[i])) {
      throw Error(ErrorCode::kInvalidBN, "sigma[" + std::to_string(i) + "] must be positive");
    }
    if (!std::isfinite(gamma[i]) || !std::isfinite(beta[i]) || !std::isfinite(mu[i])) {
      throw Error(ErrorCode::kInvalidBN, "non-finite BN parameter at channel " + std::to_string(i));
    }
  }
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kFC: return "fc";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kAvgPool: return "avgpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kResidualBegin: return "residual_begin";
    case LayerKind::kResidualEnd: return "residual_end";
  }
  return "?";
}

std::string_view to_string(Activation act) { return act == Activation::kReLU ? "relu" : "none"; }

LayerKind layer_kind_from_string(std::string_view name) {
  for (LayerKind k : {LayerKind::kConv, LayerKind::kFC, LayerKind::kMaxPool, LayerKind::kAvgPool,
                      LayerKind::kFlatten, LayerKind::kResidualBegin, LayerKind::kResidualEnd}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorCode::kMalformedManifest, "unknown layer kind '" + std::string(name) + "'");
}

Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::kReLU;
  if (name == "none") return Activation::kNone;
  throw Error(ErrorCode::kMalformedManifest, "unknown activation '" + std::string(name) + "'");
}

LayerSpec LayerSpec::make_conv(Tensor4 weights, std::optional<BatchNormParams> bn, Activation act,
                               std::size_t stride, std::size_t padding) {
  LayerSpec l;
  l.kind = LayerKind::kConv;
  l.conv = std::move(weights);
  l.bn = std::move(bn);
  l.activation = act;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::make_fc(Matrix weights, Vector bias, Activation act, std::optional<BatchNormParams> bn) {
  LayerSpec l;
  l.kind = LayerKind::kFC;
  l.fc = std::move(weights);
  l.bias = std::move(bias);
  l.bn = std::move(bn);
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::make_pool(LayerKind kind, std::size_t pool) {
  LayerSpec l;
  l.kind = kind;
  l.pool = pool;
  return l;
}

LayerSpec LayerSpec::make_flatten() {
  LayerSpec l;
  l.kind = LayerKind::kFlatten;
  return l;
}

LayerSpec LayerSpec::make_residual_begin() {
  LayerSpec l;
  l.kind = LayerKind::kResidualBegin;
  return l;
}

LayerSpec LayerSpec::make_residual_end(Activation act, Tensor4 projection, std::optional<BatchNormParams> bn) {
  LayerSpec l;
  l.kind = LayerKind::kResidualEnd;
  l.activation = act;
  l.conv = std::move(projection);
  l.bn = std::move(bn);
  return l;
}

std::size_t LayerSpec::out_channels() const {
  if (kind == LayerKind::kConv) return conv.shape().m;
  if (kind == LayerKind::kFC) return fc.rows();
  throw Error(ErrorCode::kConfig, std::string("layer kind ") + std::string(to_string(kind)) + " has no filters");
}

std::vector<Shape3> infer_shapes(const NetworkModel& model) {
  std::vector<Shape3> shapes;
  shapes.reserve(model.layers.size());
  std::vector<Shape3> shortcuts;
  Shape3 cur = model.input_shape;
  if (cur.numel() == 0) throw Error(ErrorCode::kShapeMismatch, "empty input shape");
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    try {
      switch (l.kind) {
        case LayerKind::kConv:
          cur = conv_out_shape(cur, l.conv, l.stride, l.padding);
          check_bn(l.bn, cur.c);
          break;
        case LayerKind::kFC:
          if (l.fc.cols() != cur.numel()) {
            throw Error(ErrorCode::kShapeMismatch, "fc expects " + std::to_string(l.fc.cols()) +
                                                       " inputs, got " + std::to_string(cur.numel()));
          }
          if (l.bias.size() != 0 && l.bias.size() != l.fc.rows()) {
            throw Error(ErrorCode::kShapeMismatch, "fc bias length mismatch");
          }
          cur = Shape3{l.fc.rows(), 1, 1};
          check_bn(l.bn, cur.c);
          break;
        case LayerKind::kMaxPool:
        case LayerKind::kAvgPool:
          if (l.pool == 0 || cur.w % l.pool != 0 || cur.h % l.pool != 0) {
            throw Error(ErrorCode::kGeometryError, "pool window does not tile the input");
          }
          cur = Shape3{cur.c, cur.w / l.pool, cur.h / l.pool};
          break;
        case LayerKind::kFlatten:
          cur = Shape3{cur.numel(), 1, 1};
          break;
        case LayerKind::kResidualBegin:
          shortcuts.push_back(cur);
          break;
        case LayerKind::kResidualEnd: {
          if (shortcuts.empty()) throw Error(ErrorCode::kShapeMismatch, "residual end without begin");
          Shape3 sc = shortcuts.back();
          shortcuts.pop_back();
          if (l.has_projection()) {
            sc = conv_out_shape(sc, l.conv, l.stride, l.padding);
            check_bn(l.bn, sc.c);
          } else if (l.bn) {
            throw Error(ErrorCode::kShapeMismatch, "residual BN without projection");
          }
          if (!(sc == cur)) throw Error(ErrorCode::kShapeMismatch, "residual branches have different shapes");
          break;
        }
      }
    } catch (const Error& e) {
      throw Error(e.code(), at_layer(i) + e.what());
    }
    shapes.push_back(cur);
  }
  if (!shortcuts.empty()) throw Error(ErrorCode::kShapeMismatch, "unterminated residual block");
  return shapes;
}

std::vector<std::size_t> weight_layers(const NetworkModel& model) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerKind k = model.layers[i].kind;
    if (k == LayerKind::kConv || k == LayerKind::kFC) out.push_back(i);
  }
  return out;
}

Tensor3 batch_norm_apply(const Tensor3& z, const BatchNormParams& bn) {
  bn.validate();
  if (bn.size() != z.shape().c) {
    throw Error(ErrorCode::kShapeMismatch, "batch_norm_apply: " + std::to_string(bn.size()) + " BN channels, " +
                                               std::to_string(z.shape().c) + " tensor channels");
  }
  Tensor3 out = z;
  for (std::size_t c = 0; c < bn.size(); ++c) {
    for (double& v : out.channel(c)) v = bn.gamma[c] * (v - bn.mu[c]) / bn.sigma[c] + bn.beta[c];
  }
  ensure_finite(out.values(), "batch_norm_apply output");
  return out;
}

Tensor3 relu(Tensor3 x) {
  for (double& v : x.values()) v = std::max(0.0, v);
  return x;
}

ForwardResult forward(const NetworkModel& model, const Tensor3& input, const std::set<std::size_t>& capture) {
  if (!(input.shape() == model.input_shape)) {
    throw Error(ErrorCode::kShapeMismatch, "input shape does not match the model");
  }
  ForwardResult result;
  std::vector<Tensor3> shortcuts;
  Tensor3 cur = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    Tensor3 z;
    try {
      switch (l.kind) {
        case LayerKind::kConv:
          z = conv2d(cur, l.conv, l.stride, l.padding);
          cur = activate(l.bn ? batch_norm_apply(z, *l.bn) : z, l.activation);
          break;
        case LayerKind::kFC:
          if (l.fc.cols() != cur.size()) throw Error(ErrorCode::kShapeMismatch, "fc input length");
          z = fc_apply(cur, l);
          cur = activate(l.bn ? batch_norm_apply(z, *l.bn) : z, l.activation);
          break;
        case LayerKind::kMaxPool:
        case LayerKind::kAvgPool:
          if (l.pool == 0 || cur.shape().w % l.pool != 0 || cur.shape().h % l.pool != 0) {
            throw Error(ErrorCode::kGeometryError, "pool window does not tile the input");
          }
          cur = pool_apply(cur, l.kind, l.pool);
          z = cur;
          break;
        case LayerKind::kFlatten: {
          const std::size_t n = cur.size();
          std::vector<double> data(cur.values().begin(), cur.values().end());
          cur = Tensor3(Shape3{n, 1, 1}, std::move(data));
          z = cur;
          break;
        }
        case LayerKind::kResidualBegin:
          shortcuts.push_back(cur);
          z = cur;
          break;
        case LayerKind::kResidualEnd: {
          if (shortcuts.empty()) throw Error(ErrorCode::kShapeMismatch, "residual end without begin");
          Tensor3 sc = std::move(shortcuts.back());
          shortcuts.pop_back();
          if (l.has_projection()) {
            sc = conv2d(sc, l.conv, l.stride, l.padding);
            if (l.bn) sc = batch_norm_apply(sc, *l.bn);
          }
          if (!(sc.shape() == cur.shape())) {
            throw Error(ErrorCode::kShapeMismatch, "residual branches have different shapes");
          }
          z = cur;
          auto zs = z.values();
          auto ss = sc.values();
          for (std::size_t e = 0; e < zs.size(); ++e) zs[e] += ss[e];
          cur = activate(z, l.activation);
          break;
        }
      }
    } catch (const Error& e) {
      throw Error(e.code(), at_layer(i) + e.what());
    }
    if (capture.count(i) != 0) result.taps.emplace(i, Tap{std::move(z), cur});
  }
  result.output = std::move(cur);
  return result;
}

Tensor3 forward(const NetworkModel& model, const Tensor3& input) { return forward(model, input, {}).output; }

std::set<std::size_t> all_layers(const NetworkModel& model) {
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) out.insert(i);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic models

namespace {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  double normal(double stddev) { return std::normal_distribution<double>(0.0, stddev)(rng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  Tensor4 conv(std::size_t m, std::size_t n, std::size_t k) {
    Tensor4 w(Shape4{m, n, k, k});
    const double sd = std::sqrt(2.0 / static_cast<double>(n * k * k));
    for (double& v : w.values()) v = normal(sd);
    return w;
  }

  Matrix fc(std::size_t out, std::size_t in) {
    Matrix w(out, in);
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    for (double& v : w.values()) v = normal(sd);
    return w;
  }

  Vector bias(std::size_t n) {
    Vector b(n);
    for (double& v : b.values()) v = normal(0.1);
    return b;
  }

  BatchNormParams bn(std::size_t m) {
    BatchNormParams p;
    for (std::size_t i = 0; i < m; ++i) {
      p.gamma.push_back(uniform(0.5, 1.5));
      p.beta.push_back(normal(0.1));
      p.mu.push_back(normal(0.1));
      p.sigma.push_back(uniform(0.5, 1.5));
    }
    return p;
  }

 private:
  std::mt19937_64 rng_;
};

LayerSpec conv_bn(Init& init, std::size_t m, std::size_t n, std::size_t k, Activation act) {
  return LayerSpec::make_conv(init.conv(m, n, k), init.bn(m), act, 1, k / 2);
}

}  // namespace

NetworkModel generate_synthetic(std::string_view arch, std::uint64_t seed, std::size_t scale) {
  if (scale < 1) throw Error(ErrorCode::kConfig, "scale must be >= 1");
  Init init(seed);
  NetworkModel model;
  model.metadata["arch"] = std::string(arch);
  model.metadata["seed"] = std::to_string(seed);
  model.metadata["scale"] = std::to_string(scale);
  constexpr std::size_t kClasses = 10;

  if (arch == "vgg-tiny") {
    model.input_shape = {3, 8, 8};
    const std::size_t widths[] = {8 * scale, 8 * scale, 16 * scale, 16 * scale};
    std::size_t in = 3;
    for (std::size_t w : widths) {
      model.layers.push_back(conv_bn(init, w, in, 3, Activation::kReLU));
      in = w;
    }
    model.layers.push_back(LayerSpec::make_flatten());
    model.layers.push_back(LayerSpec::make_fc(init.fc(kClasses, in * 64), init.bias(kClasses), Activation::kNone));
  } else if (arch == "resnet-tiny") {
    model.input_shape = {3, 8, 8};
    const std::size_t c1 = 8 * scale;
    const std::size_t c2 = 16 * scale;
    model.layers.push_back(conv_bn(init, c1, 3, 3, Activation::kReLU));
    // Identity-shortcut block.
    model.layers.push_back(LayerSpec::make_residual_begin());
    model.layers.push_back(conv_bn(init, c1, c1, 3, Activation::kReLU));
    model.layers.push_back(conv_bn(init, c1, c1, 3, Activation::kNone));
    model.layers.push_back(LayerSpec::make_residual_end(Activation::kReLU));
    // Widening block with a 1x1 projection shortcut.
    model.layers.push_back(LayerSpec::make_residual_begin());
    model.layers.push_back(conv_bn(init, c2, c1, 3, Activation::kReLU));
    model.layers.push_back(conv_bn(init, c2, c2, 3, Activation::kNone));
    Tensor4 proj = init.conv(c2, c1, 1);
    BatchNormParams proj_bn = init.bn(c2);
    model.layers.push_back(LayerSpec::make_residual_end(Activation::kReLU, std::move(proj), std::move(proj_bn)));
    model.layers.push_back(LayerSpec::make_pool(LayerKind::kAvgPool, 8));
    model.layers.push_back(LayerSpec::make_flatten());
    model.layers.push_back(LayerSpec::make_fc(init.fc(kClasses, c2), init.bias(kClasses), Activation::kNone));
  } else if (arch == "mlp-tiny") {
    model.input_shape = {1, 8, 8};
    const std::size_t h1 = 30 * scale;
    const std::size_t h2 = 10 * scale;
    model.layers.push_back(LayerSpec::make_fc(init.fc(h1, 64), init.bias(h1), Activation::kReLU));
    model.layers.push_back(LayerSpec::make_fc(init.fc(h2, h1), init.bias(h2), Activation::kReLU));
    model.layers.push_back(LayerSpec::make_fc(init.fc(kClasses, h2), init.bias(kClasses), Activation::kNone));
  } else {
    throw Error(ErrorCode::kUnknownArch, "'" + std::string(arch) + "' (expected vgg-tiny, resnet-tiny, mlp-tiny)");
  }
  validate(model);
  return model;
}

}  // namespace lbyl
