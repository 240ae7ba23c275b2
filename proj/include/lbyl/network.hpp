#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lbyl/tensor.hpp"

namespace lbyl {

/// Per-channel affine normalization y = gamma * (z - mu) / sigma + beta.
/// sigma is a standard deviation with any stabilizing epsilon already folded in.
struct BatchNormParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> mu;
  std::vector<double> sigma;

  std::size_t size() const noexcept { return gamma.size(); }

  static BatchNormParams identity(std::size_t channels);

  /// Keeps only the listed channels, in the given order.
  BatchNormParams select(const std::vector<std::size_t>& channels) const;

  /// Throws ShapeMismatch on ragged arrays, InvalidBN on sigma <= 0 or non-finite entries.
  void validate() const;

  bool operator==(const BatchNormParams&) const = default;
};

enum class LayerKind { kConv, kFC, kMaxPool, kAvgPool, kFlatten, kResidualBegin, kResidualEnd };
enum class Activation { kNone, kReLU };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Activation act);
LayerKind layer_kind_from_string(std::string_view name);
Activation activation_from_string(std::string_view name);

/// One node of a sequential network.
///
/// Conv: conv (bias-free) -> optional BN -> activation.
/// FC: matrix-vector product over the channel-major flattened input, plus
///   optional bias -> optional BN -> activation.
/// MaxPool / AvgPool: non-overlapping `pool` x `pool` windows.
/// Flatten: reshape to (c*w*h, 1, 1).
/// ResidualBegin: remembers its input as the shortcut.
/// ResidualEnd: adds the shortcut (through `conv` + `bn` when a projection is
///   present) to the branch output, then applies the activation.
struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  Tensor4 conv;
  Matrix fc;
  Vector bias;
  std::optional<BatchNormParams> bn;
  Activation activation = Activation::kNone;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t pool = 2;

  static LayerSpec make_conv(Tensor4 weights, std::optional<BatchNormParams> bn, Activation act,
                             std::size_t stride = 1, std::size_t padding = 0);
  static LayerSpec make_fc(Matrix weights, Vector bias, Activation act,
                           std::optional<BatchNormParams> bn = std::nullopt);
  static LayerSpec make_pool(LayerKind kind, std::size_t pool);
  static LayerSpec make_flatten();
  static LayerSpec make_residual_begin();
  static LayerSpec make_residual_end(Activation act, Tensor4 projection = {},
                                     std::optional<BatchNormParams> bn = std::nullopt);

  bool has_projection() const noexcept { return kind == LayerKind::kResidualEnd && conv.size() > 0; }
  /// Output channel count of a Conv or FC layer.
  std::size_t out_channels() const;

  bool operator==(const LayerSpec&) const = default;
};

struct NetworkModel {
  Shape3 input_shape;
  std::vector<LayerSpec> layers;
  std::map<std::string, std::string> metadata;

  bool operator==(const NetworkModel&) const = default;
};

/// Output shape of every layer. Throws ShapeMismatch / GeometryError /
/// InvalidBN on inconsistent models, including unbalanced residual markers.
std::vector<Shape3> infer_shapes(const NetworkModel& model);
inline void validate(const NetworkModel& model) { (void)infer_shapes(model); }

/// Indices of Conv and FC layers, in order.
std::vector<std::size_t> weight_layers(const NetworkModel& model);

Tensor3 batch_norm_apply(const Tensor3& z, const BatchNormParams& bn);
Tensor3 relu(Tensor3 x);

/// Captured activations of one layer for one input: z is the pre-BN output
/// (pre-activation sum for ResidualEnd), a is the post-activation output.
struct Tap {
  Tensor3 z;
  Tensor3 a;
};
using TapRecord = std::map<std::size_t, Tap>;

struct ForwardResult {
  Tensor3 output;
  TapRecord taps;
};

ForwardResult forward(const NetworkModel& model, const Tensor3& input, const std::set<std::size_t>& capture);
Tensor3 forward(const NetworkModel& model, const Tensor3& input);

/// Every layer index of the model, for capture-all forwards.
std::set<std::size_t> all_layers(const NetworkModel& model);

/// Deterministic desk-scale stand-ins: "vgg-tiny", "resnet-tiny", "mlp-tiny".
NetworkModel generate_synthetic(std::string_view arch, std::uint64_t seed, std::size_t scale = 1);

}  // namespace lbyl
