#include "lbyl/surgery.hpp"

#include <string>

#include "lbyl/error.hpp"

namespace lbyl {

Consumer find_consumer(const NetworkModel& model, std::size_t layer) {
  const std::vector<Shape3> shapes = infer_shapes(model);
  if (layer >= model.layers.size()) {
    throw Error(ErrorCode::kPlanShapeMismatch, "layer " + std::to_string(layer) + " does not exist");
  }
  const LayerKind kind = model.layers[layer].kind;
  if (kind != LayerKind::kConv && kind != LayerKind::kFC) {
    throw Error(ErrorCode::kPlanShapeMismatch, "layer " + std::to_string(layer) + " has no filters to prune");
  }
  Shape3 channel_shape = shapes[layer];
  for (std::size_t i = layer + 1; i < model.layers.size(); ++i) {
    switch (model.layers[i].kind) {
      case LayerKind::kConv:
      case LayerKind::kFC:
        return {i, channel_shape.w * channel_shape.h};
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        channel_shape = shapes[i];
        break;
      case LayerKind::kFlatten:
        break;
      case LayerKind::kResidualBegin:
      case LayerKind::kResidualEnd:
        throw Error(ErrorCode::kIllegalResidualPrune,
                    "output of layer " + std::to_string(layer) + " crosses the residual marker at layer " +
                        std::to_string(i));
    }
  }
  throw Error(ErrorCode::kPlanShapeMismatch, "layer " + std::to_string(layer) + " has no consumer");
}

void reduce_outputs(LayerSpec& layer, const std::vector<std::size_t>& kept, const Matrix& selector) {
  if (layer.kind == LayerKind::kConv) {
    layer.conv = mode1_product(layer.conv, selector.transposed());
  } else if (layer.kind == LayerKind::kFC) {
    Matrix rows(kept.size(), layer.fc.cols());
    for (std::size_t k = 0; k < kept.size(); ++k) {
      auto src = layer.fc.row(kept[k]);
      std::copy(src.begin(), src.end(), rows.row(k).begin());
    }
    layer.fc = std::move(rows);
    if (layer.bias.size() > 0) {
      Vector b(kept.size());
      for (std::size_t k = 0; k < kept.size(); ++k) b[k] = layer.bias[kept[k]];
      layer.bias = std::move(b);
    }
  } else {
    throw Error(ErrorCode::kPlanShapeMismatch, "only conv and fc layers have output channels");
  }
  if (layer.bn) layer.bn = layer.bn->select(kept);
}

Matrix fold_into_fc(const Matrix& delivery, std::size_t w, std::size_t h, const Matrix& fc_weights) {
  const std::size_t m = delivery.rows();
  const std::size_t t = delivery.cols();
  const std::size_t block = w * h;
  if (fc_weights.cols() != m * block) {
    throw Error(ErrorCode::kShapeMismatch, "fc has " + std::to_string(fc_weights.cols()) + " inputs, expected " +
                                               std::to_string(m) + " channels x " + std::to_string(block));
  }
  Matrix out(fc_weights.rows(), t * block);
  for (std::size_t r = 0; r < fc_weights.rows(); ++r) {
    auto src = fc_weights.row(r);
    auto dst = out.row(r);
    for (std::size_t k = 0; k < t; ++k) {
      for (std::size_t i = 0; i < m; ++i) {
        const double coef = delivery(i, k);
        for (std::size_t pos = 0; pos < block; ++pos) dst[k * block + pos] += coef * src[i * block + pos];
      }
    }
  }
  return out;
}

void fold_into_consumer(LayerSpec& consumer, const Matrix& delivery, std::size_t spatial) {
  if (consumer.kind == LayerKind::kConv) {
    consumer.conv = mode2_product(consumer.conv, delivery.transposed());
  } else if (consumer.kind == LayerKind::kFC) {
    consumer.fc = fold_into_fc(delivery, spatial, 1, consumer.fc);
  } else {
    throw Error(ErrorCode::kPlanShapeMismatch, "consumer must be a conv or fc layer");
  }
}

}  // namespace lbyl
