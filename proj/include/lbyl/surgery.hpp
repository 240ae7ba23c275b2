#pragma once

// Channel surgery shared by structural pruning and restoration: locating the
// layer that consumes a layer's output channels, shrinking a layer's outputs
// and folding an m x t channel-mixing matrix into the consumer's inputs.

#include <cstddef>
#include <vector>

#include "lbyl/network.hpp"

namespace lbyl {

struct Consumer {
  std::size_t index = 0;
  /// Spatial positions per channel where the consumer reads the channels
  /// (w * h of the last channel-structured tensor; 1 for FC inputs).
  std::size_t spatial = 1;
};

/// The first Conv/FC layer after `layer`, skipping pooling and flatten layers.
/// Throws IllegalResidualPrune when the path crosses a residual marker and
/// PlanShapeMismatch when nothing consumes the output.
Consumer find_consumer(const NetworkModel& model, std::size_t layer);

/// Keeps only the `kept` output channels of a Conv/FC layer (filters or rows,
/// bias and BN entries), via the one-hot selector for Conv weights.
void reduce_outputs(LayerSpec& layer, const std::vector<std::size_t>& kept, const Matrix& selector);

/// Replaces consumer input weights by their product with an m x t delivery
/// matrix: Conv consumers via the 2-mode product with its transpose, FC
/// consumers via fold_into_fc.
void fold_into_consumer(LayerSpec& consumer, const Matrix& delivery, std::size_t spatial);

/// Redistributes FC columns laid out as m channel blocks of w*h positions:
/// new block k = sum_i delivery(i, k) * old block i, position-wise.
Matrix fold_into_fc(const Matrix& delivery, std::size_t w, std::size_t h, const Matrix& fc_weights);

}  // namespace lbyl
