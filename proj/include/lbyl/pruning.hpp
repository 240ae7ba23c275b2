#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lbyl/network.hpp"

namespace lbyl {

/// Data-independent filter importance. Lower scores are pruned first.
struct Criterion {
  enum class Kind { kL1Norm, kL2Norm, kL2GM, kRandom };

  Kind kind = Kind::kL2Norm;
  std::uint64_t seed = 0;  // only meaningful for kRandom

  static Criterion l1() { return {Kind::kL1Norm, 0}; }
  static Criterion l2() { return {Kind::kL2Norm, 0}; }
  static Criterion l2gm() { return {Kind::kL2GM, 0}; }
  static Criterion random(std::uint64_t seed) { return {Kind::kRandom, seed}; }

  /// "l1", "l2", "l2gm", "random:<seed>"
  std::string to_string() const;
  /// Accepts the to_string forms plus "random" (seed 0); throws Config otherwise.
  static Criterion parse(const std::string& text);

  bool operator==(const Criterion&) const = default;
};

struct PruningPlan {
  Criterion criterion;
  double ratio = 0.0;
  /// layer index -> sorted pruned filter indices
  std::map<std::size_t, std::vector<std::size_t>> layers;

  bool operator==(const PruningPlan&) const = default;
};

/// Scores the rows of an m x d filter bank. `salt` decorrelates the random
/// criterion across layers sharing one seed.
Vector score_filters(const Matrix& bank, const Criterion& criterion, std::uint64_t salt = 0);
Vector score_filters(const Tensor4& filters, const Criterion& criterion, std::uint64_t salt = 0);

/// floor(ratio * m) lowest-scoring indices, ties broken by lower index, sorted.
std::vector<std::size_t> select_pruned(const Vector& scores, double ratio);

/// Complement of `pruned` in [0, m), ascending.
std::vector<std::size_t> kept_indices(std::size_t m, const std::vector<std::size_t>& pruned);

/// m x t one-hot selector; column k holds a 1 at the k-th surviving index.
Matrix build_pruning_matrix(std::size_t m, const std::vector<std::size_t>& pruned);

/// Throws PlanShapeMismatch / AllPruned / IllegalResidualPrune when the plan
/// does not fit the model.
void validate_plan(const NetworkModel& model, const PruningPlan& plan);

/// Removes the planned filters and the matching input channels of each consumer.
NetworkModel apply_pruning(const NetworkModel& model, const PruningPlan& plan);

/// Every conv layer plus every hidden FC layer.
PruningPlan plan_layerwise(const NetworkModel& model, const Criterion& criterion, double ratio);

/// Only conv layers strictly inside a residual block whose output stays inside it.
PruningPlan plan_resnet(const NetworkModel& model, const Criterion& criterion, double ratio);

/// Prunable layers of a model for the given scheme ("layerwise" or "resnet").
std::vector<std::size_t> prunable_layers(const NetworkModel& model, const std::string& scheme);

/// Pruned filters for a single layer under a criterion and ratio.
std::vector<std::size_t> plan_layer(const NetworkModel& model, std::size_t layer, const Criterion& criterion,
                                    double ratio);

std::string plan_to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const std::string& text);

/// The weights of a Conv/FC layer as an m x d matrix of vectorized filters.
Matrix filter_bank(const LayerSpec& layer);

}  // namespace lbyl
