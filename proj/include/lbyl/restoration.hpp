#pragma once

// Data-free restoration of pruned networks.
//
// For a pruned filter j of layer l, the compensation coefficients s over the
// preserved filters minimize
//
//   L(s) = ||y - X s||^2 + lambda1 * ((g_j / sd_j) (s.p - mu_j + (sd_j / g_j) b_j))^2 + lambda2 * ||s||^2
//
// where column i of X is (sd_j g_i) / (g_j sd_i) * vec(W_i), y = vec(W_j) and
// p_i = (sd_j g_i) / (g_j sd_i) * (mu_i - (sd_i / g_i) b_i), with (g, b, mu, sd)
// the layer's BN scale, shift, mean and standard deviation. The loss is a
// strictly convex quadratic for lambda2 > 0 and is minimized by one SPD solve.
// The coefficients become the pruned rows of an m x t delivery matrix that is
// folded into the consuming layer's input channels.

#include <map>
#include <vector>

#include "lbyl/network.hpp"
#include "lbyl/pruning.hpp"
#include "lbyl/surgery.hpp"

namespace lbyl {

struct Hyperparams {
  double lambda1 = 1e-5;  // BN-error weight
  double lambda2 = 1e-3;  // coefficient ridge weight

  /// Throws Config if either weight is negative or non-finite.
  void validate() const;
};

/// Neuron-merging style one-to-one baseline parameters.
struct NmParams {
  double lambda_mix = 0.85;  // cosine vs bias-distance balance
  double threshold = 0.1;    // minimum cosine similarity to compensate at all
};

/// Least-squares basis for one pruned filter.
struct ScaledBasis {
  Matrix x;  // d x columns.size(), one scaled preserved filter per column
  Vector y;  // vec(W_j)
  Vector p;  // scaled BN offsets per column
  double gamma_j = 1.0;
  double sigma_j = 1.0;
  double mu_j = 0.0;
  double beta_j = 0.0;
  std::vector<std::size_t> columns;   // filter index of each column, ascending
  std::vector<std::size_t> excluded;  // preserved filters left out (degenerate BN)
  bool unit_scale = false;            // BN-free fallback basis
};

inline constexpr double kDegenerateBnTolerance = 1e-6;

/// `bank` is m x d (one vectorized filter per row); `bn` may be null, meaning
/// identity normalization. Throws DegenerateTarget if filter j's sigma or
/// |gamma| is below kDegenerateBnTolerance.
ScaledBasis build_scaled_basis(const Matrix& bank, const BatchNormParams* bn, std::size_t pruned_j,
                               const std::vector<std::size_t>& kept);

/// Fallback basis with unit scale factors and no BN offsets.
ScaledBasis build_unit_basis(const Matrix& bank, std::size_t pruned_j, const std::vector<std::size_t>& kept);

/// Closed-form minimizer of the restoration loss.
Vector solve_coefficients(const ScaledBasis& basis, const Hyperparams& hp);

double restoration_loss(const ScaledBasis& basis, const Vector& s, const Hyperparams& hp);
Vector restoration_loss_gradient(const ScaledBasis& basis, const Vector& s, const Hyperparams& hp);

/// Coefficients of the single-filter baseline, zero except possibly one entry.
Vector solve_nm_coefficients(const ScaledBasis& basis, const NmParams& nm);

/// m x t: preserved rows one-hot, pruned row j carries coeffs.at(j) (a vector
/// over `kept`).
Matrix build_delivery_matrix(std::size_t m, const std::vector<std::size_t>& kept,
                             const std::map<std::size_t, Vector>& coeffs);

/// One solved pruned filter.
struct FilterSolve {
  std::size_t filter = 0;
  ScaledBasis basis;
  Vector s;       // over basis.columns
  Vector coeffs;  // over the layer's preserved filters (zeros at excluded ones)
  bool fallback = false;
};

struct RestoreResult {
  NetworkModel model;
  std::map<std::size_t, Matrix> delivery;
  std::map<std::size_t, std::vector<FilterSolve>> solves;
  std::map<std::size_t, std::vector<std::size_t>> kept;
};

enum class Method { kLbyl, kNm, kNone };

std::string to_string(Method method);
Method method_from_string(const std::string& name);

RestoreResult restore_lbyl(const NetworkModel& model, const PruningPlan& plan, const Hyperparams& hp);
RestoreResult restore_nm(const NetworkModel& model, const PruningPlan& plan, const NmParams& nm);
/// Plain pruning expressed as restoration with all-zero pruned rows.
RestoreResult restore_none(const NetworkModel& model, const PruningPlan& plan);

RestoreResult restore(const NetworkModel& model, const PruningPlan& plan, Method method, const Hyperparams& hp,
                      const NmParams& nm);

/// Neuron variant for FC layers without BN: ridge regression of the pruned
/// neuron's incoming weights on the preserved neurons' incoming weights.
RestoreResult restore_fc_neuron(const NetworkModel& model, const PruningPlan& plan, double lambda);

}  // namespace lbyl
