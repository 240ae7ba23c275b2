#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lbyl/network.hpp"
#include "lbyl/pruning.hpp"
#include "lbyl/restoration.hpp"
#include "lbyl/serialize.hpp"

namespace lbyl {

/// ||y - X s||_2, the data-free residual of one pruned filter.
double residual_error(const ScaledBasis& basis, const Vector& s);

/// |(g_j / sd_j)(s.p - mu_j + (sd_j / g_j) b_j)|, the constant BN offset.
double bn_error(const ScaledBasis& basis, const Vector& s);

/// Upper bound on the ReLU-induced error of approximating filter j by the
/// preserved filters with coefficients `coeffs` (over `kept`), averaged over
/// probes: sum_k |s_k| ||N(Z_k)||_1 + sum max(0, -N(Z_j)).
/// `taps` hold the pre-BN output of `layer`; `bn` may be null (identity).
double ae_bound(const Vector& coeffs, const std::vector<TapRecord>& taps, std::size_t layer,
                const BatchNormParams* bn, std::size_t pruned_j, const std::vector<std::size_t>& kept);

inline constexpr double kWareEpsilon = 1e-12;

/// Mean over samples of ||A - A_hat||_1 / (||A||_1 + eps) at `layer`. When
/// `original_channels` is given, only those channels of the original taps
/// are compared (the restored layer has been pruned).
double ware(const std::vector<TapRecord>& original, const std::vector<TapRecord>& restored, std::size_t layer,
            const std::vector<std::size_t>* original_channels = nullptr);

/// Argmax accuracy; ties resolve to the lowest class index.
double accuracy(const NetworkModel& model, const Dataset& data);
std::size_t argmax(std::span<const double> logits);

struct ScaleStats {
  double mean = 0.0;
  double max = 0.0;
  double min = 0.0;

  bool operator==(const ScaleStats&) const = default;
};

/// Statistics of |entry| over every pruned row of every delivery matrix.
/// Throws EmptyDelivery when the plan prunes nothing.
ScaleStats scale_stats(const std::map<std::size_t, Matrix>& delivery, const PruningPlan& plan);

struct FilterErrorRecord {
  std::size_t filter = 0;
  double re = 0.0;
  double be = 0.0;
  std::optional<double> ae_bound;

  bool operator==(const FilterErrorRecord&) const = default;
};

struct LayerErrorRecord {
  std::size_t layer = 0;
  std::vector<FilterErrorRecord> filters;
  double re_sum = 0.0;
  double be_sum = 0.0;
  std::optional<double> ae_bound_sum;

  bool operator==(const LayerErrorRecord&) const = default;
};

struct AccuracyPair {
  double original = 0.0;
  double restored = 0.0;

  bool operator==(const AccuracyPair&) const = default;
};

struct RestorationReport {
  std::string original_model_id;
  std::string restored_model_id;
  PruningPlan plan;
  std::string method;
  Hyperparams hyperparams;
  NmParams nm_params;
  std::vector<LayerErrorRecord> layer_errors;
  std::map<std::size_t, double> ware;
  std::optional<ScaleStats> scale_stats;
  std::optional<AccuracyPair> accuracy;
  std::map<std::size_t, Matrix> delivery;

  bool operator==(const RestorationReport& o) const;
};

/// RE/BE per pruned filter, plus the AE bound when original-model probe taps
/// (capturing every planned layer) are supplied.
std::vector<LayerErrorRecord> layer_errors(const NetworkModel& original, const RestoreResult& restored,
                                           const std::vector<TapRecord>* probe_taps);

enum class ReportFormat { kJson, kCsv };

std::string emit_report(const RestorationReport& report, ReportFormat format);
RestorationReport report_from_json(const std::string& text);

/// Number of CSV data rows emit_report produces for this report.
std::size_t csv_row_count(const RestorationReport& report);

}  // namespace lbyl
