#pragma once

// Experiment orchestration: probe generation, prune -> restore -> evaluate
// pipelines, method comparisons, WARE-thresholded global pruning and lambda
// grid sweeps. Probe data only ever feeds metrics; restoration never sees it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lbyl/metrics.hpp"
#include "lbyl/network.hpp"
#include "lbyl/pruning.hpp"
#include "lbyl/restoration.hpp"
#include "lbyl/serialize.hpp"

namespace lbyl {

/// Worker count: hardware concurrency, capped by LBYL_THREADS when set.
std::size_t thread_limit();

/// Runs fn(0..n-1) on up to thread_limit() threads. Each index must write only
/// its own output slot; the first exception thrown is rethrown after joining.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

inline constexpr std::size_t kDefaultProbeCount = 16;

/// Inputs ~ N(0, 1), labels uniform over [0, classes).
Dataset generate_probe_data(std::size_t count, std::uint64_t seed, Shape3 shape, std::size_t classes = 10);

/// "lbnz-crc32:xxxxxxxx" over the model's serialized bytes.
std::string model_id(const NetworkModel& model);

/// Forward every probe sample, capturing the listed layers.
std::vector<TapRecord> capture_taps(const NetworkModel& model, const Dataset& probes,
                                    const std::set<std::size_t>& layers);

/// Layers whose WARE a report carries: every weight layer plus the last layer.
std::set<std::size_t> ware_layers(const NetworkModel& model);

/// WARE of every ware_layers() entry. Pruned layers compare against the
/// original's preserved channels.
std::map<std::size_t, double> ware_by_layer(const NetworkModel& original, const std::vector<TapRecord>& original_taps,
                                            const RestoreResult& restored, const Dataset& probes);

struct Evaluation {
  RestoreResult restored;
  RestorationReport report;
};

/// Restores `original` under `plan` and fills a report. With probes, the
/// report also carries AE bounds, WARE and an accuracy pair.
Evaluation evaluate_restoration(const NetworkModel& original, const PruningPlan& plan, Method method,
                                const Hyperparams& hp, const NmParams& nm, const Dataset* probes);

/// WARE at the model's last layer.
double final_ware(const RestorationReport& report);

struct ProbeSpec {
  std::size_t count = kDefaultProbeCount;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  // Model source: a file, or a synthetic architecture.
  std::optional<std::filesystem::path> model_path;
  std::optional<std::string> arch;
  std::uint64_t seed = 0;
  std::size_t scale = 1;

  // Plan source: a plan file, or criterion + ratio + scheme.
  std::optional<std::filesystem::path> plan_path;
  Criterion criterion = Criterion::l2();
  double ratio = 0.3;
  std::string scheme = "layerwise";

  Method method = Method::kLbyl;
  Hyperparams hp;
  NmParams nm;

  // Probe source for metrics (optional): a dataset file or a synthetic spec.
  std::optional<std::filesystem::path> probe_path;
  std::optional<ProbeSpec> probe_spec;

  std::optional<std::filesystem::path> model_out;
  std::optional<std::filesystem::path> report_json_out;
  std::optional<std::filesystem::path> report_csv_out;

  /// Throws Config unless there is exactly one model source and at most one
  /// probe source.
  void validate() const;
};

NetworkModel load_experiment_model(const ExperimentConfig& cfg);
PruningPlan load_experiment_plan(const ExperimentConfig& cfg, const NetworkModel& model);
std::optional<Dataset> load_experiment_probes(const ExperimentConfig& cfg, const NetworkModel& model);

struct PipelineResult {
  NetworkModel model;
  PruningPlan plan;
  RestorationReport report;
};

/// Loads, plans, restores and evaluates; writes whichever outputs are set.
PipelineResult run_pipeline(const ExperimentConfig& cfg);

struct CompareRow {
  std::size_t layer = 0;
  std::string metric;
  std::string method;
  double value = 0.0;
};

struct CompareResult {
  std::vector<std::string> methods;
  std::vector<RestorationReport> reports;  // one per method
  std::vector<CompareRow> rows;
  // Full restoration loss of the LBYL coefficients vs the NM coefficients on
  // the same basis, per pruned filter (only when lbyl is compared).
  std::size_t loss_checks = 0;
  std::size_t loss_violations = 0;
};

CompareResult run_compare(const NetworkModel& original, const PruningPlan& plan, const std::vector<Method>& methods,
                          const Hyperparams& hp, const NmParams& nm, const Dataset* probes);

std::string compare_to_json(const CompareResult& result);
std::string compare_to_csv(const CompareResult& result);

struct BatchSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<double> ware_lbyl;  // final-layer WARE per seed
  std::vector<double> ware_nm;
  std::vector<double> ware_prune;
  double win_rate = 0.0;  // fraction of seeds with WARE(lbyl) < WARE(prune)
  double mean_lbyl = 0.0;
  double mean_nm = 0.0;
  double mean_prune = 0.0;
};

/// Seeded synthetic models of one architecture, each planned layerwise and
/// evaluated under all three methods on its own seeded probes.
BatchSummary run_batch(const std::string& arch, const std::vector<std::uint64_t>& seeds, const Criterion& criterion,
                       double ratio, const Hyperparams& hp, const NmParams& nm, std::size_t probe_count);

std::string batch_to_json(const BatchSummary& summary);

struct GlobalPruneConfig {
  double ware_threshold = 0.3;
  double step = 0.1;
  double max_ratio = 0.9;
  std::string scheme = "layerwise";

  void validate() const;
};

struct GlobalPruneResult {
  NetworkModel model;
  PruningPlan plan;
  RestorationReport report;
  std::map<std::size_t, double> ratios;  // accepted ratio per prunable layer
};

/// Round-robin over the prunable layers: each turn tries one more `step` of
/// a layer's filters, restores the whole plan with LBYL and measures WARE at
/// every reported layer. Any value above the threshold reverts the increment
/// and freezes the layer. Layers also freeze at max_ratio.
GlobalPruneResult global_adaptive_prune(const NetworkModel& model, const Criterion& criterion,
                                        const GlobalPruneConfig& cfg, const Hyperparams& hp, const Dataset& probes);

struct SweepRow {
  Hyperparams hp;
  double final_ware = 0.0;
  double mean_ware = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // grid order
  std::size_t best = 0;
};

/// Ranks each grid point by final-layer WARE; earlier grid points win ties.
SweepResult sweep_lambdas(const NetworkModel& model, const PruningPlan& plan, const std::vector<Hyperparams>& grid,
                          const Dataset& probes);

std::string sweep_to_json(const SweepResult& result);

/// "l1:l2,l1:l2,..." -> grid points.
std::vector<Hyperparams> parse_grid(const std::string& text);

/// "3x8x8" -> Shape3.
Shape3 parse_shape(const std::string& text);

}  // namespace lbyl
