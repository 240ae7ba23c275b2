#include <cstdlib>
#include <filesystem>

#include "doctest.h"
#include "lbyl/error.hpp"
#include "lbyl/harness.hpp"
#include "test_util.hpp"

using namespace lbyl;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lbyl_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("probe data generation") {
  const Dataset a = generate_probe_data(16, 4, {3, 8, 8});
  CHECK(serialize_dataset(a) == serialize_dataset(generate_probe_data(16, 4, {3, 8, 8})));
  CHECK(a.size() == 16);
  CHECK(a.sample_shape == Shape3{3, 8, 8});
  for (std::int32_t l : a.labels) CHECK((l >= 0 && l < 10));
  const Dataset back = deserialize_dataset(serialize_dataset(a));
  const NetworkModel v = generate_synthetic("vgg-tiny", 0);
  for (const Tensor3& x : back.inputs) CHECK_NOTHROW(forward(v, x));
  CHECK(code_of([] { generate_probe_data(0, 1, {1, 1, 1}); }) == ErrorCode::kConfig);
}

TEST_CASE("shape and grid parsing") {
  CHECK(parse_shape("3x8x8") == Shape3{3, 8, 8});
  CHECK(code_of([] { parse_shape("3x8"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_shape("3x0x8"); }) == ErrorCode::kConfig);
  const auto grid = parse_grid("1e-5:1e-3,0:0.5");
  REQUIRE(grid.size() == 2);
  CHECK(grid[1].lambda2 == 0.5);
  CHECK(code_of([] { parse_grid("1e-5"); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_grid("-1:1"); }) == ErrorCode::kConfig);
}

TEST_CASE("thread limit honors LBYL_THREADS") {
  setenv("LBYL_THREADS", "1", 1);
  CHECK(thread_limit() == 1);
  std::vector<int> hits(50, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] = static_cast<int>(i); });
  for (std::size_t i = 0; i < hits.size(); ++i) CHECK(hits[i] == static_cast<int>(i));
  unsetenv("LBYL_THREADS");
  CHECK(thread_limit() >= 1);
  CHECK_THROWS_AS(parallel_for(8, [](std::size_t i) {
                    if (i == 5) throw Error(ErrorCode::kConfig, "boom");
                  }),
                  Error);
}

TEST_CASE("experiment config validation") {
  ExperimentConfig cfg;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::kConfig);
  cfg.arch = "vgg-tiny";
  cfg.model_path = "x.lbnz";
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::kConfig);
  cfg.model_path.reset();
  cfg.probe_spec = ProbeSpec{};
  cfg.probe_path = "p.lbnz";
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::kConfig);
  cfg.probe_path.reset();
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("pipeline: prune-only equals apply_pruning; ratio 0 changes nothing") {
  ExperimentConfig cfg;
  cfg.arch = "vgg-tiny";
  cfg.ratio = 0.25;
  cfg.method = Method::kNone;
  cfg.probe_spec = ProbeSpec{};
  const PipelineResult none = run_pipeline(cfg);
  const NetworkModel original = generate_synthetic("vgg-tiny", 0);
  CHECK(serialize(none.model) == serialize(apply_pruning(original, none.plan)));

  cfg.ratio = 0.0;
  cfg.method = Method::kLbyl;
  const PipelineResult zero = run_pipeline(cfg);
  CHECK(zero.report.layer_errors.empty());
  REQUIRE(zero.report.accuracy.has_value());
  CHECK(zero.report.accuracy->original == zero.report.accuracy->restored);
  for (const auto& [layer, v] : zero.report.ware) CHECK(v == 0.0);
  CHECK_FALSE(zero.report.scale_stats.has_value());
}

TEST_CASE("pipeline: LBYL beats prune-only at the final layer on vgg-tiny seed 0") {
  ExperimentConfig cfg;
  cfg.arch = "vgg-tiny";
  cfg.criterion = Criterion::l2();
  cfg.ratio = 0.25;
  cfg.probe_spec = ProbeSpec{};
  const RestorationReport lbyl = run_pipeline(cfg).report;
  cfg.method = Method::kNone;
  const RestorationReport prune = run_pipeline(cfg).report;
  CHECK(final_ware(lbyl) < final_ware(prune));
}

TEST_CASE("pipeline writes outputs and restoration ignores probe data") {
  const fs::path dir = scratch("pipeline");
  ExperimentConfig cfg;
  cfg.arch = "resnet-tiny";
  cfg.scheme = "resnet";
  cfg.ratio = 0.5;
  cfg.model_out = dir / "with.lbnz";
  cfg.report_json_out = dir / "r.json";
  cfg.report_csv_out = dir / "r.csv";
  save_dataset(dir / "probes.lbnz", generate_probe_data(8, 3, {3, 8, 8}));
  cfg.probe_path = dir / "probes.lbnz";
  const PipelineResult with = run_pipeline(cfg);
  cfg.probe_path.reset();
  cfg.model_out = dir / "without.lbnz";
  cfg.report_json_out.reset();
  cfg.report_csv_out.reset();
  run_pipeline(cfg);
  CHECK(read_file(dir / "with.lbnz") == read_file(dir / "without.lbnz"));

  const std::vector<std::uint8_t> json = read_file(dir / "r.json");
  CHECK(report_from_json(std::string(json.begin(), json.end())) == with.report);
  CHECK(fs::file_size(dir / "r.csv") > 0);
  fs::remove_all(dir);
}

TEST_CASE("comparison") {
  const NetworkModel v = generate_synthetic("vgg-tiny", 2);
  const PruningPlan plan = plan_layerwise(v, Criterion::l2(), 0.3);
  const Dataset probes = generate_probe_data(8, 1, v.input_shape);

  const CompareResult dup = run_compare(v, plan, {Method::kNone, Method::kNone}, {}, {}, &probes);
  CHECK(dup.reports[0] == dup.reports[1]);

  const CompareResult all = run_compare(v, plan, {Method::kLbyl, Method::kNm, Method::kNone}, {}, {}, &probes);
  CHECK(all.loss_checks > 0);
  CHECK(all.loss_violations == 0);
  CHECK(compare_to_csv(all).find("layer,metric,method,value") == 0);
  CHECK(code_of([&] { run_compare(v, plan, {Method::kLbyl}, {}, {}, &probes); }) == ErrorCode::kConfig);

  // Each pruned filter duplicates a preserved one: both methods are exact.
  std::mt19937_64 rng(12);
  NetworkModel m;
  m.input_shape = {2, 4, 4};
  Tensor4 w0 = random_tensor4(rng, {4, 2, 3, 3});
  for (std::size_t e = 0; e < 18; ++e) w0.filter(3)[e] = w0.filter(0)[e];
  m.layers.push_back(LayerSpec::make_conv(w0, std::nullopt, Activation::kReLU, 1, 1));
  m.layers.push_back(LayerSpec::make_conv(random_tensor4(rng, {3, 4, 3, 3}), std::nullopt, Activation::kNone, 1, 1));
  const Dataset p2 = generate_probe_data(4, 2, m.input_shape);
  const CompareResult same =
      run_compare(m, {Criterion::l2(), 0.0, {{0, {3}}}}, {Method::kLbyl, Method::kNm}, {0.0, 0.0}, {}, &p2);
  CHECK(same.reports[0].ware.at(1) <= 1e-12);
  CHECK(same.reports[1].ware.at(1) <= 1e-12);
}

TEST_CASE("batch summary") {
  const BatchSummary s = run_batch("vgg-tiny", {0, 1, 2, 3}, Criterion::l2(), 0.3, {}, {}, 8);
  CHECK(s.ware_lbyl.size() == 4);
  CHECK((s.win_rate >= 0.0 && s.win_rate <= 1.0));
  CHECK(batch_to_json(s).find("win_rate_lbyl_over_none") != std::string::npos);
  const BatchSummary again = run_batch("vgg-tiny", {0, 1, 2, 3}, Criterion::l2(), 0.3, {}, {}, 8);
  CHECK(again.ware_lbyl == s.ware_lbyl);
}

TEST_CASE("global adaptive pruning") {
  const NetworkModel v = generate_synthetic("vgg-tiny", 0);
  const Dataset probes = generate_probe_data(8, 5, v.input_shape);

  const GlobalPruneResult open = global_adaptive_prune(v, Criterion::l2(), {1e9, 0.1, 0.9}, {}, probes);
  for (std::size_t layer : prunable_layers(v, "layerwise")) {
    CHECK(open.ratios.at(layer) == doctest::Approx(0.9));
    CHECK(open.plan.layers.at(layer).size() ==
          static_cast<std::size_t>(std::floor(0.9 * static_cast<double>(v.layers[layer].out_channels()))));
  }

  const GlobalPruneResult closed = global_adaptive_prune(v, Criterion::l2(), {0.0, 0.1, 0.9}, {}, probes);
  CHECK(closed.plan.layers.empty());

  std::map<std::size_t, std::size_t> previous;
  for (double threshold : {0.1, 0.3, 0.5}) {
    const GlobalPruneResult r = global_adaptive_prune(v, Criterion::l2(), {threshold, 0.1, 0.9}, {}, probes);
    for (const auto& [layer, w] : r.report.ware) CHECK(w <= threshold);
    for (const auto& [layer, pruned] : r.plan.layers) CHECK(pruned.size() >= previous[layer]);
    for (const auto& [layer, count] : previous) {
      const auto it = r.plan.layers.find(layer);
      CHECK((it != r.plan.layers.end() && it->second.size() >= count));
    }
    previous.clear();
    for (const auto& [layer, pruned] : r.plan.layers) previous[layer] = pruned.size();
  }
  CHECK(code_of([&] { global_adaptive_prune(v, Criterion::l2(), {0.3, 0.0, 0.9}, {}, probes); }) ==
        ErrorCode::kConfig);
  CHECK(code_of([&] { global_adaptive_prune(v, Criterion::l2(), {0.3, 0.5, 0.4}, {}, probes); }) ==
        ErrorCode::kConfig);
}

TEST_CASE("lambda sweep") {
  const NetworkModel v = generate_synthetic("vgg-tiny", 0);
  const PruningPlan plan = plan_layerwise(v, Criterion::l2(), 0.25);
  const Dataset probes = generate_probe_data(8, 9, v.input_shape);

  const SweepResult one = sweep_lambdas(v, plan, {{1e-5, 1e-3}}, probes);
  CHECK(one.best == 0);

  // A huge ridge pushes every coefficient to zero, so that point is
  // dominated by any reasonable one.
  const SweepResult two = sweep_lambdas(v, plan, {{0.0, 1e9}, {1e-5, 1e-3}}, probes);
  CHECK(two.best == 1);

  std::vector<Hyperparams> grid;
  for (double l1 : {1e-6, 1e-5, 1e-4})
    for (double l2 : {1e-4, 1e-3, 1e-2}) grid.push_back({l1, l2});
  const SweepResult a = sweep_lambdas(v, plan, grid, probes);
  const SweepResult b = sweep_lambdas(v, plan, grid, probes);
  CHECK(a.best == b.best);
  CHECK(sweep_to_json(a) == sweep_to_json(b));
  CHECK(code_of([&] { sweep_lambdas(v, plan, {}, probes); }) == ErrorCode::kConfig);
}

TEST_CASE("a BN-matched duplicate is restored losslessly through ReLU") {
  NetworkModel v = generate_synthetic("vgg-tiny", 1);
  PruningPlan plan{Criterion::l2(), 0.0, {}};
  for (std::size_t layer : {0, 1, 2}) {
    LayerSpec& l = v.layers[layer];
    BatchNormParams& bn = *l.bn;
    // Filter 3 becomes c * filter 0 with BN chosen so both normalize identically.
    const double c = 1.7;
    for (std::size_t e = 0; e < l.conv.shape().filter_size(); ++e) l.conv.filter(3)[e] = c * l.conv.filter(0)[e];
    bn.gamma[3] = 0.9;
    bn.sigma[3] = c * bn.gamma[3] * bn.sigma[0] / bn.gamma[0];
    bn.mu[3] = c * bn.mu[0];
    bn.beta[3] = bn.beta[0];
    plan.layers[layer] = {3};
  }
  const Dataset probes = generate_probe_data(8, 1, v.input_shape);
  const double lbyl = final_ware(evaluate_restoration(v, plan, Method::kLbyl, {0.0, 0.0}, {}, &probes).report);
  const double prune = final_ware(evaluate_restoration(v, plan, Method::kNone, {}, {}, &probes).report);
  CHECK(lbyl <= 1e-12);
  CHECK(prune > 0.1);
}
