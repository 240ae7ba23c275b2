// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 numerical failure, 4 IO failure.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "lbyl/error.hpp"
#include "lbyl/harness.hpp"

namespace {

using namespace lbyl;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIO = 4;

bool is_csv(const fs::path& p) { return p.extension() == ".csv"; }

std::vector<Method> parse_methods(const std::string& text) {
  std::vector<Method> out;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(method_from_string(part));
  return out;
}

std::string read_text(const fs::path& p) {
  const std::vector<std::uint8_t> bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

struct RestoreFlags {
  double lambda1 = Hyperparams{}.lambda1;
  double lambda2 = Hyperparams{}.lambda2;
  double nm_lambda = NmParams{}.lambda_mix;
  double nm_threshold = NmParams{}.threshold;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--lambda1", lambda1, "BN-error weight")->capture_default_str();
    cmd->add_option("--lambda2", lambda2, "coefficient ridge weight")->capture_default_str();
    cmd->add_option("--nm-lambda", nm_lambda, "NM cosine/bias balance")->capture_default_str();
    cmd->add_option("--nm-threshold", nm_threshold, "NM minimum cosine similarity")->capture_default_str();
  }
  Hyperparams hp() const {
    Hyperparams h{lambda1, lambda2};
    h.validate();
    return h;
  }
  NmParams nm() const { return {nm_lambda, nm_threshold}; }
};

int run(int argc, char** argv) {
  CLI::App app{"Data-free restoration of pruned convolutional networks"};
  app.require_subcommand(1);

  // gen
  std::string arch;
  std::uint64_t seed = 0;
  std::size_t scale = 1;
  fs::path out;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic model");
  gen->add_option("--arch", arch, "vgg-tiny, resnet-tiny or mlp-tiny")->required();
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--scale", scale, "width multiplier")->capture_default_str();
  gen->add_option("--out", out)->required();

  // gen-data
  std::size_t count = kDefaultProbeCount;
  std::string shape = "3x8x8";
  std::size_t classes = 10;
  auto* gen_data = app.add_subcommand("gen-data", "Generate a synthetic probe dataset");
  gen_data->add_option("--count", count)->capture_default_str();
  gen_data->add_option("--seed", seed)->capture_default_str();
  gen_data->add_option("--shape", shape, "CxWxH")->capture_default_str();
  gen_data->add_option("--classes", classes)->capture_default_str();
  gen_data->add_option("--out", out)->required();

  // prune
  fs::path model_path, plan_path, plan_out, data_path, report_path;
  std::string criterion = "l2";
  double ratio = 0.3;
  std::string scheme = "layerwise";
  auto* prune = app.add_subcommand("prune", "Plan and apply filter pruning without compensation");
  prune->add_option("--model", model_path)->required();
  prune->add_option("--criterion", criterion, "l1, l2, l2gm or random:<seed>")->capture_default_str();
  prune->add_option("--ratio", ratio)->capture_default_str();
  prune->add_option("--scheme", scheme)->check(CLI::IsMember({"layerwise", "resnet"}))->capture_default_str();
  prune->add_option("--plan-out", plan_out);
  prune->add_option("--out", out);

  // restore
  std::string method = "lbyl";
  RestoreFlags restore_flags;
  auto* restore_cmd = app.add_subcommand("restore", "Prune and restore a model under a plan");
  restore_cmd->add_option("--model", model_path)->required();
  restore_cmd->add_option("--plan", plan_path)->required();
  restore_cmd->add_option("--method", method)->check(CLI::IsMember({"lbyl", "nm", "none"}))->capture_default_str();
  restore_flags.add_to(restore_cmd);
  restore_cmd->add_option("--out", out)->required();
  restore_cmd->add_option("--data", data_path, "probe dataset for the optional report");
  restore_cmd->add_option("--report", report_path, "report path (.json or .csv)");

  // eval
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a model on a dataset");
  eval->add_option("--model", model_path)->required();
  eval->add_option("--data", data_path)->required();
  eval->add_option("--report", report_path);

  // compare
  std::string methods = "lbyl,nm,none";
  RestoreFlags compare_flags;
  auto* compare = app.add_subcommand("compare", "Compare restoration methods under one plan");
  compare->add_option("--model", model_path)->required();
  compare->add_option("--plan", plan_path)->required();
  compare->add_option("--methods", methods)->capture_default_str();
  compare_flags.add_to(compare);
  compare->add_option("--data", data_path);
  compare->add_option("--report", report_path);

  // global-prune
  double threshold = 0.3;
  double step = 0.1;
  double max_ratio = 0.9;
  RestoreFlags global_flags;
  auto* global = app.add_subcommand("global-prune", "WARE-thresholded adaptive per-layer pruning");
  global->add_option("--model", model_path)->required();
  global->add_option("--criterion", criterion)->capture_default_str();
  global->add_option("--threshold", threshold)->capture_default_str();
  global->add_option("--step", step)->capture_default_str();
  global->add_option("--max-ratio", max_ratio)->capture_default_str();
  global->add_option("--scheme", scheme)->check(CLI::IsMember({"layerwise", "resnet"}))->capture_default_str();
  global_flags.add_to(global);
  global->add_option("--data", data_path)->required();
  global->add_option("--out", out)->required();
  global->add_option("--plan-out", plan_out);
  global->add_option("--report", report_path);

  // sweep
  std::string grid = "1e-6:1e-4,1e-5:1e-3,1e-4:1e-2";
  auto* sweep = app.add_subcommand("sweep", "Grid search over (lambda1, lambda2)");
  sweep->add_option("--model", model_path)->required();
  sweep->add_option("--plan", plan_path)->required();
  sweep->add_option("--grid", grid, "l1:l2,l1:l2,...")->capture_default_str();
  sweep->add_option("--data", data_path)->required();
  sweep->add_option("--report", report_path);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  auto emit = [&](const std::string& text) {
    if (report_path.empty()) {
      std::cout << text;
    } else {
      write_text_atomic(report_path, text);
    }
  };

  if (*gen) {
    save_model(out, generate_synthetic(arch, seed, scale));
  } else if (*gen_data) {
    save_dataset(out, generate_probe_data(count, seed, parse_shape(shape), classes));
  } else if (*prune) {
    const NetworkModel model = load_model(model_path);
    const Criterion crit = Criterion::parse(criterion);
    const PruningPlan plan =
        scheme == "resnet" ? plan_resnet(model, crit, ratio) : plan_layerwise(model, crit, ratio);
    if (!plan_out.empty()) write_text_atomic(plan_out, plan_to_json(plan) + "\n");
    if (!out.empty()) save_model(out, apply_pruning(model, plan));
    if (plan_out.empty() && out.empty()) std::cout << plan_to_json(plan) << "\n";
  } else if (*restore_cmd) {
    const NetworkModel model = load_model(model_path);
    const PruningPlan plan = plan_from_json(read_text(plan_path));
    std::optional<Dataset> probes;
    if (!data_path.empty()) probes = load_dataset(data_path);
    const Evaluation ev = evaluate_restoration(model, plan, method_from_string(method), restore_flags.hp(),
                                               restore_flags.nm(), probes ? &*probes : nullptr);
    save_model(out, ev.restored.model);
    if (!report_path.empty()) {
      emit(emit_report(ev.report, is_csv(report_path) ? ReportFormat::kCsv : ReportFormat::kJson));
    }
  } else if (*eval) {
    const NetworkModel model = load_model(model_path);
    const Dataset data = load_dataset(data_path);
    nlohmann::ordered_json doc;
    doc["model_id"] = model_id(model);
    doc["samples"] = data.size();
    doc["accuracy"] = accuracy(model, data);
    emit(doc.dump(2) + "\n");
  } else if (*compare) {
    const NetworkModel model = load_model(model_path);
    const PruningPlan plan = plan_from_json(read_text(plan_path));
    std::optional<Dataset> probes;
    if (!data_path.empty()) probes = load_dataset(data_path);
    const CompareResult result = run_compare(model, plan, parse_methods(methods), compare_flags.hp(),
                                             compare_flags.nm(), probes ? &*probes : nullptr);
    emit(!report_path.empty() && is_csv(report_path) ? compare_to_csv(result) : compare_to_json(result));
  } else if (*global) {
    const NetworkModel model = load_model(model_path);
    const Dataset probes = load_dataset(data_path);
    GlobalPruneConfig cfg{threshold, step, max_ratio, scheme};
    const GlobalPruneResult result =
        global_adaptive_prune(model, Criterion::parse(criterion), cfg, global_flags.hp(), probes);
    save_model(out, result.model);
    if (!plan_out.empty()) write_text_atomic(plan_out, plan_to_json(result.plan) + "\n");
    emit(emit_report(result.report,
                     !report_path.empty() && is_csv(report_path) ? ReportFormat::kCsv : ReportFormat::kJson));
  } else if (*sweep) {
    const NetworkModel model = load_model(model_path);
    const PruningPlan plan = plan_from_json(read_text(plan_path));
    const Dataset probes = load_dataset(data_path);
    emit(sweep_to_json(sweep_lambdas(model, plan, parse_grid(grid), probes)));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const lbyl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.category()) {
      case lbyl::ErrorCategory::kConfig: return kExitConfig;
      case lbyl::ErrorCategory::kNumerical: return kExitNumerical;
      case lbyl::ErrorCategory::kIO: return kExitIO;
    }
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIO;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
