#include "lbyl/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lbyl/error.hpp"

namespace lbyl {

std::size_t thread_limit() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("LBYL_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_limit(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto work = [&] {
    for (;;) {
      std::size_t i = 0;
      {
        std::lock_guard lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

Dataset generate_probe_data(std::size_t count, std::uint64_t seed, Shape3 shape, std::size_t classes) {
  if (count == 0) throw Error(ErrorCode::kConfig, "probe count must be at least 1");
  if (shape.numel() == 0) throw Error(ErrorCode::kConfig, "probe shape must be non-empty");
  if (classes == 0) throw Error(ErrorCode::kConfig, "class count must be at least 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> label(0, static_cast<std::int32_t>(classes) - 1);
  Dataset data;
  data.sample_shape = shape;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor3 x(shape);
    for (double& v : x.values()) v = normal(rng);
    data.inputs.push_back(std::move(x));
    data.labels.push_back(label(rng));
  }
  return data;
}

std::string model_id(const NetworkModel& model) {
  const std::vector<std::uint8_t> bytes = serialize(model);
  char buf[32];
  std::snprintf(buf, sizeof buf, "lbnz-crc32:%08x", crc32_of(bytes));
  return buf;
}

std::vector<TapRecord> capture_taps(const NetworkModel& model, const Dataset& probes,
                                    const std::set<std::size_t>& layers) {
  if (!(probes.sample_shape == model.input_shape)) {
    throw Error(ErrorCode::kShapeMismatch, "probe shape does not match the model input");
  }
  std::vector<TapRecord> taps(probes.size());
  parallel_for(probes.size(), [&](std::size_t i) { taps[i] = forward(model, probes.inputs[i], layers).taps; });
  return taps;
}

std::set<std::size_t> ware_layers(const NetworkModel& model) {
  std::set<std::size_t> out;
  for (std::size_t idx : weight_layers(model)) out.insert(idx);
  if (!model.layers.empty()) out.insert(model.layers.size() - 1);
  return out;
}

std::map<std::size_t, double> ware_by_layer(const NetworkModel& original, const std::vector<TapRecord>& original_taps,
                                            const RestoreResult& restored, const Dataset& probes) {
  const std::set<std::size_t> layers = ware_layers(original);
  const std::vector<TapRecord> restored_taps = capture_taps(restored.model, probes, layers);
  std::map<std::size_t, double> out;
  for (std::size_t layer : layers) {
    auto it = restored.kept.find(layer);
    out[layer] = ware(original_taps, restored_taps, layer, it == restored.kept.end() ? nullptr : &it->second);
  }
  return out;
}

namespace {

double accuracy_from_taps(const std::vector<TapRecord>& taps, std::size_t last, const Dataset& probes) {
  if (taps.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (static_cast<std::int64_t>(argmax(taps[i].at(last).a.values())) == probes.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(taps.size());
}

// Shared by every evaluation path. `original_taps` must cover ware_layers().
Evaluation evaluate_with_taps(const NetworkModel& original, const PruningPlan& plan, Method method,
                              const Hyperparams& hp, const NmParams& nm, const Dataset* probes,
                              const std::vector<TapRecord>* original_taps, bool with_errors) {
  Evaluation ev;
  ev.restored = restore(original, plan, method, hp, nm);
  RestorationReport& r = ev.report;
  r.original_model_id = model_id(original);
  r.restored_model_id = model_id(ev.restored.model);
  r.plan = plan;
  r.method = to_string(method);
  r.hyperparams = hp;
  r.nm_params = nm;
  r.delivery = ev.restored.delivery;
  if (with_errors) r.layer_errors = layer_errors(original, ev.restored, original_taps);
  try {
    r.scale_stats = scale_stats(ev.restored.delivery, plan);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kEmptyDelivery) throw;
  }
  if (probes != nullptr) {
    r.ware = ware_by_layer(original, *original_taps, ev.restored, *probes);
    if (with_errors) {
      const std::size_t last = original.layers.size() - 1;
      const std::vector<TapRecord> restored_last = capture_taps(ev.restored.model, *probes, {last});
      r.accuracy = AccuracyPair{accuracy_from_taps(*original_taps, last, *probes),
                                accuracy_from_taps(restored_last, last, *probes)};
    }
  }
  return ev;
}

}  // namespace

Evaluation evaluate_restoration(const NetworkModel& original, const PruningPlan& plan, Method method,
                                const Hyperparams& hp, const NmParams& nm, const Dataset* probes) {
  std::vector<TapRecord> taps;
  if (probes != nullptr) taps = capture_taps(original, *probes, ware_layers(original));
  return evaluate_with_taps(original, plan, method, hp, nm, probes, probes ? &taps : nullptr, true);
}

double final_ware(const RestorationReport& report) {
  if (report.ware.empty()) throw Error(ErrorCode::kMissingTap, "report carries no WARE (no probe data)");
  return report.ware.rbegin()->second;
}

// ---------------------------------------------------------------------------
// Pipeline

void ExperimentConfig::validate() const {
  if (model_path.has_value() == arch.has_value()) {
    throw Error(ErrorCode::kConfig, "exactly one model source (file or synthetic arch) is required");
  }
  if (probe_path && probe_spec) throw Error(ErrorCode::kConfig, "at most one probe source may be given");
  if (!plan_path && !(ratio >= 0.0 && ratio < 1.0)) throw Error(ErrorCode::kConfig, "ratio must lie in [0, 1)");
  hp.validate();
}

NetworkModel load_experiment_model(const ExperimentConfig& cfg) {
  if (cfg.model_path) return load_model(*cfg.model_path);
  return generate_synthetic(*cfg.arch, cfg.seed, cfg.scale);
}

PruningPlan load_experiment_plan(const ExperimentConfig& cfg, const NetworkModel& model) {
  if (cfg.plan_path) {
    const std::vector<std::uint8_t> bytes = read_file(*cfg.plan_path);
    PruningPlan plan = plan_from_json(std::string(bytes.begin(), bytes.end()));
    validate_plan(model, plan);
    return plan;
  }
  if (cfg.scheme == "resnet") return plan_resnet(model, cfg.criterion, cfg.ratio);
  if (cfg.scheme == "layerwise") return plan_layerwise(model, cfg.criterion, cfg.ratio);
  throw Error(ErrorCode::kConfig, "unknown scheme '" + cfg.scheme + "' (layerwise, resnet)");
}

std::optional<Dataset> load_experiment_probes(const ExperimentConfig& cfg, const NetworkModel& model) {
  if (cfg.probe_path) return load_dataset(*cfg.probe_path);
  if (cfg.probe_spec) return generate_probe_data(cfg.probe_spec->count, cfg.probe_spec->seed, model.input_shape);
  return std::nullopt;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  PipelineResult out;
  const NetworkModel original = load_experiment_model(cfg);
  out.plan = load_experiment_plan(cfg, original);
  const std::optional<Dataset> probes = load_experiment_probes(cfg, original);
  Evaluation ev = evaluate_restoration(original, out.plan, cfg.method, cfg.hp, cfg.nm, probes ? &*probes : nullptr);
  out.model = std::move(ev.restored.model);
  out.report = std::move(ev.report);
  if (cfg.model_out) save_model(*cfg.model_out, out.model);
  if (cfg.report_json_out) write_text_atomic(*cfg.report_json_out, emit_report(out.report, ReportFormat::kJson));
  if (cfg.report_csv_out) write_text_atomic(*cfg.report_csv_out, emit_report(out.report, ReportFormat::kCsv));
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

CompareResult run_compare(const NetworkModel& original, const PruningPlan& plan, const std::vector<Method>& methods,
                          const Hyperparams& hp, const NmParams& nm, const Dataset* probes) {
  if (methods.size() < 2) throw Error(ErrorCode::kConfig, "comparison needs at least two methods");
  std::vector<TapRecord> taps;
  if (probes != nullptr) taps = capture_taps(original, *probes, ware_layers(original));

  std::vector<Evaluation> evals(methods.size());
  parallel_for(methods.size(), [&](std::size_t i) {
    evals[i] = evaluate_with_taps(original, plan, methods[i], hp, nm, probes, probes ? &taps : nullptr, true);
  });

  CompareResult out;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    out.methods.push_back(to_string(methods[i]));
    const RestorationReport& r = evals[i].report;
    for (const LayerErrorRecord& rec : r.layer_errors) {
      out.rows.push_back({rec.layer, "re", out.methods.back(), rec.re_sum});
      out.rows.push_back({rec.layer, "be", out.methods.back(), rec.be_sum});
      if (rec.ae_bound_sum) out.rows.push_back({rec.layer, "ae_bound", out.methods.back(), *rec.ae_bound_sum});
    }
    for (const auto& [layer, v] : r.ware) out.rows.push_back({layer, "ware", out.methods.back(), v});
    out.reports.push_back(r);
  }
  std::stable_sort(out.rows.begin(), out.rows.end(),
                   [](const CompareRow& a, const CompareRow& b) { return a.layer < b.layer; });

  // The LBYL solve minimizes the full loss on its basis, so no other
  // coefficient vector on the same basis may score lower.
  for (std::size_t i = 0; i < methods.size(); ++i) {
    if (methods[i] != Method::kLbyl) continue;
    for (const auto& [layer, solves] : evals[i].restored.solves) {
      for (const FilterSolve& fs : solves) {
        const double mine = restoration_loss(fs.basis, fs.s, hp);
        const double other = restoration_loss(fs.basis, solve_nm_coefficients(fs.basis, nm), hp);
        ++out.loss_checks;
        if (mine > other * (1.0 + 1e-12) + 1e-300) ++out.loss_violations;
      }
    }
    break;
  }
  return out;
}

std::string compare_to_json(const CompareResult& result) {
  nlohmann::ordered_json doc;
  doc["methods"] = result.methods;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const CompareRow& row : result.rows) {
    rows.push_back({{"layer", row.layer}, {"metric", row.metric}, {"method", row.method}, {"value", row.value}});
  }
  doc["rows"] = rows;
  doc["loss_ordering"] = {{"checked", result.loss_checks}, {"violations", result.loss_violations}};
  return doc.dump(2) + "\n";
}

std::string compare_to_csv(const CompareResult& result) {
  std::string out = "layer,metric,method,value\n";
  char buf[40];
  for (const CompareRow& row : result.rows) {
    std::snprintf(buf, sizeof buf, "%.17g", row.value);
    out += std::to_string(row.layer) + "," + row.metric + "," + row.method + "," + buf + "\n";
  }
  return out;
}

BatchSummary run_batch(const std::string& arch, const std::vector<std::uint64_t>& seeds, const Criterion& criterion,
                       double ratio, const Hyperparams& hp, const NmParams& nm, std::size_t probe_count) {
  BatchSummary s;
  s.seeds = seeds;
  const std::size_t n = seeds.size();
  if (n == 0) throw Error(ErrorCode::kConfig, "batch needs at least one seed");
  s.ware_lbyl.assign(n, 0.0);
  s.ware_nm.assign(n, 0.0);
  s.ware_prune.assign(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    const NetworkModel model = generate_synthetic(arch, seeds[i]);
    const PruningPlan plan = plan_layerwise(model, criterion, ratio);
    // Probe seeds are offset so probes are not drawn from the weight stream.
    const Dataset probes = generate_probe_data(probe_count, seeds[i] + 0x9E3779B9ULL, model.input_shape);
    const std::vector<TapRecord> taps = capture_taps(model, probes, ware_layers(model));
    auto run = [&](Method m) {
      return final_ware(evaluate_with_taps(model, plan, m, hp, nm, &probes, &taps, false).report);
    };
    s.ware_lbyl[i] = run(Method::kLbyl);
    s.ware_nm[i] = run(Method::kNm);
    s.ware_prune[i] = run(Method::kNone);
  });
  std::size_t wins = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.ware_lbyl[i] < s.ware_prune[i]) ++wins;
    s.mean_lbyl += s.ware_lbyl[i];
    s.mean_nm += s.ware_nm[i];
    s.mean_prune += s.ware_prune[i];
  }
  const double dn = static_cast<double>(n);
  s.win_rate = static_cast<double>(wins) / dn;
  s.mean_lbyl /= dn;
  s.mean_nm /= dn;
  s.mean_prune /= dn;
  return s;
}

std::string batch_to_json(const BatchSummary& s) {
  nlohmann::ordered_json doc;
  doc["seeds"] = s.seeds;
  doc["final_ware"] = {{"lbyl", s.ware_lbyl}, {"nm", s.ware_nm}, {"none", s.ware_prune}};
  doc["mean_final_ware"] = {{"lbyl", s.mean_lbyl}, {"nm", s.mean_nm}, {"none", s.mean_prune}};
  doc["win_rate_lbyl_over_none"] = s.win_rate;
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Global adaptive pruning

void GlobalPruneConfig::validate() const {
  if (!(ware_threshold >= 0.0) || !std::isfinite(ware_threshold)) {
    throw Error(ErrorCode::kConfig, "WARE threshold must be finite and non-negative");
  }
  if (!(max_ratio > 0.0 && max_ratio < 1.0)) throw Error(ErrorCode::kConfig, "max ratio must lie in (0, 1)");
  if (!(step > 0.0 && step <= max_ratio)) throw Error(ErrorCode::kConfig, "step must lie in (0, max ratio]");
}

GlobalPruneResult global_adaptive_prune(const NetworkModel& model, const Criterion& criterion,
                                        const GlobalPruneConfig& cfg, const Hyperparams& hp, const Dataset& probes) {
  cfg.validate();
  hp.validate();
  const NmParams nm;
  const std::vector<TapRecord> taps = capture_taps(model, probes, ware_layers(model));
  const std::vector<std::size_t> layers = prunable_layers(model, cfg.scheme);

  PruningPlan plan{criterion, 0.0, {}};
  std::map<std::size_t, std::size_t> steps;  // accepted increments per layer
  std::vector<std::size_t> active = layers;
  for (std::size_t layer : layers) steps[layer] = 0;

  while (!active.empty()) {
    std::vector<std::size_t> still_active;
    for (std::size_t layer : active) {
      // Ratios are step multiples recomputed from the count, so no drift accumulates.
      const double candidate = static_cast<double>(steps[layer] + 1) * cfg.step;
      if (candidate > cfg.max_ratio + 1e-12) continue;
      std::vector<std::size_t> pruned = plan_layer(model, layer, criterion, std::min(candidate, cfg.max_ratio));
      PruningPlan trial = plan;
      auto current = plan.layers.find(layer);
      const bool unchanged = current == plan.layers.end() ? pruned.empty() : current->second == pruned;
      if (!unchanged) {
        trial.layers[layer] = std::move(pruned);
        const Evaluation ev = evaluate_with_taps(model, trial, Method::kLbyl, hp, nm, &probes, &taps, false);
        const bool violates = std::any_of(ev.report.ware.begin(), ev.report.ware.end(),
                                          [&](const auto& kv) { return kv.second > cfg.ware_threshold; });
        if (violates) continue;  // revert and freeze
        plan = std::move(trial);
      }
      ++steps[layer];
      still_active.push_back(layer);
    }
    active = std::move(still_active);
  }

  GlobalPruneResult out;
  std::size_t total = 0;
  std::size_t removed = 0;
  for (std::size_t layer : layers) {
    out.ratios[layer] = std::min(static_cast<double>(steps[layer]) * cfg.step, cfg.max_ratio);
    total += model.layers[layer].out_channels();
    if (auto it = plan.layers.find(layer); it != plan.layers.end()) removed += it->second.size();
  }
  // The plan's single ratio field records the overall pruned fraction.
  plan.ratio = total == 0 ? 0.0 : static_cast<double>(removed) / static_cast<double>(total);
  Evaluation ev = evaluate_restoration(model, plan, Method::kLbyl, hp, nm, &probes);
  out.model = std::move(ev.restored.model);
  out.report = std::move(ev.report);
  out.plan = std::move(plan);
  return out;
}

// ---------------------------------------------------------------------------
// Lambda sweep

SweepResult sweep_lambdas(const NetworkModel& model, const PruningPlan& plan, const std::vector<Hyperparams>& grid,
                          const Dataset& probes) {
  if (grid.empty()) throw Error(ErrorCode::kConfig, "lambda grid is empty");
  for (const Hyperparams& hp : grid) hp.validate();
  const std::vector<TapRecord> taps = capture_taps(model, probes, ware_layers(model));
  SweepResult out;
  out.rows.resize(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) {
    const Evaluation ev = evaluate_with_taps(model, plan, Method::kLbyl, grid[i], NmParams{}, &probes, &taps, false);
    SweepRow& row = out.rows[i];
    row.hp = grid[i];
    row.final_ware = final_ware(ev.report);
    for (const auto& [layer, v] : ev.report.ware) row.mean_ware += v;
    row.mean_ware /= static_cast<double>(ev.report.ware.size());
  });
  for (std::size_t i = 1; i < out.rows.size(); ++i) {
    if (out.rows[i].final_ware < out.rows[out.best].final_ware) out.best = i;
  }
  return out;
}

std::string sweep_to_json(const SweepResult& result) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const SweepRow& row : result.rows) {
    rows.push_back({{"lambda1", row.hp.lambda1},
                    {"lambda2", row.hp.lambda2},
                    {"final_ware", row.final_ware},
                    {"mean_ware", row.mean_ware}});
  }
  const SweepRow& best = result.rows.at(result.best);
  nlohmann::ordered_json doc;
  doc["best"] = {{"index", result.best}, {"lambda1", best.hp.lambda1}, {"lambda2", best.hp.lambda2}};
  doc["rows"] = rows;
  return doc.dump(2) + "\n";
}

namespace {

double parse_number(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::kConfig, "bad " + what + " '" + text + "'");
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, sep)) parts.push_back(part);
  return parts;
}

}  // namespace

std::vector<Hyperparams> parse_grid(const std::string& text) {
  std::vector<Hyperparams> grid;
  for (const std::string& point : split(text, ',')) {
    const std::vector<std::string> pair = split(point, ':');
    if (pair.size() != 2) throw Error(ErrorCode::kConfig, "grid point '" + point + "' is not lambda1:lambda2");
    Hyperparams hp{parse_number(pair[0], "lambda1"), parse_number(pair[1], "lambda2")};
    hp.validate();
    grid.push_back(hp);
  }
  if (grid.empty()) throw Error(ErrorCode::kConfig, "lambda grid is empty");
  return grid;
}

Shape3 parse_shape(const std::string& text) {
  const std::vector<std::string> dims = split(text, 'x');
  if (dims.size() != 3) throw Error(ErrorCode::kConfig, "shape '" + text + "' is not CxWxH");
  std::size_t v[3];
  for (int i = 0; i < 3; ++i) {
    const double d = parse_number(dims[i], "shape dimension");
    if (!(d >= 1.0) || d != std::floor(d)) throw Error(ErrorCode::kConfig, "shape dimensions must be positive integers");
    v[i] = static_cast<std::size_t>(d);
  }
  return Shape3{v[0], v[1], v[2]};
}

}  // namespace lbyl
