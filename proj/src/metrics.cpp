#include "lbyl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "json.hpp"
#include "lbyl/error.hpp"

namespace lbyl {

double residual_error(const ScaledBasis& basis, const Vector& s) {
  if (s.size() != basis.x.cols()) throw Error(ErrorCode::kShapeMismatch, "coefficients do not match the basis");
  const Vector xs = matvec(basis.x, s);
  double acc = 0.0;
  for (std::size_t e = 0; e < xs.size(); ++e) acc += (basis.y[e] - xs[e]) * (basis.y[e] - xs[e]);
  return std::sqrt(acc);
}

double bn_error(const ScaledBasis& basis, const Vector& s) {
  if (s.size() != basis.p.size()) throw Error(ErrorCode::kShapeMismatch, "coefficients do not match the basis");
  if (basis.unit_scale) return 0.0;
  const double inner = dot(s.values(), basis.p.values()) - basis.mu_j + (basis.sigma_j / basis.gamma_j) * basis.beta_j;
  return std::abs((basis.gamma_j / basis.sigma_j) * inner);
}

double ae_bound(const Vector& coeffs, const std::vector<TapRecord>& taps, std::size_t layer,
                const BatchNormParams* bn, std::size_t pruned_j, const std::vector<std::size_t>& kept) {
  if (coeffs.size() != kept.size()) throw Error(ErrorCode::kShapeMismatch, "coefficients do not match kept set");
  if (taps.empty()) throw Error(ErrorCode::kMissingTap, "no probe samples");
  double total = 0.0;
  for (const TapRecord& rec : taps) {
    auto it = rec.find(layer);
    if (it == rec.end()) throw Error(ErrorCode::kMissingTap, "layer " + std::to_string(layer) + " was not captured");
    const Tensor3 n = bn ? batch_norm_apply(it->second.z, *bn) : it->second.z;
    if (pruned_j >= n.shape().c) throw Error(ErrorCode::kShapeMismatch, "pruned channel out of range");
    double bound = 0.0;
    for (std::size_t k = 0; k < kept.size(); ++k) {
      if (coeffs[k] != 0.0) bound += std::abs(coeffs[k]) * norm(n.channel(kept[k]), NormOrder::kL1);
    }
    for (double v : n.channel(pruned_j)) bound += std::max(0.0, -v);
    total += bound;
  }
  return total / static_cast<double>(taps.size());
}

double ware(const std::vector<TapRecord>& original, const std::vector<TapRecord>& restored, std::size_t layer,
            const std::vector<std::size_t>* original_channels) {
  if (original.size() != restored.size() || original.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "tap sets have different (or zero) sample counts");
  }
  double total = 0.0;
  for (std::size_t s = 0; s < original.size(); ++s) {
    auto oi = original[s].find(layer);
    auto ri = restored[s].find(layer);
    if (oi == original[s].end() || ri == restored[s].end()) {
      throw Error(ErrorCode::kMissingTap, "layer " + std::to_string(layer) + " was not captured");
    }
    const Tensor3& a = oi->second.a;
    const Tensor3& b = ri->second.a;
    std::vector<std::size_t> channels;
    if (original_channels != nullptr) {
      channels = *original_channels;
    } else {
      for (std::size_t c = 0; c < a.shape().c; ++c) channels.push_back(c);
    }
    if (b.shape().c != channels.size() || a.shape().w != b.shape().w || a.shape().h != b.shape().h) {
      throw Error(ErrorCode::kShapeMismatch, "restored taps do not match original channels at layer " +
                                                 std::to_string(layer));
    }
    double diff = 0.0;
    double base = 0.0;
    for (std::size_t k = 0; k < channels.size(); ++k) {
      auto ac = a.channel(channels[k]);
      auto bc = b.channel(k);
      for (std::size_t e = 0; e < ac.size(); ++e) {
        diff += std::abs(ac[e] - bc[e]);
        base += std::abs(ac[e]);
      }
    }
    total += diff / (base + kWareEpsilon);
  }
  return total / static_cast<double>(original.size());
}

std::size_t argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

double accuracy(const NetworkModel& model, const Dataset& data) {
  if (!(data.sample_shape == model.input_shape)) throw Error(ErrorCode::kShapeMismatch, "dataset shape differs");
  if (data.labels.size() != data.inputs.size()) throw Error(ErrorCode::kShapeMismatch, "label count differs");
  if (data.inputs.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.inputs.size(); ++i) {
    const Tensor3 out = forward(model, data.inputs[i]);
    if (static_cast<std::int64_t>(argmax(out.values())) == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.inputs.size());
}

ScaleStats scale_stats(const std::map<std::size_t, Matrix>& delivery, const PruningPlan& plan) {
  double sum = 0.0;
  double mx = 0.0;
  double mn = std::numeric_limits<double>::infinity();
  std::size_t count = 0;
  for (const auto& [layer, pruned] : plan.layers) {
    auto it = delivery.find(layer);
    if (it == delivery.end()) continue;
    for (std::size_t j : pruned) {
      for (double v : it->second.row(j)) {
        const double a = std::abs(v);
        sum += a;
        mx = std::max(mx, a);
        mn = std::min(mn, a);
        ++count;
      }
    }
  }
  if (count == 0) throw Error(ErrorCode::kEmptyDelivery, "no pruned rows");
  return {sum / static_cast<double>(count), mx, mn};
}

std::vector<LayerErrorRecord> layer_errors(const NetworkModel& original, const RestoreResult& restored,
                                           const std::vector<TapRecord>* probe_taps) {
  std::vector<LayerErrorRecord> out;
  for (const auto& [layer, solves] : restored.solves) {
    LayerErrorRecord rec;
    rec.layer = layer;
    const LayerSpec& spec = original.layers.at(layer);
    const BatchNormParams* bn = spec.bn ? &*spec.bn : nullptr;
    const std::vector<std::size_t>& kept = restored.kept.at(layer);
    double ae_sum = 0.0;
    for (const FilterSolve& fs : solves) {
      FilterErrorRecord f;
      f.filter = fs.filter;
      f.re = residual_error(fs.basis, fs.s);
      f.be = bn_error(fs.basis, fs.s);
      if (probe_taps != nullptr) {
        f.ae_bound = ae_bound(fs.coeffs, *probe_taps, layer, bn, fs.filter, kept);
        ae_sum += *f.ae_bound;
      }
      rec.re_sum += f.re;
      rec.be_sum += f.be;
      rec.filters.push_back(f);
    }
    if (probe_taps != nullptr) rec.ae_bound_sum = ae_sum;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report emission

namespace {

using nlohmann::ordered_json;

ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

ordered_json matrix_rows(const Matrix& m) {
  ordered_json rows = ordered_json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::optional<double> get_opt(const ordered_json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

bool RestorationReport::operator==(const RestorationReport& o) const {
  return original_model_id == o.original_model_id && restored_model_id == o.restored_model_id && plan == o.plan &&
         method == o.method && hyperparams.lambda1 == o.hyperparams.lambda1 &&
         hyperparams.lambda2 == o.hyperparams.lambda2 && nm_params.lambda_mix == o.nm_params.lambda_mix &&
         nm_params.threshold == o.nm_params.threshold && layer_errors == o.layer_errors && ware == o.ware &&
         scale_stats == o.scale_stats && accuracy == o.accuracy && delivery == o.delivery;
}

std::string emit_report(const RestorationReport& report, ReportFormat format) {
  if (format == ReportFormat::kCsv) {
    std::string out = "layer,metric,value,method,criterion,ratio\n";
    const std::string tail =
        "," + report.method + "," + report.plan.criterion.to_string() + "," + num(report.plan.ratio) + "\n";
    std::set<std::size_t> layers;
    for (const auto& rec : report.layer_errors) layers.insert(rec.layer);
    for (const auto& [layer, _] : report.ware) layers.insert(layer);
    for (std::size_t layer : layers) {
      const std::string prefix = std::to_string(layer) + ",";
      for (const auto& rec : report.layer_errors) {
        if (rec.layer != layer) continue;
        out += prefix + "re," + num(rec.re_sum) + tail;
        out += prefix + "be," + num(rec.be_sum) + tail;
        if (rec.ae_bound_sum) out += prefix + "ae_bound," + num(*rec.ae_bound_sum) + tail;
      }
      if (auto it = report.ware.find(layer); it != report.ware.end()) out += prefix + "ware," + num(it->second) + tail;
    }
    return out;
  }

  ordered_json doc;
  doc["original_model_id"] = report.original_model_id;
  doc["restored_model_id"] = report.restored_model_id;
  ordered_json plan_layers = ordered_json::object();
  for (const auto& [layer, pruned] : report.plan.layers) plan_layers[std::to_string(layer)] = pruned;
  doc["plan"] = {{"criterion", report.plan.criterion.to_string()}, {"ratio", report.plan.ratio}, {"layers", plan_layers}};
  doc["method"] = report.method;
  doc["hyperparams"] = {{"lambda1", report.hyperparams.lambda1}, {"lambda2", report.hyperparams.lambda2}};
  doc["nm_params"] = {{"lambda_mix", report.nm_params.lambda_mix}, {"threshold", report.nm_params.threshold}};
  ordered_json errors = ordered_json::array();
  for (const auto& rec : report.layer_errors) {
    ordered_json filters = ordered_json::array();
    for (const auto& f : rec.filters) {
      filters.push_back({{"filter", f.filter}, {"re", f.re}, {"be", f.be}, {"ae_bound", opt(f.ae_bound)}});
    }
    errors.push_back({{"layer", rec.layer},
                      {"filters", filters},
                      {"re_sum", rec.re_sum},
                      {"be_sum", rec.be_sum},
                      {"ae_bound_sum", opt(rec.ae_bound_sum)}});
  }
  doc["layer_errors"] = errors;
  ordered_json ware = ordered_json::object();
  for (const auto& [layer, v] : report.ware) ware[std::to_string(layer)] = v;
  doc["ware"] = ware;
  doc["scale_stats"] = report.scale_stats
                           ? ordered_json{{"mean", report.scale_stats->mean},
                                          {"max", report.scale_stats->max},
                                          {"min", report.scale_stats->min}}
                           : ordered_json(nullptr);
  doc["accuracy"] = report.accuracy ? ordered_json{{"original", report.accuracy->original},
                                                   {"restored", report.accuracy->restored}}
                                    : ordered_json(nullptr);
  ordered_json delivery = ordered_json::object();
  for (const auto& [layer, m] : report.delivery) delivery[std::to_string(layer)] = matrix_rows(m);
  doc["delivery"] = delivery;
  return doc.dump(2) + "\n";
}

RestorationReport report_from_json(const std::string& text) {
  RestorationReport r;
  try {
    const ordered_json doc = ordered_json::parse(text);
    r.original_model_id = doc.at("original_model_id").get<std::string>();
    r.restored_model_id = doc.at("restored_model_id").get<std::string>();
    const ordered_json& plan = doc.at("plan");
    r.plan.criterion = Criterion::parse(plan.at("criterion").get<std::string>());
    r.plan.ratio = plan.at("ratio").get<double>();
    for (const auto& [key, v] : plan.at("layers").items()) {
      r.plan.layers.emplace(std::stoull(key), v.get<std::vector<std::size_t>>());
    }
    r.method = doc.at("method").get<std::string>();
    r.hyperparams.lambda1 = doc.at("hyperparams").at("lambda1").get<double>();
    r.hyperparams.lambda2 = doc.at("hyperparams").at("lambda2").get<double>();
    r.nm_params.lambda_mix = doc.at("nm_params").at("lambda_mix").get<double>();
    r.nm_params.threshold = doc.at("nm_params").at("threshold").get<double>();
    for (const ordered_json& e : doc.at("layer_errors")) {
      LayerErrorRecord rec;
      rec.layer = e.at("layer").get<std::size_t>();
      for (const ordered_json& f : e.at("filters")) {
        rec.filters.push_back(
            {f.at("filter").get<std::size_t>(), f.at("re").get<double>(), f.at("be").get<double>(), get_opt(f, "ae_bound")});
      }
      rec.re_sum = e.at("re_sum").get<double>();
      rec.be_sum = e.at("be_sum").get<double>();
      rec.ae_bound_sum = get_opt(e, "ae_bound_sum");
      r.layer_errors.push_back(std::move(rec));
    }
    for (const auto& [key, v] : doc.at("ware").items()) r.ware.emplace(std::stoull(key), v.get<double>());
    if (!doc.at("scale_stats").is_null()) {
      const ordered_json& s = doc.at("scale_stats");
      r.scale_stats = ScaleStats{s.at("mean").get<double>(), s.at("max").get<double>(), s.at("min").get<double>()};
    }
    if (!doc.at("accuracy").is_null()) {
      r.accuracy = AccuracyPair{doc.at("accuracy").at("original").get<double>(),
                                doc.at("accuracy").at("restored").get<double>()};
    }
    for (const auto& [key, rows] : doc.at("delivery").items()) {
      const std::size_t nr = rows.size();
      const std::size_t nc = nr == 0 ? 0 : rows.at(0).size();
      Matrix m(nr, nc);
      for (std::size_t i = 0; i < nr; ++i) {
        const auto row = rows.at(i).get<std::vector<double>>();
        if (row.size() != nc) throw Error(ErrorCode::kConfig, "ragged delivery matrix");
        std::copy(row.begin(), row.end(), m.row(i).begin());
      }
      r.delivery.emplace(std::stoull(key), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("malformed report: ") + e.what());
  }
  return r;
}

std::size_t csv_row_count(const RestorationReport& report) {
  std::size_t rows = report.ware.size();
  for (const auto& rec : report.layer_errors) rows += rec.ae_bound_sum ? 3 : 2;
  return rows;
}

}  // namespace lbyl
