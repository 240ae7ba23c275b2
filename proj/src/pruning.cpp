#include "lbyl/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"
#include "lbyl/error.hpp"
#include "lbyl/surgery.hpp"

namespace lbyl {

std::string Criterion::to_string() const {
  switch (kind) {
    case Kind::kL1Norm: return "l1";
    case Kind::kL2Norm: return "l2";
    case Kind::kL2GM: return "l2gm";
    case Kind::kRandom: return "random:" + std::to_string(seed);
  }
  return "?";
}

Criterion Criterion::parse(const std::string& text) {
  if (text == "l1") return l1();
  if (text == "l2") return l2();
  if (text == "l2gm" || text == "l2-gm") return l2gm();
  if (text == "random") return random(0);
  if (text.rfind("random:", 0) == 0) {
    try {
      std::size_t used = 0;
      const std::uint64_t seed = std::stoull(text.substr(7), &used);
      if (used == text.size() - 7) return random(seed);
    } catch (const std::exception&) {
    }
  }
  throw Error(ErrorCode::kConfig, "unknown criterion '" + text + "' (l1, l2, l2gm, random:<seed>)");
}

Matrix filter_bank(const LayerSpec& layer) {
  if (layer.kind == LayerKind::kConv) return layer.conv.as_matrix();
  if (layer.kind == LayerKind::kFC) return layer.fc;
  throw Error(ErrorCode::kPlanShapeMismatch, "only conv and fc layers have filters");
}

Vector score_filters(const Matrix& bank, const Criterion& criterion, std::uint64_t salt) {
  const std::size_t m = bank.rows();
  if (m < 2) throw Error(ErrorCode::kDegenerateLayer, "scoring needs at least two filters");
  Vector scores(m);
  switch (criterion.kind) {
    case Criterion::Kind::kL1Norm:
      for (std::size_t i = 0; i < m; ++i) scores[i] = norm(bank.row(i), NormOrder::kL1);
      break;
    case Criterion::Kind::kL2Norm:
      for (std::size_t i = 0; i < m; ++i) scores[i] = norm(bank.row(i), NormOrder::kL2);
      break;
    case Criterion::Kind::kL2GM:
      // Sum of distances to every other filter; filters near the geometric
      // median of the layer are the most replaceable.
      for (std::size_t i = 0; i < m; ++i) {
        double total = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          if (k == i) continue;
          double sq = 0.0;
          auto a = bank.row(i);
          auto b = bank.row(k);
          for (std::size_t e = 0; e < a.size(); ++e) sq += (a[e] - b[e]) * (a[e] - b[e]);
          total += std::sqrt(sq);
        }
        scores[i] = total;
      }
      break;
    case Criterion::Kind::kRandom: {
      std::vector<std::size_t> order(m);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(criterion.seed ^ (0x9E3779B97F4A7C15ULL * (salt + 1)));
      // Fisher-Yates with an explicit draw so the permutation does not depend
      // on the standard library's shuffle implementation.
      for (std::size_t i = m - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(order[i], order[j]);
      }
      for (std::size_t r = 0; r < m; ++r) scores[order[r]] = static_cast<double>(r);
      break;
    }
  }
  return scores;
}

Vector score_filters(const Tensor4& filters, const Criterion& criterion, std::uint64_t salt) {
  return score_filters(filters.as_matrix(), criterion, salt);
}

std::vector<std::size_t> select_pruned(const Vector& scores, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw Error(ErrorCode::kConfig, "ratio must lie in [0, 1)");
  const std::size_t m = scores.size();
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(m)));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<std::size_t> pruned(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(pruned.begin(), pruned.end());
  return pruned;
}

std::vector<std::size_t> kept_indices(std::size_t m, const std::vector<std::size_t>& pruned) {
  std::vector<std::size_t> kept;
  kept.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (!std::binary_search(pruned.begin(), pruned.end(), i)) kept.push_back(i);
  }
  return kept;
}

Matrix build_pruning_matrix(std::size_t m, const std::vector<std::size_t>& pruned) {
  if (!std::is_sorted(pruned.begin(), pruned.end()) ||
      std::adjacent_find(pruned.begin(), pruned.end()) != pruned.end()) {
    throw Error(ErrorCode::kPlanShapeMismatch, "pruned indices must be sorted and unique");
  }
  if (!pruned.empty() && pruned.back() >= m) {
    throw Error(ErrorCode::kPlanShapeMismatch, "pruned index " + std::to_string(pruned.back()) + " >= " +
                                                   std::to_string(m));
  }
  if (pruned.size() >= m) throw Error(ErrorCode::kAllPruned, "cannot prune every filter of a layer");
  const std::vector<std::size_t> kept = kept_indices(m, pruned);
  Matrix s(m, kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) s(kept[k], k) = 1.0;
  return s;
}

void validate_plan(const NetworkModel& model, const PruningPlan& plan) {
  for (const auto& [layer, pruned] : plan.layers) {
    if (layer >= model.layers.size()) {
      throw Error(ErrorCode::kPlanShapeMismatch, "plan names layer " + std::to_string(layer) + " of " +
                                                     std::to_string(model.layers.size()));
    }
    const LayerSpec& spec = model.layers[layer];
    if (spec.kind != LayerKind::kConv && spec.kind != LayerKind::kFC) {
      throw Error(ErrorCode::kPlanShapeMismatch, "plan names non-weight layer " + std::to_string(layer));
    }
    try {
      (void)build_pruning_matrix(spec.out_channels(), pruned);
      (void)find_consumer(model, layer);
    } catch (const Error& e) {
      throw Error(e.code(), "layer " + std::to_string(layer) + ": " + e.what());
    }
  }
}

NetworkModel apply_pruning(const NetworkModel& model, const PruningPlan& plan) {
  validate(model);
  validate_plan(model, plan);
  NetworkModel out = model;
  for (const auto& [layer, pruned] : plan.layers) {
    if (pruned.empty()) continue;
    const std::size_t m = model.layers[layer].out_channels();
    const Matrix s = build_pruning_matrix(m, pruned);
    const Consumer consumer = find_consumer(model, layer);
    reduce_outputs(out.layers[layer], kept_indices(m, pruned), s);
    fold_into_consumer(out.layers[consumer.index], s, consumer.spatial);
  }
  validate(out);
  return out;
}

std::vector<std::size_t> plan_layer(const NetworkModel& model, std::size_t layer, const Criterion& criterion,
                                    double ratio) {
  const Vector scores = score_filters(filter_bank(model.layers.at(layer)), criterion, layer);
  return select_pruned(scores, ratio);
}

std::vector<std::size_t> prunable_layers(const NetworkModel& model, const std::string& scheme) {
  std::vector<std::size_t> out;
  if (scheme == "layerwise") {
    const std::vector<std::size_t> weights = weight_layers(model);
    for (std::size_t idx : weights) {
      const LayerKind k = model.layers[idx].kind;
      if (k == LayerKind::kConv || (k == LayerKind::kFC && idx != weights.back())) out.push_back(idx);
    }
    return out;
  }
  if (scheme == "resnet") {
    int depth = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const LayerKind k = model.layers[i].kind;
      if (k == LayerKind::kResidualBegin) ++depth;
      if (k == LayerKind::kResidualEnd) --depth;
      if (k != LayerKind::kConv || depth == 0) continue;
      // Block-final convs feed the residual add and must keep their width.
      try {
        (void)find_consumer(model, i);
        out.push_back(i);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kIllegalResidualPrune && e.code() != ErrorCode::kPlanShapeMismatch) throw;
      }
    }
    return out;
  }
  throw Error(ErrorCode::kConfig, "unknown scheme '" + scheme + "' (layerwise, resnet)");
}

namespace {

PruningPlan plan_over(const NetworkModel& model, const Criterion& criterion, double ratio,
                      const std::vector<std::size_t>& layers) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw Error(ErrorCode::kConfig, "ratio must lie in [0, 1)");
  PruningPlan plan{criterion, ratio, {}};
  for (std::size_t layer : layers) {
    std::vector<std::size_t> pruned = plan_layer(model, layer, criterion, ratio);
    if (!pruned.empty()) plan.layers.emplace(layer, std::move(pruned));
  }
  return plan;
}

}  // namespace

PruningPlan plan_layerwise(const NetworkModel& model, const Criterion& criterion, double ratio) {
  return plan_over(model, criterion, ratio, prunable_layers(model, "layerwise"));
}

PruningPlan plan_resnet(const NetworkModel& model, const Criterion& criterion, double ratio) {
  return plan_over(model, criterion, ratio, prunable_layers(model, "resnet"));
}

std::string plan_to_json(const PruningPlan& plan) {
  nlohmann::ordered_json layers = nlohmann::ordered_json::object();
  for (const auto& [layer, pruned] : plan.layers) layers[std::to_string(layer)] = pruned;
  nlohmann::ordered_json doc = {{"criterion", plan.criterion.to_string()}, {"ratio", plan.ratio}, {"layers", layers}};
  return doc.dump(2);
}

PruningPlan plan_from_json(const std::string& text) {
  PruningPlan plan;
  try {
    const nlohmann::json doc = nlohmann::json::parse(text);
    plan.criterion = Criterion::parse(doc.at("criterion").get<std::string>());
    plan.ratio = doc.at("ratio").get<double>();
    for (const auto& [key, value] : doc.at("layers").items()) {
      std::vector<std::size_t> pruned = value.get<std::vector<std::size_t>>();
      std::sort(pruned.begin(), pruned.end());
      plan.layers.emplace(static_cast<std::size_t>(std::stoull(key)), std::move(pruned));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("malformed plan: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorCode::kConfig, std::string("malformed plan layer key: ") + e.what());
  }
  return plan;
}

}  // namespace lbyl
