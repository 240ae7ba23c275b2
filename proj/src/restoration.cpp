#include "lbyl/restoration.hpp"

#include <cmath>
#include <functional>

#include "lbyl/error.hpp"

namespace lbyl {

void Hyperparams::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !std::isfinite(lambda1) || !std::isfinite(lambda2)) {
    throw Error(ErrorCode::kConfig, "lambda1 and lambda2 must be finite and non-negative");
  }
}

namespace {

bool degenerate(double gamma, double sigma) {
  return sigma < kDegenerateBnTolerance || std::abs(gamma) < kDegenerateBnTolerance;
}

void check_target(const Matrix& bank, std::size_t j, const std::vector<std::size_t>& kept) {
  if (j >= bank.rows()) throw Error(ErrorCode::kShapeMismatch, "pruned filter index out of range");
  if (kept.empty()) throw Error(ErrorCode::kAllPruned, "no preserved filters to build a basis from");
  for (std::size_t k : kept) {
    if (k == j) throw Error(ErrorCode::kShapeMismatch, "pruned filter is listed as preserved");
    if (k >= bank.rows()) throw Error(ErrorCode::kShapeMismatch, "preserved filter index out of range");
  }
}

ScaledBasis assemble(const Matrix& bank, std::size_t j, const std::vector<std::size_t>& columns,
                     const std::function<double(std::size_t)>& scale, const std::function<double(std::size_t)>& offset) {
  ScaledBasis b;
  const std::size_t d = bank.cols();
  b.columns = columns;
  b.x = Matrix(d, columns.size());
  b.p = Vector(columns.size());
  b.y = Vector(std::vector<double>(bank.row(j).begin(), bank.row(j).end()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const double f = scale(columns[c]);
    auto w = bank.row(columns[c]);
    for (std::size_t e = 0; e < d; ++e) b.x(e, c) = f * w[e];
    b.p[c] = f * offset(columns[c]);
  }
  ensure_finite(b.x.values(), "scaled basis");
  ensure_finite(b.p.values(), "scaled basis offsets");
  return b;
}

}  // namespace

ScaledBasis build_scaled_basis(const Matrix& bank, const BatchNormParams* bn, std::size_t pruned_j,
                               const std::vector<std::size_t>& kept) {
  check_target(bank, pruned_j, kept);
  if (bn == nullptr) {
    ScaledBasis b = build_unit_basis(bank, pruned_j, kept);
    b.unit_scale = false;
    return b;
  }
  if (bn->size() != bank.rows()) throw Error(ErrorCode::kShapeMismatch, "BN channels differ from filter count");
  const double gj = bn->gamma[pruned_j];
  const double sj = bn->sigma[pruned_j];
  if (degenerate(gj, sj)) {
    throw Error(ErrorCode::kDegenerateTarget, "filter " + std::to_string(pruned_j) + " has near-zero BN scale");
  }
  std::vector<std::size_t> columns;
  std::vector<std::size_t> excluded;
  for (std::size_t k : kept) {
    if (degenerate(bn->gamma[k], bn->sigma[k])) excluded.push_back(k);
    else columns.push_back(k);
  }
  if (columns.empty()) {
    throw Error(ErrorCode::kDegenerateTarget, "every preserved filter has near-zero BN scale");
  }
  ScaledBasis b = assemble(
      bank, pruned_j, columns,
      [&](std::size_t i) { return (sj * bn->gamma[i]) / (gj * bn->sigma[i]); },
      [&](std::size_t i) { return bn->mu[i] - (bn->sigma[i] / bn->gamma[i]) * bn->beta[i]; });
  b.excluded = std::move(excluded);
  b.gamma_j = gj;
  b.sigma_j = sj;
  b.mu_j = bn->mu[pruned_j];
  b.beta_j = bn->beta[pruned_j];
  return b;
}

ScaledBasis build_unit_basis(const Matrix& bank, std::size_t pruned_j, const std::vector<std::size_t>& kept) {
  check_target(bank, pruned_j, kept);
  ScaledBasis b = assemble(
      bank, pruned_j, kept, [](std::size_t) { return 1.0; }, [](std::size_t) { return 0.0; });
  b.unit_scale = true;
  return b;
}

namespace {

/// Shift inside the BN error: (g_j / sd_j)(s.p - mu_j) + b_j, written as
/// scale * s.p - target.
struct BnTerm {
  double scale;
  double target;
};

BnTerm bn_term(const ScaledBasis& b) {
  const double r = b.gamma_j / b.sigma_j;
  return {r, r * b.mu_j - b.beta_j};
}

void check_dims(const ScaledBasis& b, const Vector& s) {
  if (s.size() != b.x.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "coefficient vector has " + std::to_string(s.size()) +
                                               " entries for " + std::to_string(b.x.cols()) + " basis columns");
  }
}

}  // namespace

Vector solve_coefficients(const ScaledBasis& basis, const Hyperparams& hp) {
  hp.validate();
  const std::size_t t = basis.x.cols();
  const std::size_t d = basis.x.rows();
  if (t == 0) throw Error(ErrorCode::kShapeMismatch, "empty basis");
  const BnTerm bt = bn_term(basis);
  const double l1 = basis.unit_scale ? 0.0 : hp.lambda1;

  Matrix a(t, t);
  Vector rhs(t);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = r; c < t; ++c) {
      double acc = 0.0;
      for (std::size_t e = 0; e < d; ++e) acc += basis.x(e, r) * basis.x(e, c);
      acc += l1 * bt.scale * bt.scale * basis.p[r] * basis.p[c];
      a(r, c) = acc;
      a(c, r) = acc;
    }
    a(r, r) += hp.lambda2;
    double acc = 0.0;
    for (std::size_t e = 0; e < d; ++e) acc += basis.x(e, r) * basis.y[e];
    rhs[r] = acc + l1 * bt.scale * bt.target * basis.p[r];
  }
  return spd_solve(a, rhs);
}

double restoration_loss(const ScaledBasis& basis, const Vector& s, const Hyperparams& hp) {
  check_dims(basis, s);
  const Vector xs = matvec(basis.x, s);
  double re = 0.0;
  for (std::size_t e = 0; e < xs.size(); ++e) re += (basis.y[e] - xs[e]) * (basis.y[e] - xs[e]);
  const BnTerm bt = bn_term(basis);
  const double be = bt.scale * dot(s.values(), basis.p.values()) - bt.target;
  const double l1 = basis.unit_scale ? 0.0 : hp.lambda1;
  return re + l1 * be * be + hp.lambda2 * dot(s.values(), s.values());
}

Vector restoration_loss_gradient(const ScaledBasis& basis, const Vector& s, const Hyperparams& hp) {
  check_dims(basis, s);
  const Vector xs = matvec(basis.x, s);
  const std::size_t t = s.size();
  const BnTerm bt = bn_term(basis);
  const double be = bt.scale * dot(s.values(), basis.p.values()) - bt.target;
  const double l1 = basis.unit_scale ? 0.0 : hp.lambda1;
  Vector g(t);
  for (std::size_t c = 0; c < t; ++c) {
    double acc = 0.0;
    for (std::size_t e = 0; e < xs.size(); ++e) acc += basis.x(e, c) * (xs[e] - basis.y[e]);
    g[c] = 2.0 * acc + 2.0 * l1 * be * bt.scale * basis.p[c] + 2.0 * hp.lambda2 * s[c];
  }
  return g;
}

Vector solve_nm_coefficients(const ScaledBasis& basis, const NmParams& nm) {
  const std::size_t t = basis.x.cols();
  const std::size_t d = basis.x.rows();
  Vector s(t);
  if (t == 0) return s;
  const double y_norm = norm(basis.y, NormOrder::kL2);
  const double target_offset =
      basis.unit_scale ? 0.0 : basis.mu_j - (basis.sigma_j / basis.gamma_j) * basis.beta_j;

  std::vector<double> col(d);
  auto column = [&](std::size_t c) {
    for (std::size_t e = 0; e < d; ++e) col[e] = basis.x(e, c);
    return std::span<const double>(col);
  };
  auto cosine = [&](std::size_t c) {
    auto x = column(c);
    const double xn = norm(x, NormOrder::kL2);
    if (xn == 0.0 || y_norm == 0.0) return 0.0;
    return dot(x, basis.y.values()) / (xn * y_norm);
  };

  std::size_t best = 0;
  double best_score = 0.0;
  for (std::size_t c = 0; c < t; ++c) {
    const double score =
        nm.lambda_mix * (1.0 - cosine(c)) + (1.0 - nm.lambda_mix) * std::abs(basis.p[c] - target_offset);
    if (c == 0 || score < best_score) {
      best = c;
      best_score = score;
    }
  }
  if (cosine(best) < nm.threshold) return s;
  auto x = column(best);
  const double xx = dot(x, x);
  if (xx > 0.0) s[best] = dot(x, basis.y.values()) / xx;
  return s;
}

Matrix build_delivery_matrix(std::size_t m, const std::vector<std::size_t>& kept,
                             const std::map<std::size_t, Vector>& coeffs) {
  if (kept.size() + coeffs.size() != m) {
    throw Error(ErrorCode::kShapeMismatch, "preserved and pruned filters do not partition the layer");
  }
  Matrix s(m, kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) {
    if (kept[k] >= m) throw Error(ErrorCode::kShapeMismatch, "preserved index out of range");
    s(kept[k], k) = 1.0;
  }
  for (const auto& [j, v] : coeffs) {
    if (j >= m) throw Error(ErrorCode::kShapeMismatch, "pruned index out of range");
    if (v.size() != kept.size()) {
      throw Error(ErrorCode::kShapeMismatch, "coefficient row for filter " + std::to_string(j) + " has " +
                                                 std::to_string(v.size()) + " entries, expected " +
                                                 std::to_string(kept.size()));
    }
    for (std::size_t k = 0; k < kept.size(); ++k) {
      if (s(j, k) != 0.0) throw Error(ErrorCode::kShapeMismatch, "filter is both pruned and preserved");
      s(j, k) = v[k];
    }
  }
  ensure_finite(s.values(), "delivery matrix");
  return s;
}

std::string to_string(Method method) {
  switch (method) {
    case Method::kLbyl: return "lbyl";
    case Method::kNm: return "nm";
    case Method::kNone: return "none";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  if (name == "lbyl") return Method::kLbyl;
  if (name == "nm") return Method::kNm;
  if (name == "none" || name == "prune") return Method::kNone;
  throw Error(ErrorCode::kConfig, "unknown method '" + name + "' (lbyl, nm, none)");
}

namespace {

using Solver = std::function<FilterSolve(const Matrix& bank, const BatchNormParams* bn, std::size_t j,
                                         const std::vector<std::size_t>& kept)>;

Vector expand(const ScaledBasis& basis, const Vector& s, const std::vector<std::size_t>& kept) {
  Vector out(kept.size());
  std::size_t c = 0;
  for (std::size_t k = 0; k < kept.size() && c < basis.columns.size(); ++k) {
    if (kept[k] == basis.columns[c]) out[k] = s[c++];
  }
  return out;
}

/// Scaled basis, or the unit-scale fallback when the target's BN is degenerate.
std::pair<ScaledBasis, bool> basis_for(const Matrix& bank, const BatchNormParams* bn, std::size_t j,
                                       const std::vector<std::size_t>& kept) {
  try {
    return {build_scaled_basis(bank, bn, j, kept), false};
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerateTarget) throw;
    return {build_unit_basis(bank, j, kept), true};
  }
}

RestoreResult restore_with(const NetworkModel& model, const PruningPlan& plan, const Solver& solver) {
  validate(model);
  validate_plan(model, plan);
  RestoreResult result;
  result.model = model;
  NetworkModel& out = result.model;
  for (const auto& [layer, pruned] : plan.layers) {
    if (pruned.empty()) continue;
    const Consumer consumer = find_consumer(out, layer);
    const LayerSpec& spec = out.layers[layer];
    const std::size_t m = spec.out_channels();
    const Matrix bank = filter_bank(spec);
    const BatchNormParams* bn = spec.bn ? &*spec.bn : nullptr;
    const std::vector<std::size_t> kept = kept_indices(m, pruned);

    std::map<std::size_t, Vector> coeffs;
    std::vector<FilterSolve> solves;
    try {
      for (std::size_t j : pruned) {
        FilterSolve fs = solver(bank, bn, j, kept);
        coeffs.emplace(j, fs.coeffs);
        solves.push_back(std::move(fs));
      }
    } catch (const Error& e) {
      throw Error(e.code(), "layer " + std::to_string(layer) + ": " + e.what());
    }
    Matrix delivery = build_delivery_matrix(m, kept, coeffs);
    reduce_outputs(out.layers[layer], kept, build_pruning_matrix(m, pruned));
    fold_into_consumer(out.layers[consumer.index], delivery, consumer.spatial);
    result.delivery.emplace(layer, std::move(delivery));
    result.solves.emplace(layer, std::move(solves));
    result.kept.emplace(layer, kept);
  }
  validate(out);
  return result;
}

}  // namespace

RestoreResult restore_lbyl(const NetworkModel& model, const PruningPlan& plan, const Hyperparams& hp) {
  hp.validate();
  return restore_with(model, plan, [&](const Matrix& bank, const BatchNormParams* bn, std::size_t j,
                                       const std::vector<std::size_t>& kept) {
    auto [basis, fallback] = basis_for(bank, bn, j, kept);
    FilterSolve fs;
    fs.filter = j;
    fs.s = solve_coefficients(basis, hp);
    fs.coeffs = expand(basis, fs.s, kept);
    fs.basis = std::move(basis);
    fs.fallback = fallback;
    return fs;
  });
}

RestoreResult restore_nm(const NetworkModel& model, const PruningPlan& plan, const NmParams& nm) {
  if (!(nm.lambda_mix >= 0.0 && nm.lambda_mix <= 1.0) || !(nm.threshold >= 0.0 && nm.threshold <= 1.0)) {
    throw Error(ErrorCode::kConfig, "nm lambda and threshold must lie in [0, 1]");
  }
  return restore_with(model, plan, [&](const Matrix& bank, const BatchNormParams* bn, std::size_t j,
                                       const std::vector<std::size_t>& kept) {
    auto [basis, fallback] = basis_for(bank, bn, j, kept);
    FilterSolve fs;
    fs.filter = j;
    fs.s = solve_nm_coefficients(basis, nm);
    fs.coeffs = expand(basis, fs.s, kept);
    fs.basis = std::move(basis);
    fs.fallback = fallback;
    return fs;
  });
}

RestoreResult restore_none(const NetworkModel& model, const PruningPlan& plan) {
  return restore_with(model, plan, [&](const Matrix& bank, const BatchNormParams* bn, std::size_t j,
                                       const std::vector<std::size_t>& kept) {
    auto [basis, fallback] = basis_for(bank, bn, j, kept);
    FilterSolve fs;
    fs.filter = j;
    fs.s = Vector(basis.columns.size());
    fs.coeffs = Vector(kept.size());
    fs.basis = std::move(basis);
    fs.fallback = fallback;
    return fs;
  });
}

RestoreResult restore(const NetworkModel& model, const PruningPlan& plan, Method method, const Hyperparams& hp,
                      const NmParams& nm) {
  switch (method) {
    case Method::kLbyl: return restore_lbyl(model, plan, hp);
    case Method::kNm: return restore_nm(model, plan, nm);
    case Method::kNone: return restore_none(model, plan);
  }
  throw Error(ErrorCode::kConfig, "unknown method");
}

RestoreResult restore_fc_neuron(const NetworkModel& model, const PruningPlan& plan, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(ErrorCode::kConfig, "lambda must be non-negative");
  for (const auto& [layer, pruned] : plan.layers) {
    if (layer >= model.layers.size() || model.layers[layer].kind != LayerKind::kFC || model.layers[layer].bn) {
      throw Error(ErrorCode::kPlanShapeMismatch,
                  "neuron restoration needs FC layers without BN (layer " + std::to_string(layer) + ")");
    }
  }
  const Hyperparams hp{0.0, lambda};
  return restore_with(model, plan, [&](const Matrix& bank, const BatchNormParams*, std::size_t j,
                                       const std::vector<std::size_t>& kept) {
    FilterSolve fs;
    fs.filter = j;
    fs.basis = build_unit_basis(bank, j, kept);
    fs.s = solve_coefficients(fs.basis, hp);
    fs.coeffs = fs.s;
    return fs;
  });
}

}  // namespace lbyl
