#include "crm/generation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crm/errors.hpp"

namespace crm {

namespace {

struct DecomposeCache {
  Matrix stack;  // D x (2C+1)
  Matrix pre;    // D x L
  Vector h;      // D
  Vector a1;     // M
  Vector z1;     // M
  Vector u;      // D
};

DecomposeCache decompose_forward(const DecompositionModel& m, const Matrix& head_W, std::span<const double> x_unit) {
  DecomposeCache c;
  c.stack = decomposition_stack(x_unit, head_W);
  if (c.stack.cols != m.conv_Fg.rows)
    throw ShapeError("decompose: stack width " + std::to_string(c.stack.cols) + " does not match filters " +
                     std::to_string(m.conv_Fg.rows));
  c.pre = matmul(c.stack, m.conv_Fg);
  const std::size_t L = c.pre.cols;
  c.h.assign(c.pre.rows, 0.0);
  for (std::size_t i = 0; i < c.pre.rows; ++i) {
    double s = 0.0;
    for (std::size_t l = 0; l < L; ++l) s += gelu(c.pre(i, l));
    c.h[i] = s / static_cast<double>(L);
  }
  c.a1 = add(matvec(m.fc1_W, c.h), m.fc1_b);
  c.z1 = gelu(c.a1);
  c.u = add(matvec(m.fc2_W, c.z1), m.fc2_b);
  return c;
}

void decompose_backward(const DecompositionModel& m, const DecomposeCache& c, std::span<const double> du,
                        DecompositionModel& grad) {
  add_outer(grad.fc2_W, du, c.z1);
  axpy(grad.fc2_b, du);
  Vector da1 = matvec_t(m.fc2_W, du);
  for (std::size_t i = 0; i < da1.size(); ++i) da1[i] *= gelu_grad(c.a1[i]);
  add_outer(grad.fc1_W, da1, c.h);
  axpy(grad.fc1_b, da1);
  const Vector dh = matvec_t(m.fc1_W, da1);
  const std::size_t L = c.pre.cols;
  const double inv_l = 1.0 / static_cast<double>(L);
  for (std::size_t i = 0; i < c.pre.rows; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      const double dz = dh[i] * inv_l * gelu_grad(c.pre(i, l));
      if (dz == 0.0) continue;
      for (std::size_t s = 0; s < c.stack.cols; ++s) grad.conv_Fg(s, l) += c.stack(i, s) * dz;
    }
  }
}

/// Adds the gradient of ||v|| into dv (scaled), returns ||v||.
double distance_term(std::span<const double> v, std::span<double> dv, double scale) {
  const double r = norm(v);
  if (r > 0.0 && !dv.empty()) axpy(dv, v, scale / r);
  return r;
}

/// gamma * CE(label, f(v)); adds d/dv into dv (scaled).
double classification_term(const BackboneModel& backbone, std::span<const double> v, std::size_t label,
                           std::span<double> dv, double scale) {
  Prediction p = predict_latent(backbone, v);
  const double loss = cross_entropy(label, p);
  if (!dv.empty()) {
    p[label] -= 1.0;
    axpy(dv, matvec_t(backbone.head_W, p), scale);
  }
  return loss;
}

}  // namespace

DecompositionModel init_decomposition(std::size_t class_id, std::size_t class_count, std::size_t latent_dim,
                                      std::size_t filters, std::size_t hidden, double gamma, Rng& rng) {
  if (filters == 0 || hidden == 0) throw DataError("decomposition needs L >= 1 and M >= 1");
  if (class_id >= class_count) throw DataError("decomposition class id out of range");
  DecompositionModel m;
  m.class_id = class_id;
  m.gamma = gamma;
  const std::size_t width = 2 * class_count + 1;
  m.conv_Fg = Matrix(width, filters);
  fill_normal(m.conv_Fg.data, rng, std::sqrt(2.0 / static_cast<double>(width)));
  m.fc1_W = Matrix(hidden, latent_dim);
  fill_normal(m.fc1_W.data, rng, std::sqrt(2.0 / static_cast<double>(latent_dim)));
  m.fc1_b.assign(hidden, 0.0);
  m.fc2_W = Matrix(latent_dim, hidden);
  fill_normal(m.fc2_W.data, rng, std::sqrt(1.0 / static_cast<double>(hidden)));
  m.fc2_b.assign(latent_dim, 0.0);
  return m;
}

Matrix decomposition_stack(std::span<const double> x_unit, const Matrix& head_W) {
  const std::size_t D = x_unit.size();
  const std::size_t C = head_W.rows;
  if (head_W.cols != D)
    throw ShapeError("decomposition_stack: head_W has " + std::to_string(head_W.cols) + " columns, x has " +
                     std::to_string(D) + " entries");
  Matrix X(D, 2 * C + 1);
  for (std::size_t i = 0; i < D; ++i) {
    X(i, 0) = x_unit[i];
    for (std::size_t c = 0; c < C; ++c) {
      X(i, 1 + c) = head_W(c, i);
      X(i, 1 + C + c) = x_unit[i] * head_W(c, i);
    }
  }
  return X;
}

LatentVec decompose(const DecompositionModel& m, const Matrix& head_W, std::span<const double> x) {
  if (x.size() != m.fc1_W.cols)
    throw ShapeError("decompose: expected length " + std::to_string(m.fc1_W.cols) + ", got " +
                     std::to_string(x.size()));
  const Vector xn = normalized(x);
  return decompose_forward(m, head_W, xn).u;
}

LatentVec decomposition_target(std::span<const double> x, std::span<const double> x_star) {
  return scaled(add(x, x_star), 0.5);
}

LatentVec inject_decomposed(std::span<const double> u, std::span<const double> x) {
  if (u.size() != x.size()) throw ShapeError("inject: decomposition and sample lengths differ");
  const Vector xn = normalized(x);
  Vector out = scaled(u, 2.0);
  axpy(out, xn, -1.0);
  return out;
}

LatentVec inject(const DecompositionModel& m, const Matrix& head_W, std::span<const double> x) {
  return inject_decomposed(decompose(m, head_W, x), x);
}

CounterfactualSet generate_set(const GenerationModel& gm, std::span<const double> x) {
  if (gm.per_class.empty()) throw DataError("generate_set: generation model has no classes");
  CounterfactualSet set;
  set.factual.assign(x.begin(), x.end());
  for (const auto& m : gm.per_class) {
    LatentVec cf = inject(m, gm.head_W, x);
    if (gm.normalize_injected) cf = normalized(cf);
    set.counterfactuals.push_back(std::move(cf));
    set.provenance.push_back(Provenance::Generated);
  }
  return set;
}

std::vector<std::span<double>> parameter_views(DecompositionModel& m) {
  return {m.conv_Fg.data, m.fc1_W.data, m.fc1_b, m.fc2_W.data, m.fc2_b};
}

DecompositionModel zeros_like(const DecompositionModel& m) {
  DecompositionModel g = m;
  for (auto& v : parameter_views(g)) std::fill(v.begin(), v.end(), 0.0);
  return g;
}

double generation_objective(const DecompositionModel& m, const BackboneModel& backbone,
                            std::span<const GenerationPair> pairs, DecompositionModel* grad) {
  if (pairs.empty()) throw DataError("generation_objective: no pairs");
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  double total = 0.0;
  const std::size_t D = m.fc2_b.size();
  Vector du(D), du_star(D);
  for (const auto& pair : pairs) {
    const Vector x = normalized(pair.factual);
    const Vector xs = normalized(pair.counterfactual);
    const Vector target = decomposition_target(x, xs);
    const DecomposeCache cu = decompose_forward(m, backbone.head_W, x);
    const DecomposeCache cs = decompose_forward(m, backbone.head_W, xs);

    std::span<double> gu, gs;
    if (grad) {
      std::fill(du.begin(), du.end(), 0.0);
      std::fill(du_star.begin(), du_star.end(), 0.0);
      gu = du;
      gs = du_star;
    }
    double loss = distance_term(sub(cs.u, target), gs, inv_n);
    loss += m.gamma * classification_term(backbone, sub(xs, cs.u), pair.target, gs, -m.gamma * inv_n);
    loss += distance_term(sub(cu.u, target), gu, inv_n);
    loss += m.gamma * classification_term(backbone, sub(x, cu.u), pair.label, gu, -m.gamma * inv_n);
    total += loss;
    if (grad) {
      decompose_backward(m, cs, du_star, *grad);
      decompose_backward(m, cu, du, *grad);
    }
  }
  total *= inv_n;
  if (!std::isfinite(total)) throw NumericError("generation objective is not finite");
  return total;
}

DecompositionModel train_decomposition(DecompositionModel init, const BackboneModel& backbone,
                                       std::span<const GenerationPair> train, std::span<const GenerationPair> val,
                                       const GenerationConfig& cfg, TrainHistory* history) {
  if (train.empty())
    throw DataError("train_generation: class " + std::to_string(init.class_id) + " has no counterfactual pairs");
  DecompositionModel model = std::move(init);
  DecompositionModel grad = zeros_like(model);
  auto views = parameter_views(model);
  auto gviews = parameter_views(grad);
  std::vector<AdamState> adam;
  for (const auto& v : views) adam.push_back(AdamState::for_size(v.size(), cfg.lr));

  const auto sel = val.empty() ? train : val;
  Rng rng((cfg.seed + model.class_id) ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);
  std::vector<GenerationPair> bx;

  DecompositionModel best = model;
  double best_score = generation_objective(model, backbone, sel, nullptr);
  TrainHistory local;
  local.best_epoch = 0;
  bool improved = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      bx.clear();
      for (std::size_t k = start; k < end; ++k) bx.push_back(train[order[k]]);
      for (auto& g : gviews) std::fill(g.begin(), g.end(), 0.0);
      generation_objective(model, backbone, bx, &grad);
      for (std::size_t t = 0; t < views.size(); ++t) adam_update(views[t], gviews[t], adam[t]);
    }
    local.train_objective.push_back(generation_objective(model, backbone, train, nullptr));
    const double score = generation_objective(model, backbone, sel, nullptr);
    local.val_score.push_back(score);
    if (!improved || score < best_score) {
      // The first trained epoch always replaces the untrained initialization.
      improved = true;
      best_score = score;
      best = model;
      local.best_epoch = epoch;
    }
  }
  if (history) *history = std::move(local);
  return best;
}

GenerationModel train_generation(const BackboneModel& backbone, std::span<const GenerationPair> train,
                                 std::span<const GenerationPair> val, const GenerationConfig& cfg,
                                 std::uint64_t backbone_fingerprint, std::vector<TrainHistory>* histories) {
  const std::size_t C = backbone.class_count();
  const std::size_t D = backbone.latent_dim();
  std::vector<std::vector<GenerationPair>> train_by(C), val_by(C);
  for (const auto& p : train) {
    if (p.target >= C || p.label >= C) throw DataError("train_generation: class index out of range");
    if (p.factual.size() != D || p.counterfactual.size() != D) throw ShapeError("train_generation: latent length");
    train_by[p.target].push_back(p);
  }
  for (const auto& p : val) {
    if (p.target >= C || p.label >= C) throw DataError("train_generation: class index out of range");
    val_by[p.target].push_back(p);
  }
  for (std::size_t c = 0; c < C; ++c)
    if (train_by[c].empty())
      throw DataError("train_generation: class " + std::to_string(c) + " has no counterfactual pairs");

  GenerationModel gm;
  gm.head_W = backbone.head_W;
  gm.backbone_fingerprint = backbone_fingerprint;
  gm.normalize_injected = cfg.normalize_injected;
  if (histories) histories->assign(C, {});
  for (std::size_t c = 0; c < C; ++c) {
    Rng rng(cfg.seed + c);
    DecompositionModel init = init_decomposition(c, C, D, cfg.filters, cfg.hidden, cfg.gamma, rng);
    gm.per_class.push_back(train_decomposition(std::move(init), backbone, train_by[c], val_by[c], cfg,
                                               histories ? &(*histories)[c] : nullptr));
  }
  return gm;
}

}  // namespace crm
