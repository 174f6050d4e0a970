#include "crm/retrospection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crm/errors.hpp"

namespace crm {

namespace {

struct StackCache {
  Matrix pre;  // Y F
  Vector h;    // flatten(act(Y F)), class-major
};

StackCache conv_forward(const RetrospectionModel& m, const Matrix& stack) {
  if (stack.rows != m.class_count() || stack.cols != 3)
    throw ShapeError("retrospection: stack must be " + std::to_string(m.class_count()) + "x3");
  StackCache c;
  c.pre = matmul(stack, m.conv_F);
  c.h.resize(c.pre.data.size());
  for (std::size_t i = 0; i < c.h.size(); ++i) c.h[i] = activate(m.act, c.pre.data[i]);
  return c;
}

void conv_backward(const RetrospectionModel& m, const Matrix& stack, const StackCache& c, std::span<const double> dh,
                   RetrospectionModel& grad) {
  const std::size_t K = m.filter_count();
  for (std::size_t row = 0; row < stack.rows; ++row) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t idx = row * K + k;
      const double dz = dh[idx] * activate_grad(m.act, c.pre.data[idx]);
      if (dz == 0.0) continue;
      for (std::size_t r = 0; r < 3; ++r) grad.conv_F(r, k) += stack(row, r) * dz;
    }
  }
}

struct FusedForward {
  std::vector<StackCache> caches;
  std::vector<double> weights;
  Vector pooled_h;  // middle fusion only
  Vector logits;
};

FusedForward fused_forward(const RetrospectionModel& m, std::span<const Matrix> stacks) {
  if (stacks.empty()) throw DataError("fusion: empty counterfactual list");
  FusedForward f;
  const std::size_t n = stacks.size();
  for (const auto& s : stacks) f.caches.push_back(conv_forward(m, s));

  if (m.fusion == Fusion::Middle) {
    if (m.middle_pooling == MiddlePooling::Attention) {
      Vector scores(n);
      for (std::size_t i = 0; i < n; ++i) scores[i] = dot(m.attn_v, f.caches[i].h);
      f.weights = softmax(scores);
    } else {
      f.weights.assign(n, 1.0 / static_cast<double>(n));
    }
    f.pooled_h.assign(f.caches[0].h.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) axpy(f.pooled_h, f.caches[i].h, f.weights[i]);
    f.logits = add(matvec(m.fc_W, f.pooled_h), m.fc_b);
  } else {
    // Late fusion averages the per-pair logits; early fusion has one stack.
    f.weights.assign(n, 1.0 / static_cast<double>(n));
    f.logits = m.fc_b;
    for (std::size_t i = 0; i < n; ++i) axpy(f.logits, matvec(m.fc_W, f.caches[i].h), f.weights[i]);
  }
  return f;
}

void fused_backward(const RetrospectionModel& m, std::span<const Matrix> stacks, const FusedForward& f,
                    std::span<const double> dlogits, RetrospectionModel& grad) {
  const std::size_t n = stacks.size();
  axpy(grad.fc_b, dlogits);
  std::vector<Vector> dh(n);
  if (m.fusion == Fusion::Middle) {
    add_outer(grad.fc_W, dlogits, f.pooled_h);
    const Vector dpooled = matvec_t(m.fc_W, dlogits);
    if (m.middle_pooling == MiddlePooling::Attention) {
      Vector da(n);
      double mean_da = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        da[i] = dot(f.caches[i].h, dpooled);
        mean_da += f.weights[i] * da[i];
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double ds = f.weights[i] * (da[i] - mean_da);
        axpy(grad.attn_v, f.caches[i].h, ds);
        dh[i] = scaled(dpooled, f.weights[i]);
        axpy(dh[i], m.attn_v, ds);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) dh[i] = scaled(dpooled, f.weights[i]);
    }
  } else {
    const Vector shared = matvec_t(m.fc_W, dlogits);
    for (std::size_t i = 0; i < n; ++i) {
      add_outer(grad.fc_W, dlogits, f.caches[i].h, f.weights[i]);
      dh[i] = scaled(shared, f.weights[i]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) conv_backward(m, stacks[i], f.caches[i], dh[i], grad);
}

double eta_penalty(const RetrospectionModel& m) {
  return sum_of_squares(m.conv_F.data) + sum_of_squares(m.fc_W.data) + sum_of_squares(m.fc_b) +
         sum_of_squares(m.attn_v);
}

}  // namespace

const char* to_string(Fusion f) {
  switch (f) {
    case Fusion::Early: return "early";
    case Fusion::Late: return "late";
    case Fusion::Middle: return "middle";
  }
  return "?";
}

Fusion parse_fusion(const std::string& s) {
  if (s == "early") return Fusion::Early;
  if (s == "late") return Fusion::Late;
  if (s == "middle") return Fusion::Middle;
  throw DataError("unknown fusion '" + s + "' (expected early, late or middle)");
}

RetrospectionModel init_retrospection(std::size_t class_count, std::size_t filters, Fusion fusion, double lambda,
                                      Rng& rng) {
  if (class_count < 2) throw DataError("retrospection needs at least two classes");
  if (filters == 0) throw DataError("retrospection needs at least one filter");
  if (lambda < 0.0) throw DataError("retrospection lambda must be non-negative");
  RetrospectionModel m;
  m.conv_F = Matrix(3, filters);
  fill_normal(m.conv_F.data, rng, std::sqrt(2.0 / 3.0));
  const std::size_t flat = class_count * filters;
  m.fc_W = Matrix(class_count, flat);
  fill_normal(m.fc_W.data, rng, std::sqrt(1.0 / static_cast<double>(flat)));
  m.fc_b.assign(class_count, 0.0);
  m.fusion = fusion;
  if (fusion == Fusion::Middle) {
    m.attn_v.resize(flat);
    fill_normal(m.attn_v, rng, std::sqrt(1.0 / static_cast<double>(flat)));
  }
  m.lambda = lambda;
  return m;
}

Prediction compare_representation(const BackboneModel& backbone, std::span<const double> x,
                                  std::span<const double> x_star) {
  return predict_latent(backbone, sub(x, x_star));
}

Matrix prediction_stack(const BackboneModel& backbone, std::span<const double> x, std::span<const double> x_star) {
  const Prediction fx = predict_latent(backbone, x);
  const Prediction fs = predict_latent(backbone, x_star);
  const Prediction fd = compare_representation(backbone, x, x_star);
  Matrix y(fx.size(), 3);
  for (std::size_t c = 0; c < fx.size(); ++c) {
    y(c, 0) = fx[c];
    y(c, 1) = fs[c];
    y(c, 2) = fd[c];
  }
  return y;
}

Vector retrospect_stack(const RetrospectionModel& model, const Matrix& stack) {
  return add(matvec(model.fc_W, conv_forward(model, stack).h), model.fc_b);
}

Vector retrospect_pair(const RetrospectionModel& model, const BackboneModel& backbone, std::span<const double> x,
                       std::span<const double> x_star) {
  return retrospect_stack(model, prediction_stack(backbone, x, x_star));
}

std::vector<Matrix> fusion_stacks(Fusion fusion, const BackboneModel& backbone, const CounterfactualSet& set) {
  if (set.counterfactuals.empty()) throw DataError("fusion: empty counterfactual list");
  std::vector<Matrix> stacks;
  if (fusion != Fusion::Early) {
    for (const auto& cf : set.counterfactuals) stacks.push_back(prediction_stack(backbone, set.factual, cf));
    return stacks;
  }
  Vector pooled(set.factual.size(), 0.0);
  for (const auto& cf : set.counterfactuals) axpy(pooled, cf, 1.0 / static_cast<double>(set.counterfactuals.size()));
  // Early fusion compares f(mean x* - x), the reverse of the pairwise difference.
  const Prediction fx = predict_latent(backbone, set.factual);
  const Prediction fs = predict_latent(backbone, pooled);
  const Prediction fd = predict_latent(backbone, sub(pooled, set.factual));
  Matrix y(fx.size(), 3);
  for (std::size_t c = 0; c < fx.size(); ++c) {
    y(c, 0) = fx[c];
    y(c, 1) = fs[c];
    y(c, 2) = fd[c];
  }
  stacks.push_back(std::move(y));
  return stacks;
}

Prediction fuse_stacks(const RetrospectionModel& model, std::span<const Matrix> stacks, FusionTrace* trace) {
  FusedForward f = fused_forward(model, stacks);
  Prediction p = softmax(f.logits);
  if (trace) {
    trace->weights = std::move(f.weights);
    trace->logits = std::move(f.logits);
  }
  return p;
}

Prediction fuse(const RetrospectionModel& model, const BackboneModel& backbone, const CounterfactualSet& set,
                FusionTrace* trace) {
  const auto stacks = fusion_stacks(model.fusion, backbone, set);
  return fuse_stacks(model, stacks, trace);
}

std::vector<std::span<double>> parameter_views(RetrospectionModel& model) {
  std::vector<std::span<double>> v{model.conv_F.data, model.fc_W.data, model.fc_b};
  if (!model.attn_v.empty()) v.emplace_back(model.attn_v);
  return v;
}

RetrospectionModel zeros_like(const RetrospectionModel& model) {
  RetrospectionModel g = model;
  for (auto& v : parameter_views(g)) std::fill(v.begin(), v.end(), 0.0);
  return g;
}

double retrospection_objective(const RetrospectionModel& model, std::span<const RetrospectionExample> batch,
                               RetrospectionModel* grad) {
  if (batch.empty()) throw DataError("retrospection_objective: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& ex : batch) {
    const FusedForward f = fused_forward(model, ex.stacks);
    Prediction p = softmax(f.logits);
    loss += cross_entropy(ex.label, p);
    if (!grad) continue;
    p[ex.label] -= 1.0;
    for (auto& v : p) v *= inv_n;
    fused_backward(model, ex.stacks, f, p, *grad);
  }
  loss = loss * inv_n + model.lambda * eta_penalty(model);
  if (!std::isfinite(loss)) throw NumericError("retrospection objective is not finite");
  if (grad && model.lambda != 0.0) {
    const double s = 2.0 * model.lambda;
    axpy(grad->conv_F.data, model.conv_F.data, s);
    axpy(grad->fc_W.data, model.fc_W.data, s);
    axpy(grad->fc_b, model.fc_b, s);
    axpy(grad->attn_v, model.attn_v, s);
  }
  return loss;
}

double retrospection_accuracy(const RetrospectionModel& model, std::span<const RetrospectionExample> examples) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : examples)
    if (argmax(fused_forward(model, ex.stacks).logits) == ex.label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

RetrospectionModel train_retrospection(RetrospectionModel init, const BackboneModel& backbone,
                                       std::span<const LabeledSet> train, std::span<const LabeledSet> val,
                                       const TrainConfig& cfg, TrainHistory* history) {
  if (train.empty()) throw DataError("train_retrospection: empty training data");
  auto build = [&](std::span<const LabeledSet> sets) {
    std::vector<RetrospectionExample> out;
    out.reserve(sets.size());
    for (const auto& ls : sets) {
      if (ls.label >= init.class_count()) throw DataError("train_retrospection: label out of range");
      out.push_back({fusion_stacks(init.fusion, backbone, ls.set), ls.label});
    }
    return out;
  };
  const auto train_ex = build(train);
  const auto val_ex = build(val);
  const auto& sel = val_ex.empty() ? train_ex : val_ex;

  RetrospectionModel model = std::move(init);
  RetrospectionModel grad = zeros_like(model);
  auto views = parameter_views(model);
  auto gviews = parameter_views(grad);
  std::vector<AdamState> adam;
  for (const auto& v : views) adam.push_back(AdamState::for_size(v.size(), cfg.lr));

  Rng rng(cfg.seed ^ 0x51ed2701a3c5b9e1ULL);
  std::vector<std::size_t> order(train_ex.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);
  std::vector<RetrospectionExample> bx;

  RetrospectionModel best = model;
  double best_score = -1.0;
  TrainHistory local;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      bx.clear();
      for (std::size_t k = start; k < end; ++k) bx.push_back(train_ex[order[k]]);
      for (auto& g : gviews) std::fill(g.begin(), g.end(), 0.0);
      retrospection_objective(model, bx, &grad);
      for (std::size_t t = 0; t < views.size(); ++t) adam_update(views[t], gviews[t], adam[t]);
    }
    local.train_objective.push_back(retrospection_objective(model, train_ex, nullptr));
    const double score = retrospection_accuracy(model, sel);
    local.val_score.push_back(score);
    if (score >= best_score) {
      best_score = score;
      best = model;
      local.best_epoch = epoch;
    }
  }
  if (history) *history = std::move(local);
  return best;
}

}  // namespace crm
