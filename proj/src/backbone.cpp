#include "crm/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "crm/errors.hpp"

namespace crm {

namespace {

bool is_separator(unsigned char c) {
  if (c >= 0x80) return false;
  return std::isspace(c) != 0 || std::ispunct(c) != 0;
}

struct ForwardCache {
  std::vector<Vector> pre;   // pre-activation of each encoder layer
  std::vector<Vector> post;  // GELU output of each encoder layer
  LatentVec x;
  Vector logits;
};

Vector densify(const SparseVec& f, std::size_t dim) {
  Vector out(dim, 0.0);
  for (std::size_t k = 0; k < f.index.size(); ++k) out[f.index[k]] = f.value[k];
  return out;
}

ForwardCache forward(const BackboneModel& m, const SparseVec& feats) {
  ForwardCache c;
  if (m.encoder.empty()) {
    c.x = densify(feats, m.input_dim);
  } else {
    for (std::size_t l = 0; l < m.encoder.size(); ++l) {
      const DenseLayer& layer = m.encoder[l];
      Vector a;
      if (l == 0) {
        a = layer.bias;
        for (std::size_t k = 0; k < feats.index.size(); ++k) {
          const std::size_t j = feats.index[k];
          const double v = feats.value[k];
          for (std::size_t i = 0; i < layer.weight.rows; ++i) a[i] += layer.weight(i, j) * v;
        }
      } else {
        a = add(matvec(layer.weight, c.post.back()), layer.bias);
      }
      c.post.push_back(gelu(a));
      c.pre.push_back(std::move(a));
    }
    c.x = c.post.back();
  }
  c.logits = add(matvec(m.head_W, c.x), m.head_b);
  return c;
}

double weight_penalty(const BackboneModel& m) {
  double s = sum_of_squares(m.head_W.data);
  for (const auto& layer : m.encoder) s += sum_of_squares(layer.weight.data);
  return s;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_separator(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    cur += c < 0x80 ? static_cast<char>(std::tolower(c)) : ch;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> sample_tokens(const Sample& s) {
  auto tokens = tokenize(s.text_a);
  if (!s.text_b.empty()) {
    tokens.emplace_back(kSeparatorToken);
    auto b = tokenize(s.text_b);
    tokens.insert(tokens.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  }
  return tokens;
}

std::size_t Vocabulary::lookup(const std::string& term) const {
  const auto it = index_.find(term);
  return it == index_.end() ? terms.size() : it->second;
}

void Vocabulary::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < terms.size(); ++i) index_.emplace(terms[i], i);
}

Vocabulary fit_vocabulary(std::span<const Sample* const> corpus, std::size_t max_features) {
  if (corpus.empty()) throw DataError("fit_vocabulary: empty corpus");
  std::map<std::string, std::size_t> df;
  for (const Sample* s : corpus) {
    auto tokens = sample_tokens(*s);
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    for (auto& t : tokens) ++df[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(df.begin(), df.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_features) ranked.resize(max_features);

  Vocabulary v;
  v.max_features = max_features;
  const double n = static_cast<double>(corpus.size());
  for (const auto& [term, count] : ranked) {
    v.terms.push_back(term);
    v.idf.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(count))) + 1.0);
  }
  v.rebuild_index();
  return v;
}

SparseVec tfidf(const Vocabulary& vocab, const Sample& s) {
  std::map<std::size_t, double> counts;
  for (const auto& t : sample_tokens(s)) {
    const std::size_t j = vocab.lookup(t);
    if (j < vocab.size()) counts[j] += 1.0;
  }
  SparseVec out;
  for (const auto& [j, count] : counts) {
    out.index.push_back(static_cast<std::uint32_t>(j));
    out.value.push_back(count * vocab.idf[j]);
  }
  const double n = norm(out.value);
  if (n > 0.0)
    for (auto& v : out.value) v /= n;
  return out;
}

SparseVec dense_features(std::span<const double> v) {
  SparseVec out;
  out.index.resize(v.size());
  std::iota(out.index.begin(), out.index.end(), 0u);
  out.value.assign(v.begin(), v.end());
  return out;
}

BackboneModel init_backbone(InputKind kind, std::size_t input_dim, std::size_t class_count, std::size_t hidden_dim,
                            std::size_t hidden_layers, Rng& rng) {
  if (class_count < 2) throw DataError("backbone needs at least two classes");
  if (input_dim == 0) throw DataError("backbone input dimension must be positive");
  BackboneModel m;
  m.input_kind = kind;
  m.input_dim = input_dim;
  std::size_t fan_in = input_dim;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    DenseLayer layer{Matrix(hidden_dim, fan_in), Vector(hidden_dim, 0.0)};
    fill_normal(layer.weight.data, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
    m.encoder.push_back(std::move(layer));
    fan_in = hidden_dim;
  }
  m.head_W = Matrix(class_count, fan_in);
  fill_normal(m.head_W.data, rng, std::sqrt(1.0 / static_cast<double>(fan_in)));
  m.head_b.assign(class_count, 0.0);
  return m;
}

SparseVec features(const BackboneModel& model, const Sample& s) {
  if (model.input_kind == InputKind::Latent) {
    if (s.latent.size() != model.input_dim)
      throw ShapeError("sample '" + s.id + "' has latent length " + std::to_string(s.latent.size()) +
                       ", model expects " + std::to_string(model.input_dim));
    return dense_features(s.latent);
  }
  return tfidf(model.vocab, s);
}

LatentVec encode_features(const BackboneModel& model, const SparseVec& feats) { return forward(model, feats).x; }

LatentVec encode(const BackboneModel& model, const Sample& s) { return encode_features(model, features(model, s)); }

Prediction predict_latent(const BackboneModel& model, std::span<const double> x) {
  if (x.size() != model.latent_dim())
    throw ShapeError("predict_latent: expected length " + std::to_string(model.latent_dim()) + ", got " +
                     std::to_string(x.size()));
  return softmax(add(matvec(model.head_W, x), model.head_b));
}

Prediction predict_text(const BackboneModel& model, const Sample& s) { return predict_latent(model, encode(model, s)); }

std::vector<std::span<double>> parameter_views(BackboneModel& model) {
  std::vector<std::span<double>> v;
  for (auto& layer : model.encoder) {
    v.emplace_back(layer.weight.data);
    v.emplace_back(layer.bias);
  }
  v.emplace_back(model.head_W.data);
  v.emplace_back(model.head_b);
  return v;
}

BackboneModel zeros_like(const BackboneModel& model) {
  BackboneModel g;
  g.input_kind = model.input_kind;
  g.input_dim = model.input_dim;
  g.alpha = model.alpha;
  for (const auto& layer : model.encoder)
    g.encoder.push_back({Matrix(layer.weight.rows, layer.weight.cols), Vector(layer.bias.size(), 0.0)});
  g.head_W = Matrix(model.head_W.rows, model.head_W.cols);
  g.head_b.assign(model.head_b.size(), 0.0);
  return g;
}

double backbone_objective(const BackboneModel& model, std::span<const SparseVec> feats,
                          std::span<const std::size_t> labels, BackboneModel* grad) {
  if (feats.size() != labels.size()) throw ShapeError("backbone_objective: features/labels length mismatch");
  if (feats.empty()) throw DataError("backbone_objective: no examples");
  const double inv_n = 1.0 / static_cast<double>(feats.size());
  double loss = 0.0;
  for (std::size_t n = 0; n < feats.size(); ++n) {
    const ForwardCache c = forward(model, feats[n]);
    const Prediction p = softmax(c.logits);
    loss += cross_entropy(labels[n], p);
    if (!grad) continue;

    Vector dz = p;
    dz[labels[n]] -= 1.0;
    for (auto& v : dz) v *= inv_n;
    add_outer(grad->head_W, dz, c.x);
    axpy(grad->head_b, dz);
    if (model.encoder.empty()) continue;
    Vector dh = matvec_t(model.head_W, dz);
    for (std::size_t l = model.encoder.size(); l-- > 0;) {
      Vector da(dh.size());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = dh[i] * gelu_grad(c.pre[l][i]);
      axpy(grad->encoder[l].bias, da);
      if (l == 0) {
        Matrix& gw = grad->encoder[0].weight;
        for (std::size_t k = 0; k < feats[n].index.size(); ++k) {
          const std::size_t j = feats[n].index[k];
          const double v = feats[n].value[k];
          for (std::size_t i = 0; i < gw.rows; ++i) gw(i, j) += da[i] * v;
        }
      } else {
        add_outer(grad->encoder[l].weight, da, c.post[l - 1]);
        dh = matvec_t(model.encoder[l].weight, da);
      }
    }
  }
  loss *= inv_n;
  loss += model.alpha * weight_penalty(model);
  if (!std::isfinite(loss)) throw NumericError("backbone objective is not finite");
  if (grad && model.alpha != 0.0) {
    axpy(grad->head_W.data, model.head_W.data, 2.0 * model.alpha);
    for (std::size_t l = 0; l < model.encoder.size(); ++l)
      axpy(grad->encoder[l].weight.data, model.encoder[l].weight.data, 2.0 * model.alpha);
  }
  return loss;
}

double accuracy(const BackboneModel& model, std::span<const SparseVec> feats, std::span<const std::size_t> labels) {
  if (feats.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t n = 0; n < feats.size(); ++n)
    if (argmax(forward(model, feats[n]).logits) == labels[n]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(feats.size());
}

BackboneModel fit_classifier(BackboneModel init, std::span<const SparseVec> train_x,
                             std::span<const std::size_t> train_y, std::span<const SparseVec> val_x,
                             std::span<const std::size_t> val_y, const BackboneConfig& cfg, TrainHistory* history) {
  if (train_x.empty()) throw DataError("train_backbone: empty training data");
  if (train_x.size() != train_y.size() || val_x.size() != val_y.size())
    throw ShapeError("train_backbone: features/labels length mismatch");
  for (std::size_t y : train_y)
    if (y >= init.class_count()) throw DataError("train_backbone: label " + std::to_string(y) + " out of range");
  for (std::size_t y : val_y)
    if (y >= init.class_count()) throw DataError("train_backbone: label " + std::to_string(y) + " out of range");

  BackboneModel model = std::move(init);
  model.alpha = cfg.alpha;
  BackboneModel grad = zeros_like(model);
  auto views = parameter_views(model);
  auto gviews = parameter_views(grad);
  std::vector<AdamState> adam;
  for (const auto& v : views) adam.push_back(AdamState::for_size(v.size(), cfg.lr));

  const bool use_train_for_val = val_x.empty();
  const auto sel_x = use_train_for_val ? train_x : val_x;
  const auto sel_y = use_train_for_val ? train_y : val_y;

  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_x.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);

  BackboneModel best = model;
  double best_score = -1.0;
  TrainHistory local;
  std::vector<SparseVec> bx;
  std::vector<std::size_t> by;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      bx.clear();
      by.clear();
      for (std::size_t k = start; k < end; ++k) {
        bx.push_back(train_x[order[k]]);
        by.push_back(train_y[order[k]]);
      }
      for (auto& g : gviews) std::fill(g.begin(), g.end(), 0.0);
      backbone_objective(model, bx, by, &grad);
      for (std::size_t t = 0; t < views.size(); ++t) adam_update(views[t], gviews[t], adam[t]);
    }
    local.train_objective.push_back(backbone_objective(model, train_x, train_y, nullptr));
    const double score = accuracy(model, sel_x, sel_y);
    local.val_score.push_back(score);
    if (score >= best_score) {
      best_score = score;
      best = model;
      local.best_epoch = epoch;
    }
  }
  if (cfg.epochs == 0) local.best_epoch = 0;
  if (history) *history = std::move(local);
  return best;
}

BackboneModel train_backbone(std::span<const Sample* const> train, std::span<const Sample* const> val,
                             const Dataset& shape, const BackboneConfig& cfg, TrainHistory* history) {
  if (train.empty()) throw DataError("train_backbone: empty training data");
  Rng rng(cfg.seed);
  BackboneModel model;
  if (shape.input == InputKind::Latent) {
    // Latent datasets already live in the representation space.
    model = init_backbone(InputKind::Latent, shape.latent_dim, shape.class_count(), 0, 0, rng);
    // Softmax regression is convex; start it from zero.
    std::fill(model.head_W.data.begin(), model.head_W.data.end(), 0.0);
  } else {
    Vocabulary vocab = fit_vocabulary(train, cfg.max_features);
    if (vocab.size() == 0) throw DataError("train_backbone: vocabulary is empty");
    model = init_backbone(InputKind::Text, vocab.size(), shape.class_count(), cfg.hidden_dim, cfg.hidden_layers, rng);
    model.vocab = std::move(vocab);
  }
  auto to_xy = [&](std::span<const Sample* const> rows, std::vector<SparseVec>& xs, std::vector<std::size_t>& ys) {
    for (const Sample* s : rows) {
      if (s->label >= shape.class_count()) throw DataError("train_backbone: label out of range for '" + s->id + "'");
      xs.push_back(features(model, *s));
      ys.push_back(s->label);
    }
  };
  std::vector<SparseVec> tx, vx;
  std::vector<std::size_t> ty, vy;
  to_xy(train, tx, ty);
  to_xy(val, vx, vy);
  Vocabulary vocab = std::move(model.vocab);
  model.vocab = Vocabulary{};
  BackboneModel trained = fit_classifier(std::move(model), tx, ty, vx, vy, cfg, history);
  trained.vocab = std::move(vocab);
  return trained;
}

double mcp(std::span<const double> p) {
  if (p.empty()) throw ShapeError("mcp: empty prediction");
  return *std::max_element(p.begin(), p.end());
}

ConfidenceBins confidence_bins(std::span<const Prediction> predictions, std::span<const std::size_t> labels,
                               std::span<const std::string> ids) {
  const std::size_t n = predictions.size();
  if (labels.size() != n || ids.size() != n) throw ShapeError("confidence_bins: length mismatch");
  if (n < kConfidenceLevels)
    throw DataError("confidence_bins: need at least " + std::to_string(kConfidenceLevels) + " samples, got " +
                    std::to_string(n));
  std::vector<double> conf(n);
  for (std::size_t i = 0; i < n; ++i) conf[i] = mcp(predictions[i]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (conf[a] != conf[b]) return conf[a] < conf[b];
    return ids[a] < ids[b];
  });

  ConfidenceBins out;
  const std::size_t base = n / kConfidenceLevels;
  const std::size_t extra = n % kConfidenceLevels;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < kConfidenceLevels; ++b) {
    ConfidenceBin bin;
    const std::size_t size = base + (b < extra ? 1 : 0);
    std::size_t hits = 0;
    double conf_sum = 0.0;
    for (std::size_t k = 0; k < size; ++k, ++pos) {
      const std::size_t i = order[pos];
      bin.members.push_back(i);
      if (argmax(predictions[i]) == labels[i]) ++hits;
      conf_sum += conf[i];
    }
    bin.accuracy = static_cast<double>(hits) / static_cast<double>(size);
    bin.mean_mcp = conf_sum / static_cast<double>(size);
    out.bins.push_back(std::move(bin));
  }
  return out;
}

ConfidenceBins confidence_bins(const BackboneModel& model, std::span<const Sample* const> eval_set) {
  std::vector<Prediction> preds;
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  for (const Sample* s : eval_set) {
    preds.push_back(predict_text(model, *s));
    labels.push_back(s->label);
    ids.push_back(s->id);
  }
  return confidence_bins(preds, labels, ids);
}

}  // namespace crm
