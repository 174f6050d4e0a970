#include <doctest.h>

#include <cmath>

#include "crm/backbone.hpp"
#include "crm/errors.hpp"
#include "crm/model_io.hpp"

using namespace crm;

namespace {

Sample text_sample(const std::string& id, std::size_t label, const std::string& a, const std::string& b = "") {
  Sample s;
  s.id = id;
  s.label = label;
  s.text_a = a;
  s.text_b = b;
  return s;
}

Vocabulary two_term_vocab() {
  Vocabulary v;
  v.terms = {"a", "b"};
  v.idf = {1.0, 1.0};
  v.max_features = 2;
  v.rebuild_index();
  return v;
}

// A toy sentiment corpus: positive and negative cue words plus filler.
Dataset sentiment_toy(std::size_t n) {
  const char* pos[] = {"great", "wonderful", "superb", "moving"};
  const char* neg[] = {"awful", "boring", "dull", "clumsy"};
  const char* filler[] = {"the", "film", "plot", "actor", "scene", "story"};
  Rng rng(8);
  Dataset ds;
  ds.class_names = {"neg", "pos"};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % 2;
    std::string text;
    for (int k = 0; k < 6; ++k) text += std::string(filler[rng.below(6)]) + " ";
    text += y ? pos[rng.below(4)] : neg[rng.below(4)];
    Sample s = text_sample("s" + std::to_string(1000 + i), y, text);
    s.split = i % 10 == 0 ? Split::Val : Split::Train;
    ds.samples.push_back(s);
  }
  validate_and_sort(ds);
  return ds;
}

}  // namespace

TEST_CASE("tokenizer") {
  CHECK(tokenize("Hello, WORLD!  it's") == std::vector<std::string>{"hello", "world", "it", "s"});
  CHECK(tokenize("").empty());
  const Sample pair = text_sample("p", 0, "A cat", "a dog");
  CHECK(sample_tokens(pair) == std::vector<std::string>{"a", "cat", "[sep]", "a", "dog"});
  // Brackets are punctuation, so text can never forge the separator.
  CHECK(tokenize("[sep]") == std::vector<std::string>{"sep"});
}

TEST_CASE("vocabulary") {
  const Sample one = text_sample("d", 0, "a b a");
  const Sample* corpus1[] = {&one};
  const Vocabulary v = fit_vocabulary(corpus1, 10);
  CHECK(v.terms == std::vector<std::string>{"a", "b"});
  // ln((1+1)/(1+1)) + 1
  CHECK(v.idf[0] == 1.0);
  CHECK(v.idf[1] == 1.0);

  const Sample d1 = text_sample("1", 0, "a b"), d2 = text_sample("2", 0, "a");
  const Sample* corpus2[] = {&d1, &d2};
  const Vocabulary top = fit_vocabulary(corpus2, 1);
  CHECK(top.terms == std::vector<std::string>{"a"});
  CHECK(top.lookup("b") == top.size());
  const Vocabulary both = fit_vocabulary(corpus2, 5);
  CHECK(both.idf[1] == doctest::Approx(std::log(3.0 / 2.0) + 1.0).epsilon(1e-15));

  // Ties in document frequency break lexicographically.
  const Sample t = text_sample("t", 0, "zeta alpha mid");
  const Sample* corpus3[] = {&t};
  CHECK(fit_vocabulary(corpus3, 2).terms == std::vector<std::string>{"alpha", "mid"});
  CHECK_THROWS_AS(fit_vocabulary(std::span<const Sample* const>{}, 5), DataError);
}

TEST_CASE("tfidf is count times idf, unit length") {
  Vocabulary v = two_term_vocab();
  v.idf = {1.0, 2.0};
  v.rebuild_index();
  const SparseVec f = tfidf(v, text_sample("x", 0, "a a b zzz"));
  // raw (2, 2) -> unit
  REQUIRE(f.index.size() == 2);
  CHECK(f.value[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(f.value[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(tfidf(v, text_sample("e", 0, "")).index.empty());
}

TEST_CASE("hand-computed forward pass") {
  BackboneModel m;
  m.input_kind = InputKind::Text;
  m.input_dim = 2;
  m.vocab = two_term_vocab();
  m.encoder.push_back({Matrix::identity(2), Vector{0.0, 0.0}});
  m.head_W = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}, {0.5, 0.5}});
  m.head_b = {0.0, 0.1, -0.1};
  const LatentVec x = encode(m, text_sample("x", 0, "a"));
  CHECK(x[0] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(x[1] == 0.0);

  // Empty text: encoder applied to the zero vector.
  const LatentVec z = encode(m, text_sample("e", 0, ""));
  CHECK(z == Vector{0.0, 0.0});
  const Prediction p0 = predict_latent(m, Vector{0.0, 0.0});
  const Prediction sb = softmax(m.head_b);
  for (std::size_t c = 0; c < 3; ++c) CHECK(p0[c] == doctest::Approx(sb[c]).epsilon(1e-15));

  const Sample s = text_sample("y", 0, "b a b");
  CHECK(predict_text(m, s) == predict_latent(m, encode(m, s)));
  CHECK(predict_text(m, s) == predict_text(m, text_sample("y2", 0, "b a b")));
  CHECK_THROWS_AS(predict_latent(m, Vector{1.0}), ShapeError);
}

TEST_CASE("predict_latent against a direct evaluation") {
  Rng rng(3);
  const BackboneModel m = init_backbone(InputKind::Latent, 5, 4, 0, 0, rng);
  Vector x(5);
  fill_normal(x, rng, 1.0);
  const Prediction p = predict_latent(m, x);
  double z[4], total = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    z[c] = m.head_b[c];
    for (std::size_t j = 0; j < 5; ++j) z[c] += m.head_W(c, j) * x[j];
    total += std::exp(z[c]);
  }
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(p[c] - std::exp(z[c]) / total) < 1e-9);

  BackboneModel zero = m;
  zero.head_W = Matrix(4, 5);
  zero.head_b.assign(4, 0.0);
  for (double v : predict_latent(zero, x)) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("objective gradient on a random model") {
  Rng rng(12);
  BackboneModel m = init_backbone(InputKind::Text, 7, 3, 5, 2, rng);
  m.alpha = 0.01;
  std::vector<SparseVec> xs{SparseVec{{0, 3, 6}, {0.2, -0.5, 1.0}}, SparseVec{{1, 2}, {0.7, 0.7}}};
  std::vector<std::size_t> ys{2, 0};
  LossFn fn = [&](std::span<const double> p, std::span<double> g) {
    BackboneModel t = m;
    unflatten(p, parameter_views(t));
    if (g.empty()) return backbone_objective(t, xs, ys, nullptr);
    BackboneModel gm = zeros_like(t);
    const double v = backbone_objective(t, xs, ys, &gm);
    const Vector flat = flatten(parameter_views(gm));
    std::copy(flat.begin(), flat.end(), g.begin());
    return v;
  };
  BackboneModel probe = m;
  CHECK(grad_check(fn, flatten(parameter_views(probe))).max_rel_error < 1e-6);
}

TEST_CASE("training on a toy sentiment corpus") {
  const Dataset ds = sentiment_toy(200);
  BackboneConfig cfg;
  cfg.hidden_dim = 16;
  cfg.lr = 0.01;
  cfg.seed = 5;
  const auto train = ds.select(Split::Train, SampleKind::Factual);
  const auto val = ds.select(Split::Val, SampleKind::Factual);
  TrainHistory hist;
  const BackboneModel m = train_backbone(train, val, ds, cfg, &hist);
  CHECK(hist.train_objective.size() == cfg.epochs);
  std::size_t hits = 0;
  for (const Sample* s : train)
    if (argmax(predict_text(m, *s)) == s->label) ++hits;
  CHECK(static_cast<double>(hits) >= 0.95 * static_cast<double>(train.size()));

  // Same seed, same bytes.
  CHECK(serialize_backbone(train_backbone(train, val, ds, cfg)) == serialize_backbone(m));

  // Every model scores exactly 0.5 on this validation pair, so the last
  // epoch is kept and the penalty has had the whole run to act.
  const Sample tie0 = text_sample("tie0", 0, "great film"), tie1 = text_sample("tie1", 1, "great film");
  const Sample* ties[] = {&tie0, &tie1};
  BackboneConfig heavy = cfg;
  heavy.alpha = 1e6;
  heavy.epochs = 40;
  TrainHistory heavy_hist;
  const BackboneModel flat = train_backbone(train, ties, ds, heavy, &heavy_hist);
  CHECK(heavy_hist.best_epoch == 39);
  CHECK(sum_of_squares(flat.head_W.data) < 1e-2);
  // Biases are not penalized, so the prediction collapses to the class prior.
  double prior = 0.0;
  for (const Sample* s : train) prior += static_cast<double>(s->label);
  prior /= static_cast<double>(train.size());
  for (const Sample* s : val) CHECK(std::abs(predict_text(flat, *s)[1] - prior) < 0.05);
}

TEST_CASE("separable latent data") {
  SynthConfig sc;
  sc.seed = 2;
  sc.n = 400;
  sc.classes = 2;
  sc.dim = 6;
  const Dataset ds = synth_mirror_dataset(sc).dataset;
  BackboneConfig cfg;
  const auto train = ds.select(Split::Train, SampleKind::Factual);
  const auto val = ds.select(Split::Val, SampleKind::Factual);
  const BackboneModel m = train_backbone(train, val, ds, cfg);
  CHECK(m.encoder.empty());
  CHECK(m.latent_dim() == 6);
  std::size_t hits = 0;
  for (const Sample* s : val)
    if (argmax(predict_text(m, *s)) == s->label) ++hits;
  CHECK(static_cast<double>(hits) >= 0.98 * static_cast<double>(val.size()));

  CHECK_THROWS_AS(train_backbone(std::span<const Sample* const>{}, val, ds, cfg), DataError);
}

TEST_CASE("mcp") {
  CHECK(mcp(Vector{0.5, 0.5}) == 0.5);
  CHECK(mcp(softmax(Vector{1.0, 2.0, 3.0})) == doctest::Approx(0.6652).epsilon(1e-4));
  CHECK(mcp(Vector{0.25, 0.25, 0.25, 0.25}) == 0.25);
}

TEST_CASE("confidence bins") {
  auto make = [](std::size_t n, std::vector<Prediction>& preds, std::vector<std::size_t>& labels,
                 std::vector<std::string>& ids) {
    for (std::size_t i = 0; i < n; ++i) {
      const double conf = 0.5 + 0.5 * static_cast<double>(i) / static_cast<double>(n);
      preds.push_back({conf, 1.0 - conf});
      // Correct exactly when confident beyond 0.75.
      labels.push_back(conf > 0.75 ? 0 : 1);
      ids.push_back("id" + std::to_string(1000 + i));
    }
  };
  std::vector<Prediction> p;
  std::vector<std::size_t> y;
  std::vector<std::string> ids;
  make(100, p, y, ids);
  ConfidenceBins b = confidence_bins(p, y, ids);
  REQUIRE(b.bins.size() == 10);
  for (const auto& bin : b.bins) CHECK(bin.members.size() == 10);
  CHECK(b.bins[9].accuracy >= b.bins[0].accuracy);
  CHECK(b.bins[0].accuracy == 0.0);
  CHECK(b.bins[9].accuracy == 1.0);
  CHECK(b.bins[0].mean_mcp < b.bins[9].mean_mcp);

  p.clear();
  y.clear();
  ids.clear();
  make(103, p, y, ids);
  b = confidence_bins(p, y, ids);
  for (std::size_t k = 0; k < 10; ++k) CHECK(b.bins[k].members.size() == (k < 3 ? 11u : 10u));

  p.resize(9);
  y.resize(9);
  ids.resize(9);
  CHECK_THROWS_AS(confidence_bins(p, y, ids), DataError);
}
