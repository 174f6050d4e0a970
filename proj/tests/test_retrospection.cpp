#include <doctest.h>

#include <cmath>

#include "crm/errors.hpp"
#include "crm/retrospection.hpp"

using namespace crm;

namespace {

Vector randn(std::size_t n, Rng& rng) {
  Vector v(n);
  fill_normal(v, rng, 1.0);
  return v;
}

BackboneModel random_head(std::size_t D, std::size_t C, Rng& rng) {
  BackboneModel b = init_backbone(InputKind::Latent, D, C, 0, 0, rng);
  for (auto& v : b.head_b) v = 0.3 * rng.normal();
  return b;
}

Vector direct_softmax(const BackboneModel& b, const Vector& x) {
  Vector z(b.class_count());
  double total = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    double s = b.head_b[c];
    for (std::size_t j = 0; j < x.size(); ++j) s += b.head_W(c, j) * x[j];
    total += (z[c] = std::exp(s));
  }
  for (auto& v : z) v /= total;
  return z;
}

}  // namespace

TEST_CASE("compare_representation") {
  Rng rng(1);
  const BackboneModel b = random_head(4, 3, rng);
  const Vector x = randn(4, rng), xs = randn(4, rng);
  const Prediction same = compare_representation(b, x, x);
  const Prediction sb = softmax(b.head_b);
  for (std::size_t c = 0; c < 3; ++c) CHECK(same[c] == doctest::Approx(sb[c]).epsilon(1e-15));

  const Prediction d = compare_representation(b, x, xs);
  const Vector oracle = direct_softmax(b, sub(x, xs));
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(d[c] - oracle[c]) < 1e-9);

  // Difference in the null space of head_W with zero bias.
  BackboneModel n = b;
  n.head_b.assign(3, 0.0);
  n.head_W = Matrix::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {1, 1, 0, 0}});
  for (double v : compare_representation(n, Vector{0, 0, 1, 2}, Vector{0, 0, -3, 5}))
    CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(compare_representation(b, x, Vector{1.0}), ShapeError);
}

TEST_CASE("hand-set filter deducts the counterfactual prediction") {
  Rng rng(2);
  constexpr std::size_t C = 3;
  const BackboneModel b = random_head(5, C, rng);
  RetrospectionModel m = init_retrospection(C, 1, Fusion::Late, 0.0, rng);
  m.act = ActivationKind::Identity;
  m.conv_F = Matrix::from_rows({{1}, {-1}, {0}});
  m.fc_W = Matrix::identity(C);  // K = 1: class c reads its own filter response
  m.fc_b.assign(C, 0.0);
  const Vector x = randn(5, rng), xs = randn(5, rng);
  const Vector y = retrospect_pair(m, b, x, xs);
  const Vector fx = direct_softmax(b, x), fs = direct_softmax(b, xs);
  for (std::size_t c = 0; c < C; ++c) CHECK(std::abs(y[c] - (fx[c] - fs[c])) < 1e-12);

  m.fc_W = Matrix(C, C);
  m.fc_b = {0.5, -1.0, 2.0};
  CHECK(retrospect_pair(m, b, x, xs) == m.fc_b);
}

TEST_CASE("C=2, K=1 retrospection by hand") {
  BackboneModel b;
  b.input_kind = InputKind::Latent;
  b.input_dim = 2;
  b.head_W = Matrix::from_rows({{1.0, 0.0}, {0.0, 2.0}});
  b.head_b = {0.0, 0.5};
  RetrospectionModel m;
  m.conv_F = Matrix::from_rows({{0.3}, {-0.7}, {1.1}});
  m.fc_W = Matrix::from_rows({{0.9, -0.4}, {0.2, 1.5}});
  m.fc_b = {0.05, -0.05};
  const Vector x{0.4, -0.2}, xs{-0.1, 0.6};
  auto sm2 = [](double a, double c) {
    const double ea = std::exp(a), ec = std::exp(c);
    return Vector{ea / (ea + ec), ec / (ea + ec)};
  };
  const Vector fx = sm2(0.4, -0.4 + 0.5);
  const Vector fs = sm2(-0.1, 1.2 + 0.5);
  const Vector fd = sm2(0.5, -1.6 + 0.5);
  double h[2];
  for (int c = 0; c < 2; ++c) h[c] = gelu(0.3 * fx[c] - 0.7 * fs[c] + 1.1 * fd[c]);
  const Vector y = retrospect_pair(m, b, x, xs);
  CHECK(std::abs(y[0] - (0.9 * h[0] - 0.4 * h[1] + 0.05)) < 1e-9);
  CHECK(std::abs(y[1] - (0.2 * h[0] + 1.5 * h[1] - 0.05)) < 1e-9);
}

TEST_CASE("fusion degeneracies") {
  Rng rng(3);
  constexpr std::size_t C = 3, D = 4, K = 2;
  const BackboneModel b = random_head(D, C, rng);
  CounterfactualSet one;
  one.factual = randn(D, rng);
  one.counterfactuals.push_back(randn(D, rng));
  one.provenance.push_back(Provenance::Handcrafted);

  RetrospectionModel late = init_retrospection(C, K, Fusion::Late, 0.0, rng);
  RetrospectionModel middle = late;
  middle.fusion = Fusion::Middle;
  middle.attn_v = randn(C * K, rng);
  const Prediction pair = softmax(retrospect_pair(late, b, one.factual, one.counterfactuals[0]));
  FusionTrace trace;
  const Prediction pl = fuse(late, b, one);
  const Prediction pm = fuse(middle, b, one, &trace);
  REQUIRE(trace.weights.size() == 1);
  CHECK(trace.weights[0] == 1.0);
  for (std::size_t c = 0; c < C; ++c) {
    CHECK(std::abs(pl[c] - pair[c]) < 1e-12);
    CHECK(std::abs(pm[c] - pair[c]) < 1e-12);
  }

  // Late equals middle with mean pooling for larger sets too.
  CounterfactualSet many = one;
  for (int i = 0; i < 4; ++i) {
    many.counterfactuals.push_back(randn(D, rng));
    many.provenance.push_back(Provenance::Generated);
  }
  middle.middle_pooling = MiddlePooling::Mean;
  const Prediction a = fuse(late, b, many), c2 = fuse(middle, b, many);
  for (std::size_t c = 0; c < C; ++c) CHECK(std::abs(a[c] - c2[c]) < 1e-12);

  // Early fusion with the factual as its own counterfactual.
  CounterfactualSet self;
  self.factual = one.factual;
  self.counterfactuals = {one.factual};
  const auto stacks = fusion_stacks(Fusion::Early, b, self);
  REQUIRE(stacks.size() == 1);
  const Prediction fx = predict_latent(b, one.factual);
  const Prediction f0 = softmax(b.head_b);
  for (std::size_t c = 0; c < C; ++c) {
    CHECK(stacks[0](c, 0) == fx[c]);
    CHECK(stacks[0](c, 1) == fx[c]);
    CHECK(stacks[0](c, 2) == doctest::Approx(f0[c]).epsilon(1e-15));
  }

  CounterfactualSet empty;
  empty.factual = one.factual;
  CHECK_THROWS_AS(fuse(late, b, empty), DataError);
}

TEST_CASE("defaults and parsing") {
  Rng rng(4);
  const RetrospectionModel m = init_retrospection(2, 10, Fusion::Middle, 0.0, rng);
  CHECK(m.filter_count() == 10);
  CHECK(m.lambda == 0.0);
  CHECK(m.attn_v.size() == 20);
  CHECK(init_retrospection(2, 10, Fusion::Late, 0.0, rng).attn_v.empty());
  CHECK(parse_fusion("early") == Fusion::Early);
  CHECK(parse_fusion("late") == Fusion::Late);
  CHECK(parse_fusion("middle") == Fusion::Middle);
  CHECK(std::string(to_string(Fusion::Middle)) == "middle");
  CHECK_THROWS_AS(parse_fusion("sideways"), DataError);
  const TrainConfig cfg;
  CHECK(cfg.epochs == 20);
  CHECK(cfg.lr == 0.001);
}

TEST_CASE("objective gradient including the penalty") {
  Rng rng(5);
  constexpr std::size_t C = 3, D = 4;
  const BackboneModel b = random_head(D, C, rng);
  for (Fusion fusion : {Fusion::Early, Fusion::Late, Fusion::Middle}) {
    RetrospectionModel m = init_retrospection(C, 4, fusion, 0.05, rng);
    std::vector<RetrospectionExample> batch;
    for (int i = 0; i < 4; ++i) {
      CounterfactualSet s;
      s.factual = randn(D, rng);
      for (int k = 0; k < 3; ++k) s.counterfactuals.push_back(randn(D, rng));
      batch.push_back({fusion_stacks(fusion, b, s), static_cast<std::size_t>(i % 3)});
    }
    LossFn fn = [&](std::span<const double> p, std::span<double> g) {
      RetrospectionModel t = m;
      unflatten(p, parameter_views(t));
      if (g.empty()) return retrospection_objective(t, batch, nullptr);
      RetrospectionModel gm = zeros_like(t);
      const double v = retrospection_objective(t, batch, &gm);
      const Vector flat = flatten(parameter_views(gm));
      std::copy(flat.begin(), flat.end(), g.begin());
      return v;
    };
    RetrospectionModel probe = m;
    CHECK(grad_check(fn, flatten(parameter_views(probe))).max_rel_error < 1e-6);
  }
}

TEST_CASE("training leaves the backbone alone and learns a separable task") {
  Rng rng(6);
  constexpr std::size_t C = 2, D = 4;
  BackboneModel b = random_head(D, C, rng);
  const BackboneModel before = b;
  // The label is readable from f(x - x*) but the factual alone is noise.
  auto make = [&](std::size_t n) {
    std::vector<LabeledSet> out;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t y = i % 2;
      LabeledSet ls;
      ls.label = y;
      ls.set.factual = randn(D, rng);
      Vector shift(D, 0.0);
      for (std::size_t j = 0; j < D; ++j) shift[j] = b.head_W(1 - y, j) - b.head_W(y, j);
      ls.set.counterfactuals.push_back(add(ls.set.factual, scaled(shift, 2.0)));
      out.push_back(ls);
    }
    return out;
  };
  const auto train = make(200), val = make(50);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.seed = 9;
  RetrospectionModel m = init_retrospection(C, 4, Fusion::Late, 0.0, rng);
  TrainHistory hist;
  const RetrospectionModel trained = train_retrospection(m, b, train, val, cfg, &hist);
  CHECK(hist.val_score.size() == cfg.epochs);
  std::size_t hits = 0;
  for (const auto& ls : val)
    if (argmax(fuse(trained, b, ls.set)) == ls.label) ++hits;
  CHECK(hits >= 45);
  CHECK(b.head_W == before.head_W);
  CHECK(b.head_b == before.head_b);
  CHECK_THROWS_AS(train_retrospection(m, b, std::span<const LabeledSet>{}, val, cfg), DataError);
}
