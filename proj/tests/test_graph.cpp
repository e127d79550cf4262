#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "avfc/graph.hpp"

using namespace avfc;
using G = Graph<double>;

namespace {

Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.storage()) v = scale * normal(rng);
  return t;
}

// Builds op(inputs) then reduces with a fixed random projection, so every
// output element contributes with a distinct weight.
using OpBuilder = std::function<G::Id(G&, const std::vector<G::Id>&)>;

double op_grad_error(const std::vector<Tensor<double>>& ins, const OpBuilder& build, std::uint64_t seed) {
  G g;
  std::vector<G::Id> ids;
  TensorTable<double> table;
  for (std::size_t i = 0; i < ins.size(); ++i) {
    const std::string name = "in" + std::to_string(i);
    ids.push_back(g.input(name, ins[i]));
    table.emplace(name, ins[i]);
  }
  const auto y = build(g, ids);
  Rng rng = make_rng(seed, {99});
  const auto w = g.constant(randn(g.shape(y), rng));
  const auto loss = g.sum(g.mul(y, w));
  std::size_t total = 0;
  for (const auto& t : ins) total += t.size();
  const auto r = grad_check(g, loss, static_cast<ParameterSet<double>*>(nullptr), table, 1e-4,
                            uniform_sampler(std::min<std::size_t>(total, 40), seed));
  return r.max_rel_error;
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor<double>>(Rng&)> inputs;
  OpBuilder build;
};

std::vector<OpCase> op_cases() {
  auto dims = [](Rng& r, int lo, int hi) { return std::size_t(uniform_int(r, lo, hi)); };
  std::vector<OpCase> c;
  c.push_back({"matmul",
               [=](Rng& r) {
                 const auto m = dims(r, 1, 5), k = dims(r, 1, 5), n = dims(r, 1, 5);
                 return std::vector{randn({m, k}, r), randn({k, n}, r)};
               },
               [](G& g, const auto& x) { return g.matmul(x[0], x[1]); }});
  c.push_back({"add_bias",
               [=](Rng& r) {
                 const auto m = dims(r, 1, 5), n = dims(r, 1, 5);
                 return std::vector{randn({m, n}, r), randn({n}, r)};
               },
               [](G& g, const auto& x) { return g.add_bias(x[0], x[1]); }});
  c.push_back({"add_mul",
               [=](Rng& r) {
                 const Shape s{dims(r, 1, 4), dims(r, 1, 4)};
                 return std::vector{randn(s, r), randn(s, r)};
               },
               [](G& g, const auto& x) { return g.mul(g.add(x[0], x[1]), x[1]); }});
  c.push_back({"scale",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 6)}, r)}; },
               [](G& g, const auto& x) { return g.scale(x[0], -2.5); }});
  c.push_back({"relu",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 6), 3}, r)}; },
               [](G& g, const auto& x) { return g.relu(x[0]); }});
  c.push_back({"swish_sigmoid_tanh",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 6), 3}, r, 2.0)}; },
               [](G& g, const auto& x) { return g.add(g.swish(x[0]), g.mul(g.sigmoid(x[0]), g.tanh(x[0]))); }});
  c.push_back({"glu",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 4), 2 * dims(r, 1, 3)}, r)}; },
               [](G& g, const auto& x) { return g.glu(x[0]); }});
  c.push_back({"layer_norm",
               [=](Rng& r) {
                 const auto n = dims(r, 2, 6);
                 return std::vector{randn({dims(r, 1, 4), n}, r), randn({n}, r), randn({n}, r)};
               },
               [](G& g, const auto& x) { return g.layer_norm(x[0], x[1], x[2]); }});
  c.push_back({"log_softmax",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 4), dims(r, 1, 6)}, r, 2.0)}; },
               [](G& g, const auto& x) { return g.log_softmax(x[0]); }});
  c.push_back({"softmax",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 4), dims(r, 1, 6)}, r, 2.0)}; },
               [](G& g, const auto& x) { return g.softmax(x[0]); }});
  c.push_back({"dropout",
               [=](Rng& r) { return std::vector{randn({dims(r, 2, 8), 4}, r)}; },
               [](G& g, const auto& x) { return g.dropout(x[0], 0.4, 17); }});
  c.push_back({"mean",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 5), dims(r, 1, 5)}, r)}; },
               [](G& g, const auto& x) { return g.mean(x[0]); }});
  c.push_back({"concat_slice",
               [=](Rng& r) {
                 const auto m = dims(r, 2, 5);
                 return std::vector{randn({m, dims(r, 1, 3)}, r), randn({m, dims(r, 1, 3)}, r)};
               },
               [](G& g, const auto& x) { return g.slice_rows(g.concat(x[0], x[1]), 1, 1); }});
  c.push_back({"reshape_embedding",
               [=](Rng& r) { return std::vector{randn({5, dims(r, 1, 4)}, r)}; },
               [](G& g, const auto& x) { return g.reshape(g.embedding(x[0], {3, 0, 3, 4}), {g.shape(x[0])[1], 4}); }});
  c.push_back({"conv1d",
               [=](Rng& r) {
                 const auto cin = dims(r, 1, 3), k = dims(r, 1, 3);
                 return std::vector{randn({dims(r, 3, 7), cin}, r), randn({k, cin, dims(r, 1, 3)}, r)};
               },
               [](G& g, const auto& x) { return g.conv1d(x[0], x[1], 2, 1); }});
  c.push_back({"depthwise_conv1d",
               [=](Rng& r) {
                 const auto ch = dims(r, 1, 4);
                 return std::vector{randn({dims(r, 3, 8), ch}, r), randn({dims(r, 1, 3), ch}, r)};
               },
               [](G& g, const auto& x) { return g.depthwise_conv1d(x[0], x[1], 1, 1); }});
  c.push_back({"conv3d",
               [=](Rng& r) {
                 const auto cin = dims(r, 1, 2);
                 return std::vector{randn({dims(r, 2, 4), 4, 5, cin}, r), randn({2, 3, 2, cin, dims(r, 1, 3)}, r)};
               },
               [](G& g, const auto& x) { return g.conv3d(x[0], x[1], {2, 3, 2, 1, 2, 1, 1, 1, 0}); }});
  c.push_back({"spatial_mean",
               [=](Rng& r) { return std::vector{randn({dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), 2}, r)}; },
               [](G& g, const auto& x) { return g.spatial_mean(x[0]); }});
  c.push_back({"rel_attention",
               [=](Rng& r) {
                 const Shape s{dims(r, 1, 5), 4};
                 return std::vector{randn(s, r), randn(s, r), randn(s, r), randn({2, 5}, r)};
               },
               [](G& g, const auto& x) { return g.rel_attention(x[0], x[1], x[2], x[3], 2, 2); }});
  c.push_back({"lstm",
               [=](Rng& r) {
                 const auto e = dims(r, 1, 3), h = dims(r, 1, 3);
                 return std::vector{randn({dims(r, 1, 4), e}, r), randn({e, 4 * h}, r), randn({h, 4 * h}, r),
                                    randn({4 * h}, r)};
               },
               [](G& g, const auto& x) { return g.lstm(x[0], x[1], x[2], x[3]); }});
  c.push_back({"outer_add",
               [=](Rng& r) {
                 const auto j = dims(r, 1, 3);
                 return std::vector{randn({dims(r, 1, 3), j}, r), randn({dims(r, 1, 3), j}, r)};
               },
               [](G& g, const auto& x) { return g.tanh(g.outer_add(x[0], x[1])); }});
  return c;
}

}  // namespace

TEST(GraphForward, IdentityMatmulReturnsInput) {
  ParameterSet<double> p;
  p.add("eye", Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  G g(&p);
  const Tensor<double> x({2, 3}, {1.5, -2, 3, 0.25, 7, -1});
  const auto y = g.matmul(g.input("x", x), g.parameter("eye"));
  EXPECT_EQ(g.value(y), x);
}

TEST(GraphForward, LogSoftmaxOfEqualLogits) {
  G g;
  const auto y = g.log_softmax(g.input("x", Tensor<double>({2}, {0, 0})));
  EXPECT_DOUBLE_EQ(g.value(y)[0], -std::log(2.0));
  EXPECT_DOUBLE_EQ(g.value(y)[1], -std::log(2.0));
}

TEST(GraphForward, ChainEqualsManualComposition) {
  Rng rng = make_rng(3);
  const auto x = randn({4, 3}, rng), w1 = randn({3, 5}, rng), b1 = randn({5}, rng), w2 = randn({5, 2}, rng);
  G g;
  const auto out = g.matmul(g.relu(g.add_bias(g.matmul(g.input("x", x), g.input("w1", w1)), g.input("b1", b1))),
                            g.input("w2", w2));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        double h = b1[j];
        for (std::size_t c = 0; c < 3; ++c) h += x(i, c) * w1(c, j);
        acc += std::max(0.0, h) * w2(j, k);
      }
      EXPECT_NEAR(g.value(out)(i, k), acc, 1e-12);
    }
}

TEST(GraphForward, ReplayMatchesPlaceholderShapeOrNamesNode) {
  G g;
  const auto x = g.input("features", Shape{2, 3});
  g.relu(x);
  g.forward({{"features", Tensor<double>({2, 3}, 1.0)}});
  try {
    g.forward({{"features", Tensor<double>({3, 2}, 1.0)}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("features"), std::string::npos);
  }
}

TEST(GraphForward, OpShapeMismatchNamesOp) {
  G g;
  const auto a = g.input("a", Tensor<double>({2, 3}));
  const auto b = g.input("b", Tensor<double>({3, 2}));
  try {
    g.add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos) << e.what();
  }
}

TEST(GraphBackward, SumGradientIsOnes) {
  G g;
  Rng rng = make_rng(5);
  const auto x = g.input("x", randn({3, 4}, rng));
  const auto l = g.sum(x);
  g.backward(l);
  EXPECT_EQ(g.gradient(x), Tensor<double>({3, 4}, 1.0));
}

TEST(GraphBackward, HalfSquaredNorm) {
  G g;
  const auto x = g.input("x", Tensor<double>({2}, {1, 2}));
  const auto l = g.scale(g.sum(g.mul(x, x)), 0.5);
  g.backward(l);
  EXPECT_EQ(g.gradient(x), Tensor<double>({2}, {1, 2}));
}

TEST(GraphBackward, BeforeForwardIsStateError) {
  G g;
  const auto x = g.input("x", Shape{2});
  const auto l = g.sum(x);
  EXPECT_THROW(g.backward(l), GraphStateError);
}

TEST(GraphBackward, RandomThreeLayerNetworkMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng(seed, {1});
    ParameterSet<double> p;
    p.add("w1", randn({4, 6}, rng));
    p.add("b1", randn({6}, rng));
    p.add("w2", randn({6, 5}, rng));
    p.add("w3", randn({5, 3}, rng));
    G g(&p);
    const auto x = g.input("x", randn({3, 4}, rng));
    auto h = g.tanh(g.add_bias(g.matmul(x, g.parameter("w1")), g.parameter("b1")));
    h = g.swish(g.matmul(h, g.parameter("w2")));
    const auto y = g.log_softmax(g.matmul(h, g.parameter("w3")));
    const auto l = g.scale(g.sum(g.slice_rows(y, 0, 1)), -1.0);
    const auto r = grad_check(g, l, &p, {{"x", g.value(x)}}, 1e-4, uniform_sampler(60, seed));
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GraphBackward, EveryOpMatchesFiniteDifferences) {
  std::size_t instances = 0;
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      Rng rng = make_rng(seed, {std::hash<std::string>{}(c.name)});
      const auto ins = c.inputs(rng);
      EXPECT_LE(op_grad_error(ins, c.build, seed), 1e-4) << c.name << " seed " << seed;
      ++instances;
    }
  }
  EXPECT_GE(instances, 100u);
}

TEST(GradCheck, LinearMapIsExact) {
  Rng rng = make_rng(8);
  const auto x = randn({6}, rng);
  const auto w = randn({6}, rng);
  G g;
  const auto l = g.sum(g.mul(g.input("x", x), g.constant(w)));
  const auto r = grad_check(g, l, static_cast<ParameterSet<double>*>(nullptr), {{"x", x}}, 1e-4,
                            uniform_sampler(6, 1));
  EXPECT_LE(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.checked, 6u);
}

TEST(GradCheck, ZeroEpsilonThrows) {
  G g;
  const auto x = Tensor<double>({2}, {1, 2});
  const auto l = g.sum(g.input("x", x));
  EXPECT_THROW(grad_check(g, l, static_cast<ParameterSet<double>*>(nullptr), {{"x", x}}, 0.0, uniform_sampler(2, 1)),
               std::invalid_argument);
}

TEST(GradCheck, NonScalarOutputThrows) {
  G g;
  const auto x = Tensor<double>({2}, {1, 2});
  const auto y = g.tanh(g.input("x", x));
  EXPECT_THROW(grad_check(g, y, static_cast<ParameterSet<double>*>(nullptr), {{"x", x}}, 1e-4, uniform_sampler(2, 1)),
               std::invalid_argument);
}

TEST(GradCheck, RestoresPerturbedParameters) {
  Rng rng = make_rng(12);
  ParameterSet<double> p;
  p.add("w", randn({3, 3}, rng));
  const auto before = p;
  G g(&p);
  const auto l = g.sum(g.tanh(g.matmul(g.constant(randn({2, 3}, rng)), g.parameter("w"))));
  grad_check(g, l, &p, {}, 1e-4, uniform_sampler(9, 2));
  EXPECT_EQ(p, before);
}

TEST(Dropout, RateZeroIsIdentity) {
  Rng rng = make_rng(4);
  const auto x = randn({10, 10}, rng);
  G g;
  EXPECT_EQ(g.value(g.dropout(g.input("x", x), 0.0, 123)), x);
}

TEST(Dropout, ZeroFractionMatchesRate) {
  const Tensor<double> x({100000}, 1.0);
  for (double rate : {0.1, 0.3, 0.5}) {
    G g;
    const auto& y = g.value(g.dropout(g.input("x", x), rate, 7));
    std::size_t zeros = 0;
    for (double v : y.values()) zeros += v == 0.0;
    EXPECT_NEAR(double(zeros) / 1e5, rate, 0.02);
  }
}

TEST(Dropout, SameSeedIsBitIdentical) {
  Rng rng = make_rng(6);
  const auto x = randn({50, 8}, rng);
  auto run = [&](std::uint64_t seed) {
    G g;
    return g.value(g.dropout(g.input("x", x), 0.3, seed));
  };
  EXPECT_EQ(run(5), run(5));
  EXPECT_NE(run(5), run(6));
}

TEST(GraphOps, Conv3dMatchesDirectSum) {
  Rng rng = make_rng(21);
  const auto x = randn({3, 5, 4, 2}, rng);
  const auto w = randn({2, 3, 3, 2, 3}, rng);
  const Conv3dGeometry geo{2, 3, 3, 1, 2, 1, 1, 1, 1};
  G g;
  const auto& y = g.value(g.conv3d(g.input("x", x), g.input("w", w), geo));
  const std::size_t To = (3 + 2 - 2) / 1 + 1, Ho = (5 + 2 - 3) / 2 + 1, Wo = (4 + 2 - 3) / 1 + 1;
  ASSERT_EQ(y.shape(), (Shape{To, Ho, Wo, 3}));
  for (std::size_t t = 0; t < To; ++t)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j)
        for (std::size_t o = 0; o < 3; ++o) {
          double acc = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 3; ++b)
              for (int c = 0; c < 3; ++c)
                for (int ci = 0; ci < 2; ++ci) {
                  const int ts = int(t) + a - 1, hs = int(i) * 2 + b - 1, ws = int(j) + c - 1;
                  if (ts < 0 || ts >= 3 || hs < 0 || hs >= 5 || ws < 0 || ws >= 4) continue;
                  acc += x[((ts * 5 + hs) * 4 + ws) * 2 + ci] * w[(((a * 3 + b) * 3 + c) * 2 + ci) * 3 + o];
                }
          EXPECT_NEAR(y[((t * Ho + i) * Wo + j) * 3 + o], acc, 1e-12);
        }
}

TEST(GraphOps, RelAttentionMatchesNaiveHeads) {
  Rng rng = make_rng(22);
  const std::size_t T = 5, d = 6, H = 2, dh = 3, R = 2;
  const auto q = randn({T, d}, rng), k = randn({T, d}, rng), v = randn({T, d}, rng), b = randn({H, 2 * R + 1}, rng);
  G g;
  const auto& y = g.value(g.rel_attention(g.input("q", q), g.input("k", k), g.input("v", v), g.input("b", b), H, R));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(T);
      double z = 0;
      for (std::size_t j = 0; j < T; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        const int rel = std::clamp(int(j) - int(i), -int(R), int(R)) + int(R);
        s[j] = std::exp(dot / std::sqrt(double(dh)) + b(h, rel));
        z += s[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double o = 0;
        for (std::size_t j = 0; j < T; ++j) o += s[j] / z * v(j, h * dh + c);
        EXPECT_NEAR(y(i, h * dh + c), o, 1e-12);
      }
    }
}

TEST(GraphOps, LstmMatchesCellRecurrence) {
  Rng rng = make_rng(23);
  const std::size_t U = 4, E = 3, Hd = 2;
  const auto x = randn({U, E}, rng), wi = randn({E, 4 * Hd}, rng), wh = randn({Hd, 4 * Hd}, rng), b = randn({4 * Hd}, rng);
  G g;
  const auto& y = g.value(g.lstm(g.input("x", x), g.input("wi", wi), g.input("wh", wh), g.input("b", b)));
  std::vector<double> h(Hd, 0.0), c(Hd, 0.0);
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  for (std::size_t u = 0; u < U; ++u) {
    std::vector<double> z(4 * Hd);
    for (std::size_t j = 0; j < 4 * Hd; ++j) {
      z[j] = b[j];
      for (std::size_t e = 0; e < E; ++e) z[j] += x(u, e) * wi(e, j);
      for (std::size_t e = 0; e < Hd; ++e) z[j] += h[e] * wh(e, j);
    }
    for (std::size_t j = 0; j < Hd; ++j) {
      c[j] = sig(z[Hd + j]) * c[j] + sig(z[j]) * std::tanh(z[2 * Hd + j]);
      h[j] = sig(z[3 * Hd + j]) * std::tanh(c[j]);
      EXPECT_NEAR(y(u, j), h[j], 1e-12);
    }
  }
}

TEST(GraphOps, OuterAddRowOrder) {
  G g;
  const auto y = g.outer_add(g.input("a", Tensor<double>({2, 1}, {10, 20})),
                             g.input("b", Tensor<double>({3, 1}, {1, 2, 3})));
  EXPECT_EQ(g.value(y), Tensor<double>({6, 1}, {11, 12, 13, 21, 22, 23}));
}

TEST(GraphOps, NonFiniteValuesAreReported) {
  G g;
  const auto x = g.input("x", Tensor<double>({1}, {1e308}));
  EXPECT_THROW(g.scale(x, 10.0), NonFiniteError);
}

TEST(GraphOps, ForwardIsBitIdenticalAcrossRuns) {
  auto run = [] {
    Rng rng = make_rng(31);
    G g;
    const auto x = g.input("x", randn({6, 4}, rng));
    const auto w = g.input("w", randn({3, 4, 5}, rng));
    const auto y = g.dropout(g.layer_norm(g.conv1d(x, w, 1, 1), g.constant(Tensor<double>({5}, 1.0)),
                                          g.constant(Tensor<double>({5}, 0.0))),
                             0.2, 9);
    return g.value(y);
  };
  EXPECT_EQ(run(), run());
}
