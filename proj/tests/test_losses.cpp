#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "mvsdf/adam.hpp"
#include "mvsdf/losses.hpp"

using namespace mvsdf;

namespace {

FieldConfig tiny_config() {
  FieldConfig cfg;
  cfg.hash = {4, 64, 4, 2, 1 << 10};
  cfg.freq_octaves_pos = 3;
  cfg.freq_octaves_dir = 2;
  cfg.trunk_hidden = {32, 32};
  cfg.trunk_skips = {1};
  cfg.feature_dim = 8;
  cfg.transient_sdf_hidden = {16};
  cfg.albedo_hidden = {16, 16};
  cfg.texture_hidden = {16, 16};
  cfg.transient_tex_hidden = {16};
  cfg.num_views = 3;
  return cfg;
}

template <typename T>
Tensor<T> random_tensor(Prng& rng, long r, long c, double lo, double hi) {
  Tensor<T> t(r, c);
  for (long i = 0; i < t.size(); ++i) t.v[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("view weight is the normalized angle between view directions") {
  Eigen::Vector3d a(2, 0, 0);
  CHECK(view_weight(a, a) == doctest::Approx(0.0));
  CHECK(view_weight(a, {0, 3, 0}) == doctest::Approx(0.5));
  CHECK(view_weight(a, {-1, 0, 0}) == doctest::Approx(1.0));
  CHECK(view_weight(a, {0, 0, -5}) == doctest::Approx(0.5));
  // scale of either position is irrelevant
  CHECK(view_weight({4, 4, 0}, {1, 0, 0}) == doctest::Approx(0.25));
  CHECK_THROWS_WITH_AS(view_weight({0, 0, 0}, a), doctest::Contains("origin"),
                       std::runtime_error);
  CHECK_THROWS_AS(view_weight(a, {0, 0, 0}), std::runtime_error);
}

TEST_CASE("input view weight override") {
  Eigen::Vector3d pos(1, 2, 3);
  CHECK(rgb_view_weight(pos, pos, true, RgbWeightMode::kInputOverride) == 1.0);
  CHECK(rgb_view_weight(pos, pos, true, RgbWeightMode::kLiteral) == doctest::Approx(0.0));
  CHECK(rgb_view_weight({1, 0, 0}, {0, 1, 0}, false, RgbWeightMode::kInputOverride) ==
        doctest::Approx(0.5));
  CHECK(rgb_weight_mode_from_string("literal") == RgbWeightMode::kLiteral);
  CHECK(rgb_weight_mode_from_string("input_override") == RgbWeightMode::kInputOverride);
  CHECK_THROWS_AS(rgb_weight_mode_from_string("other"), std::runtime_error);
  CHECK(std::string(to_string(RgbWeightMode::kLiteral)) == "literal");
}

TEST_CASE("rgb loss pinned values and weight linearity") {
  Graph<double> g(false);
  int rendered = g.constant(Tensor<double>::from_rows(1, 3, {1, 0, 0}));
  Tensor<double> ref = Tensor<double>::zeros(1, 3);
  CHECK(g.value(rgb_loss_node(g, rendered, ref, 1.0)).v[0] == doctest::Approx(1.0));
  CHECK(g.value(rgb_loss_node(g, rendered, ref, 2.0)).v[0] == doctest::Approx(2.0));

  // perfect reconstruction is exactly zero
  Tensor<double> same = Tensor<double>::from_rows(2, 3, {.1, .2, .3, .4, .5, .6});
  int node = rgb_loss_node(g, g.constant(same), same, 0.7);
  CHECK(g.value(node).v[0] == 0.0);

  // mean over rays: two rays with squared errors 1 and 4
  int two = g.constant(Tensor<double>::from_rows(2, 3, {1, 0, 0, 0, 2, 0}));
  CHECK(g.value(rgb_loss_node(g, two, Tensor<double>::zeros(2, 3), 1.0)).v[0] ==
        doctest::Approx(2.5));

  CHECK_THROWS_WITH_AS(
      rgb_loss_node(g, rendered, Tensor<double>::zeros(2, 3), 1.0),
      doctest::Contains("shape mismatch"), std::runtime_error);
}

TEST_CASE("rgb loss gradient matches finite differences in float") {
  Prng rng(11);
  ParameterStore<float> store;
  store.create("color", 4, 3);
  Tensor<float>& c = store.at("color");
  for (long i = 0; i < c.size(); ++i) c.v[i] = static_cast<float>(rng.uniform(0.1, 0.9));
  Tensor<float> ref = random_tensor<float>(rng, 4, 3, 0.0, 1.0);
  auto build = [&](Graph<float>& g, ParameterStore<float>& s) {
    return rgb_loss_node(g, g.param(s, "color"), ref, 0.7);
  };
  CHECK(testing::gradcheck<float>(store, build, 1e-2) <= 1e-3);
}

TEST_CASE("minimizing the rgb loss recovers the reference color") {
  Tensor<double> ref = Tensor<double>::from_rows(1, 3, {0.8, 0.1, 0.5});
  ParameterStore<double> store;
  store.create("c", 1, 3);
  store.at("c").arr() = 0.2;
  AdamState<double> opt;
  AdamConfig cfg;
  cfg.lr = 0.02;
  for (int it = 0; it < 600; ++it) {
    Graph<double> g(true);
    GradMap<double> grads = g.backward(rgb_loss_node(g, g.param(store, "c"), ref, 1.0));
    adam_step(store, grads, opt, cfg);
  }
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(store.at("c").v[i] - ref.v[i]) <= 1e-3);
}

TEST_CASE("normal loss pinned values") {
  Graph<double> g(false);
  Tensor<double> ref_x = Tensor<double>::from_rows(1, 3, {1, 0, 0});

  // opposite unit normal: L1 term 2, angular term |1-(-1)| = 2
  int flipped = g.constant(Tensor<double>::from_rows(1, 3, {-1, 0, 0}));
  CHECK(g.value(normal_loss_node(g, flipped, ref_x)).v[0] == doctest::Approx(4.0));

  // zero prediction: L1 gives |ref|_1, angular gives |1-0| = 1
  Tensor<double> ref_d = Tensor<double>::from_rows(1, 3, {0.6, 0.8, 0});
  int zero = g.constant(Tensor<double>::zeros(1, 3));
  CHECK(g.value(normal_loss_node(g, zero, ref_d)).v[0] == doctest::Approx(2.4));

  // perfect match is exactly zero
  int same = g.constant(ref_x);
  CHECK(g.value(normal_loss_node(g, same, ref_x)).v[0] == 0.0);

  // mean over rows
  Tensor<double> refs = Tensor<double>::from_rows(2, 3, {1, 0, 0, 1, 0, 0});
  int mixed = g.constant(Tensor<double>::from_rows(2, 3, {1, 0, 0, -1, 0, 0}));
  CHECK(g.value(normal_loss_node(g, mixed, refs)).v[0] == doctest::Approx(2.0));

  CHECK_THROWS_AS(normal_loss_node(g, flipped, Tensor<double>::zeros(1, 2)),
                  std::runtime_error);
}

TEST_CASE("normal loss gradient matches finite differences in float") {
  Prng rng(12);
  ParameterStore<float> store;
  store.create("n", 3, 3);
  Tensor<float>& n = store.at("n");
  for (long i = 0; i < n.size(); ++i) n.v[i] = static_cast<float>(rng.uniform(0.2, 0.8));
  Tensor<float> ref(3, 3);
  for (long r = 0; r < 3; ++r) {
    double v[3] = {rng.normal(), rng.normal(), rng.normal()};
    double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (int c = 0; c < 3; ++c) ref.at(r, c) = static_cast<float>(v[c] / len);
  }
  auto build = [&](Graph<float>& g, ParameterStore<float>& s) {
    return normal_loss_node(g, g.param(s, "n"), ref);
  };
  CHECK(testing::gradcheck<float>(store, build, 1e-2) <= 1e-3);
}

TEST_CASE("eikonal loss on closed-form fields") {
  // exact sphere gradient: unit norm everywhere, loss at machine zero
  AnalyticField<double> sphere([](double x, double y, double z) {
    return std::sqrt(x * x + y * y + z * z) - 0.5;
  });
  sphere.set_gradient([](double x, double y, double z, double* out) {
    double n = std::max(std::sqrt(x * x + y * y + z * z), 1e-300);
    out[0] = x / n;
    out[1] = y / n;
    out[2] = z / n;
  });
  std::vector<std::array<double, 3>> surface;
  Prng rng(5);
  for (int i = 0; i < 64; ++i) {
    double v[3] = {rng.normal(), rng.normal(), rng.normal()};
    double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    surface.push_back({0.5 * v[0] / len, 0.5 * v[1] / len, 0.5 * v[2] / len});
  }
  Tensor<double> pts = eikonal_batch<double>(256, surface, 7, 0);
  ParameterStore<double> store;
  Graph<double> g(false);
  CHECK(g.value(eikonal_loss_node(g, store, sphere, pts)).v[0] <= 1e-10);

  // f = 2x has gradient (2,0,0): (|grad|-1)^2 = 1 everywhere
  AnalyticField<double> doubled([](double x, double, double) { return 2 * x; });
  doubled.set_gradient([](double, double, double, double* out) {
    out[0] = 2;
    out[1] = 0;
    out[2] = 0;
  });
  CHECK(g.value(eikonal_loss_node(g, store, doubled, pts)).v[0] == doctest::Approx(1.0));

  CHECK_THROWS_AS(eikonal_loss_node(g, store, sphere, Tensor<double>::zeros(0, 3)),
                  std::runtime_error);
}

TEST_CASE("eikonal batch composition and determinism") {
  std::vector<std::array<double, 3>> surface = {{0.5, 0, 0}, {0, 0.5, 0}, {0, 0, 0.5}};
  Tensor<double> pts = eikonal_batch<double>(33, surface, 42, 3);
  REQUIRE(pts.rows == 33);
  for (long i = 0; i < pts.size(); ++i) {
    CHECK(pts.v[i] >= -1.0);
    CHECK(pts.v[i] <= 1.0);
  }
  // second half stays near some surface point (0.02 sigma, generous bound)
  for (long i = 17; i < 33; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& sp : surface) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += (pts.at(i, c) - sp[c]) * (pts.at(i, c) - sp[c]);
      best = std::min(best, std::sqrt(d));
    }
    CHECK(best <= 0.2);
  }
  // identical inputs reproduce bitwise; different iteration diverges
  Tensor<double> again = eikonal_batch<double>(33, surface, 42, 3);
  CHECK(std::equal(pts.v.begin(), pts.v.end(), again.v.begin()));
  Tensor<double> next = eikonal_batch<double>(33, surface, 42, 4);
  CHECK(!std::equal(pts.v.begin(), pts.v.end(), next.v.begin()));

  // without surface points the whole batch is uniform (no half reserved)
  Tensor<double> uni = eikonal_batch<double>(9, {}, 1, 0);
  CHECK(uni.rows == 9);
  CHECK_THROWS_AS(eikonal_batch<double>(0, surface, 1, 0), std::runtime_error);
}

TEST_CASE("eikonal loss gradient through a neural field matches finite differences") {
  Prng rng(21);
  NeuralField<float> field32(tiny_config());
  ParameterStore<float> store32;
  field32.create_params(store32, rng);
  for (auto& [name, entry] : store32)
    entry.trainable = (name == "trunk.b0");
  Tensor<float> pts32 = random_tensor<float>(rng, 4, 3, -0.6, 0.6);
  auto build32 = [&](Graph<float>& g, ParameterStore<float>& s) {
    return eikonal_loss_node(g, s, field32, pts32);
  };
  CHECK(testing::gradcheck<float>(store32, build32, 1e-3) <= 1e-3);

  // double precision pins the whole chain much tighter
  Prng rng64(21);
  NeuralField<double> field64(tiny_config());
  ParameterStore<double> store64;
  field64.create_params(store64, rng64);
  for (auto& [name, entry] : store64)
    entry.trainable = (name == "trunk.b0");
  Tensor<double> pts64 = random_tensor<double>(rng64, 4, 3, -0.6, 0.6);
  auto build64 = [&](Graph<double>& g, ParameterStore<double>& s) {
    return eikonal_loss_node(g, s, field64, pts64);
  };
  CHECK(testing::gradcheck<double>(store64, build64, 1e-5) <= 1e-7);
}

TEST_CASE("semantic loss pinned values") {
  Graph<double> g(false);
  auto basis = [&](int axis) {
    Tensor<double> t = Tensor<double>::zeros(4, 1);
    t.v[axis] = 1.0;
    return g.constant(t);
  };
  int e0 = basis(0), e1 = basis(1), e2 = basis(2);

  // orthonormal pair, no key views: ||e0 - e1||^2 = 2
  CHECK(g.value(semantic_loss_node(g, e0, {}, {e1}, {})).v[0] == doctest::Approx(2.0));

  // key view contributes with its angular weight
  int node = semantic_loss_node(g, e0, {e2}, {e1}, {{0.5}});
  CHECK(g.value(node).v[0] == doctest::Approx(2.0 + 0.5 * 2.0));

  // identical features are exactly zero
  CHECK(g.value(semantic_loss_node(g, e0, {e0}, {e0}, {{1.0}})).v[0] == 0.0);

  // no augmented views: constant zero
  CHECK(g.value(semantic_loss_node(g, e0, {e1}, {}, {{}})).v[0] == 0.0);

  int bad = g.constant(Tensor<double>::zeros(3, 1));
  CHECK_THROWS_WITH_AS(semantic_loss_node(g, e0, {}, {bad}, {}),
                       doctest::Contains("dimension mismatch"), std::runtime_error);
  CHECK_THROWS_AS(semantic_loss_node(g, e0, {e1}, {e2}, {}), std::runtime_error);
  CHECK_THROWS_AS(semantic_loss_node(g, e0, {e1}, {e2}, {{0.5, 0.5}}), std::runtime_error);
}

TEST_CASE("semantic loss gradient matches finite differences in float") {
  Prng rng(13);
  ParameterStore<float> store;
  store.create("f0", 6, 1);
  store.create("f1", 6, 1);
  store.create("a0", 6, 1);
  for (auto& [name, entry] : store)
    for (long i = 0; i < entry.value.size(); ++i)
      entry.value.v[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto build = [&](Graph<float>& g, ParameterStore<float>& s) {
    return semantic_loss_node(g, g.param(s, "f0"), {g.param(s, "f1")}, {g.param(s, "a0")},
                              {{0.3}});
  };
  CHECK(testing::gradcheck<float>(store, build, 1e-2) <= 1e-3);
}

TEST_CASE("mask loss pinned values") {
  Graph<double> g(false);
  // O=0.5 against m=1: -log(0.5) = ln 2
  int half = g.constant(Tensor<double>::full(1, 1, 0.5));
  CHECK(g.value(mask_loss_node(g, half, Tensor<double>::full(1, 1, 1.0))).v[0] ==
        doctest::Approx(std::log(2.0)));
  CHECK(g.value(mask_loss_node(g, half, Tensor<double>::full(1, 1, 0.0))).v[0] ==
        doctest::Approx(std::log(2.0)));

  // saturated agreement stays finite and near zero thanks to the clamp
  int one = g.constant(Tensor<double>::full(4, 1, 1.0));
  CHECK(g.value(mask_loss_node(g, one, Tensor<double>::full(4, 1, 1.0))).v[0] <= 2e-4);
  int zero = g.constant(Tensor<double>::zeros(4, 1));
  CHECK(g.value(mask_loss_node(g, zero, Tensor<double>::zeros(4, 1))).v[0] <= 2e-4);

  CHECK_THROWS_WITH_AS(mask_loss_node(g, half, Tensor<double>::full(1, 1, 1.5)),
                       doctest::Contains("[0,1]"), std::runtime_error);
  CHECK_THROWS_AS(mask_loss_node(g, half, Tensor<double>::zeros(2, 1)), std::runtime_error);
}

TEST_CASE("mask loss gradient matches finite differences in float") {
  Prng rng(14);
  ParameterStore<float> store;
  store.create("o", 5, 1);
  Tensor<float>& o = store.at("o");
  for (long i = 0; i < 5; ++i) o.v[i] = static_cast<float>(rng.uniform(0.2, 0.8));
  Tensor<float> mask(5, 1);
  for (long i = 0; i < 5; ++i) mask.v[i] = static_cast<float>(i % 2);
  auto build = [&](Graph<float>& g, ParameterStore<float>& s) {
    return mask_loss_node(g, g.param(s, "o"), mask);
  };
  CHECK(testing::gradcheck<float>(store, build, 1e-3) <= 1e-3);
}

TEST_CASE("transient loss pinned values") {
  Graph<double> g(false);
  // zero residuals and colors: exactly zero
  int rz = g.constant(Tensor<double>::zeros(4, 1));
  int cz = g.constant(Tensor<double>::zeros(4, 3));
  CHECK(g.value(transient_loss_node(g, rz, 0.05, cz)).v[0] == 0.0);

  // mean(|0.01|,|0.03|)/0.05 = 0.4; mean row L1 of constant 0.1 color = 0.3
  int r = g.constant(Tensor<double>::from_rows(2, 1, {0.01, -0.03}));
  int c = g.constant(Tensor<double>::full(2, 3, 0.1));
  CHECK(g.value(transient_loss_node(g, r, 0.05, -1)).v[0] == doctest::Approx(0.4));
  CHECK(g.value(transient_loss_node(g, -1, 0.05, c)).v[0] == doctest::Approx(0.3));
  CHECK(g.value(transient_loss_node(g, r, 0.05, c)).v[0] == doctest::Approx(0.7));

  // both branches absent: constant zero node
  CHECK(g.value(transient_loss_node(g, -1, 0.05, -1)).v[0] == 0.0);
  CHECK_THROWS_AS(transient_loss_node(g, r, 0.0, c), std::runtime_error);
}

TEST_CASE("transient loss gradient matches finite differences in float") {
  Prng rng(15);
  ParameterStore<float> store;
  store.create("res", 4, 1);
  store.create("col", 4, 3);
  for (auto& [name, entry] : store)
    for (long i = 0; i < entry.value.size(); ++i)
      entry.value.v[i] = static_cast<float>(rng.uniform(0.05, 0.5));
  auto build = [&](Graph<float>& g, ParameterStore<float>& s) {
    return transient_loss_node(g, g.param(s, "res"), 0.05, g.param(s, "col"));
  };
  CHECK(testing::gradcheck<float>(store, build, 1e-3) <= 1e-3);
}

TEST_CASE("total loss combines components with pinned weights") {
  Graph<double> g(false);
  auto scalar = [&](double x) { return g.constant(Tensor<double>::full(1, 1, x)); };
  LossNodes nodes;
  nodes.rgb = scalar(1.0);
  nodes.eik = scalar(1.0);
  nodes.norm = scalar(1.0);
  auto [node, report] = total_loss(g, nodes, LossWeights{});
  CHECK(g.value(node).v[0] == doctest::Approx(1.8));
  CHECK(report.total == doctest::Approx(1.8));
  CHECK(report.rgb == doctest::Approx(1.0));
  CHECK(report.eik == doctest::Approx(1.0));
  CHECK(report.norm == doctest::Approx(1.0));
  CHECK(report.sem == 0.0);
  CHECK(report.mask == 0.0);
  CHECK(report.trans == 0.0);

  // every multiplier lands on its own component
  LossNodes all;
  all.rgb = scalar(1.0);
  all.sem = scalar(1.0);
  all.eik = scalar(1.0);
  all.norm = scalar(1.0);
  all.mask = scalar(1.0);
  all.trans = scalar(1.0);
  LossWeights w;
  auto [node2, report2] = total_loss(g, all, w);
  CHECK(g.value(node2).v[0] ==
        doctest::Approx(1.0 + w.semantic + w.eikonal + w.normal + w.mask + w.trans));

  // doubling one component moves the total by exactly its weight
  all.mask = scalar(2.0);
  auto [node3, report3] = total_loss(g, all, w);
  CHECK(g.value(node3).v[0] - g.value(node2).v[0] == doctest::Approx(w.mask));
  CHECK(report3.mask == doctest::Approx(2.0));

  // nothing present: zero
  auto [znode, zreport] = total_loss(g, LossNodes{}, w);
  CHECK(g.value(znode).v[0] == 0.0);
  CHECK(zreport.total == 0.0);
}

TEST_CASE("total loss rejects non-finite components by name") {
  Graph<double> g(false);
  LossNodes nodes;
  nodes.rgb = g.constant(Tensor<double>::full(1, 1, 1.0));
  nodes.norm = g.constant(Tensor<double>::full(1, 1, std::nan("")));
  CHECK_THROWS_WITH_AS(total_loss(g, nodes, LossWeights{}), doctest::Contains("norm"),
                       std::runtime_error);

  LossNodes inf_nodes;
  inf_nodes.eik =
      g.constant(Tensor<double>::full(1, 1, std::numeric_limits<double>::infinity()));
  CHECK_THROWS_WITH_AS(total_loss(g, inf_nodes, LossWeights{}), doctest::Contains("eik"),
                       std::runtime_error);

  LossNodes vec;
  vec.rgb = g.constant(Tensor<double>::zeros(2, 1));
  CHECK_THROWS_WITH_AS(total_loss(g, vec, LossWeights{}), doctest::Contains("scalar"),
                       std::runtime_error);

  LossWeights bad;
  bad.eikonal = -0.1;
  CHECK_THROWS_AS(total_loss(g, LossNodes{}, bad), std::runtime_error);
}

TEST_CASE("total loss backpropagates through every component") {
  ParameterStore<double> store;
  store.create("o", 2, 1);
  store.at("o").arr() = 0.4;
  store.create("c", 2, 3);
  store.at("c").arr() = 0.3;
  Graph<double> g(true);
  LossNodes nodes;
  nodes.rgb = rgb_loss_node(g, g.param(store, "c"), Tensor<double>::zeros(2, 3), 1.0);
  nodes.mask = mask_loss_node(g, g.param(store, "o"), Tensor<double>::full(2, 1, 1.0));
  auto [node, report] = total_loss(g, nodes, LossWeights{});
  GradMap<double> grads = g.backward(node);
  // rgb: d/dc of mean ||c||^2 = 2c/rows; mask weight scales the BCE slope
  CHECK(grads.at("c").v[0] == doctest::Approx(2.0 * 0.3 / 2.0));
  CHECK(grads.at("o").v[0] == doctest::Approx(0.1 * (-1.0 / 0.4) / 2.0));
  CHECK(report.total > 0.0);
}
