#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pelta/attack.hpp"
#include "pelta/harness.hpp"
#include "testutil.hpp"

using namespace pelta;
using namespace pelta::testing;

namespace {

EnsembleModel toy_ensemble(std::uint64_t seed = 3) {
  VitConfig vc;
  vc.image = 16;
  vc.channels = 1;
  vc.patch = 4;
  vc.width = 16;
  vc.blocks = 2;
  vc.heads = 2;
  vc.classes = 4;
  CnnConfig cc;
  cc.image = 16;
  cc.channels = 1;
  cc.filters = 8;
  cc.kernel = 3;
  cc.pool = 2;
  cc.hidden = 32;
  cc.classes = 4;
  EnsembleModel m{build_tiny_vit(vc), build_tiny_cnn(cc), {}, {}};
  Rng r1(Rng::derive(seed, 1)), r2(Rng::derive(seed, 2));
  m.vit_params = init_params(m.vit, r1);
  m.cnn_params = init_params(m.cnn, r2);
  return m;
}

}  // namespace

TEST_CASE("random_linf: zero epsilon is the identity") {
  Rng rng(5);
  const Tensor x = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  Rng r(7);
  CHECK(random_linf(x, 0.0, r) == x);
}

TEST_CASE("random_linf: every element moves by exactly eps before clamping") {
  Rng rng(7);
  Tensor x(Shape{1, 4, 4}, 0.5);  // far from the clamp boundary
  Rng r(11);
  const Tensor y = random_linf(x, 0.125, r);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(std::abs(y[i] - x[i]) - 0.125) < 1e-12);
}

TEST_CASE("random_linf: seeded runs reproduce bit-exactly") {
  Rng rng(13);
  const Tensor x = random_tensor({2, 3, 3}, rng, 0.0, 1.0);
  Rng a(17), b(17);
  CHECK(random_linf(x, 0.2, a) == random_linf(x, 0.2, b));
}

TEST_CASE("rollout: zero x_adv annihilates phi") {
  Tensor w(Shape{2, 2}, {0.5, 0.5, 0.5, 0.5});
  const Tensor x(Shape{1, 4, 4});
  const Tensor phi = attention_rollout({{w}}, x);
  for (Scalar v : phi.data()) CHECK(v == 0.0);
}

TEST_CASE("rollout: two-token hand computation") {
  Tensor w(Shape{2, 2}, {0.5, 0.5, 0.5, 0.5});
  Rng rng(19);
  const Tensor x = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  // single layer, single head: sum = 0.5 W + 0.5 I = [[.75,.25],[.25,.75]];
  // class row patch weight = 0.25
  const Tensor phi = attention_rollout({{w}}, x);
  CHECK(tensors_close(phi, scale(x, 0.25)));
}

TEST_CASE("rollout: accepts full-scale head and block counts") {
  Rng rng(23);
  std::vector<std::vector<Tensor>> weights(24);
  for (auto& layer : weights)
    for (int h = 0; h < 16; ++h) {
      Tensor w(Shape{2, 2});
      const double a = rng.uniform(0.0, 1.0);
      const double b = rng.uniform(0.0, 1.0);
      w = Tensor(Shape{2, 2}, {a, 1 - a, b, 1 - b});  // row-stochastic
      layer.push_back(w);
    }
  const Tensor x = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  const Tensor phi = attention_rollout(weights, x);
  CHECK(phi.shape() == x.shape());
  for (Scalar v : phi.data()) CHECK(v >= 0.0);  // nonnegative inputs, stochastic rows
}

TEST_CASE("rollout: rejects inconsistent weights") {
  Tensor bad(Shape{2, 3});
  const Tensor x(Shape{1, 4, 4});
  CHECK_THROWS_AS(attention_rollout({{bad}}, x), Error);
  CHECK_THROWS_AS(attention_rollout({}, x), Error);
}

TEST_CASE("blend: weight collapse cases") {
  Rng rng(29);
  const Tensor gc = random_tensor({1, 4, 4}, rng);
  const Tensor gv = random_tensor({1, 4, 4}, rng);
  const Tensor ones(Shape{1, 4, 4}, 1.0);
  CHECK(tensors_close(blend_gradient(gc, gv, ones, 1.0), gc));
  CHECK(tensors_close(blend_gradient(gc, gv, ones, 0.0), gv));
}

TEST_CASE("blend: scalar probe") {
  const Tensor two(Shape{1, 1, 1}, 2.0);
  const Tensor four(Shape{1, 1, 1}, 4.0);
  const Tensor one(Shape{1, 1, 1}, 1.0);
  CHECK(blend_gradient(two, four, one, 0.5)[0] == doctest::Approx(3.0));
}

TEST_CASE("blend: shape mismatch") {
  CHECK_THROWS_AS(
      blend_gradient(Tensor(Shape{1, 2, 2}), Tensor(Shape{1, 4, 4}), Tensor(Shape{1, 4, 4}), 0.5),
      ShapeError);
}

TEST_CASE("derive_upsampler solves both builder geometries") {
  // CNN: adjoint 8x7x7 -> 1x16x16 (stride 2, kernel 4)
  const UpsamplerConfig c1 = derive_upsampler({8, 7, 7}, {1, 16, 16}, 1);
  CHECK(c1.stride == 2);
  CHECK(c1.kernel_h == 4);
  // ViT: patch grid 16x4x4 -> 1x16x16 (stride 4, kernel 4)
  const UpsamplerConfig c2 = derive_upsampler({16, 4, 4}, {1, 16, 16}, 1);
  CHECK(c2.stride == 4);
  CHECK(c2.kernel_h == 4);
}

TEST_CASE("derive_upsampler rejects impossible shapes") {
  CHECK_THROWS_AS(derive_upsampler({1, 20, 20}, {1, 16, 16}, 1), Error);
}

TEST_CASE("bpda_upsample: output shape equals the attacked input shape") {
  Rng rng(31);
  const Tensor adj_cnn = random_tensor({8, 7, 7}, rng);
  const Tensor up1 = bpda_upsample(adj_cnn, derive_upsampler({8, 7, 7}, {1, 16, 16}, 5), 1);
  CHECK(up1.shape() == Shape{1, 16, 16});
  const Tensor adj_vit = random_tensor({16, 4, 4}, rng);
  const Tensor up2 = bpda_upsample(adj_vit, derive_upsampler({16, 4, 4}, {1, 16, 16}, 5), 1);
  CHECK(up2.shape() == Shape{1, 16, 16});
}

TEST_CASE("bpda_upsample: kernel is reproducible under the config seed") {
  Rng rng(37);
  const Tensor adj = random_tensor({4, 4, 4}, rng);
  const UpsamplerConfig cfg = derive_upsampler({4, 4, 4}, {1, 16, 16}, 99);
  CHECK(bpda_upsample(adj, cfg, 1) == bpda_upsample(adj, cfg, 1));
}

TEST_CASE("adjoint_to_spatial handles token adjoints") {
  Rng rng(41);
  const Tensor tok = random_tensor({17, 16}, rng);  // 16 patches + class token
  const Tensor sp = adjoint_to_spatial(tok);
  CHECK(sp.shape() == Shape{16, 4, 4});
  // row 1 (first patch) lands at grid (0,0)
  for (std::size_t d = 0; d < 16; ++d) CHECK(sp.at(d, 0, 0) == tok.at(1, d));
  CHECK_THROWS_AS(adjoint_to_spatial(Tensor(Shape{5})), Error);
}

TEST_CASE("saga: zero blended gradient leaves the sample fixed") {
  const EnsembleModel m = toy_ensemble();
  const Tensor x(Shape{1, 16, 16});  // zeros: phi = 0, and alpha_k = 0 kills the CNN term
  SagaConfig cfg;
  cfg.eps_step = 0.05;
  cfg.steps = 10;
  cfg.alpha_k = 0.0;
  cfg.seed = 7;
  const EnsembleShieldState state = make_shield_state(m, ShieldSetting::None);
  Rng pick(Rng::derive(cfg.seed, 0xe15eb1e));
  const int clean_class = ensemble_predict(m, x, pick);
  const AttackOutcome o = saga_attack(m, state, x, clean_class, cfg);
  CHECK(o.x_adv == x);
  CHECK(o.linf == 0.0);
  CHECK_FALSE(o.success);  // stays correctly classified
}

TEST_CASE("saga: perturbation obeys the telescoped budget and pixel range") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 2, 16, 1, 0.1, 43);
  SagaConfig cfg;
  cfg.eps_step = 0.013;
  cfg.steps = 10;
  cfg.alpha_k = 0.5;
  for (ShieldSetting s : {ShieldSetting::None, ShieldSetting::VitOnly, ShieldSetting::CnnOnly,
                          ShieldSetting::Ensemble}) {
    const EnsembleShieldState state = make_shield_state(m, s);
    for (std::size_t i = 0; i < data.size(); ++i) {
      cfg.seed = Rng::derive(47, i);
      const AttackOutcome o = saga_attack(m, state, data.images[i], data.labels[i], cfg);
      CHECK(o.linf <= cfg.eps_step * static_cast<double>(cfg.steps) + 1e-12);
      CHECK(o.in_range);
      CHECK(o.denied_reads == 0);  // the attack never touches masked state
    }
  }
}

TEST_CASE("saga: identical seeds give identical outcomes") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 1, 16, 1, 0.1, 53);
  SagaConfig cfg;
  cfg.eps_step = 0.02;
  cfg.steps = 5;
  cfg.alpha_k = 0.3;
  cfg.seed = 59;
  const EnsembleShieldState state = make_shield_state(m, ShieldSetting::Ensemble);
  const AttackOutcome a = saga_attack(m, state, data.images[0], data.labels[0], cfg);
  const AttackOutcome b = saga_attack(m, state, data.images[0], data.labels[0], cfg);
  CHECK(a.x_adv == b.x_adv);
  CHECK(a.adv_ensemble_class == b.adv_ensemble_class);
  CHECK(a.linf == b.linf);
}

TEST_CASE("saga: upsampling off zeroes the shielded member's contribution") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 1, 16, 1, 0.1, 61);
  SagaConfig cfg;
  cfg.eps_step = 0.02;
  cfg.steps = 3;
  cfg.alpha_k = 0.0;  // only the ViT term remains
  cfg.seed = 67;
  cfg.upsample = false;
  const EnsembleShieldState state = make_shield_state(m, ShieldSetting::VitOnly);
  const AttackOutcome o = saga_attack(m, state, data.images[0], data.labels[0], cfg);
  // ViT shielded with upsampling off and alpha_k = 0: blended gradient is 0
  CHECK(o.x_adv == data.images[0]);
}

TEST_CASE("saga: the published constants are accepted as configuration") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 1, 16, 1, 0.1, 101);
  SagaConfig cfg;
  cfg.eps_step = 3.1e-3;
  cfg.alpha_k = 2.0e-4;  // alpha_v = 1 - alpha_k
  cfg.steps = 10;
  cfg.seed = 103;
  const EnsembleShieldState state = make_shield_state(m, ShieldSetting::None);
  const AttackOutcome o = saga_attack(m, state, data.images[0], data.labels[0], cfg);
  CHECK(o.linf <= 10 * 3.1e-3 + 1e-12);
}

TEST_CASE("evaluate: clean kind reproduces member accuracies") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 4, 16, 1, 0.1, 71);
  SagaConfig cfg;
  const EvalRow row = evaluate_robust_accuracy(m, ShieldSetting::None, data, AttackKind::Clean,
                                               cfg, 1, 73, 1);
  CHECK(row.vit_acc == doctest::Approx(accuracy(m.vit, m.vit_params, data)));
  CHECK(row.cnn_acc == doctest::Approx(accuracy(m.cnn, m.cnn_params, data)));
}

TEST_CASE("evaluate: zero-step attack equals clean evaluation") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 4, 16, 1, 0.1, 79);
  SagaConfig cfg;
  cfg.steps = 0;
  const EvalRow clean = evaluate_robust_accuracy(m, ShieldSetting::Ensemble, data,
                                                 AttackKind::Clean, cfg, 1, 83, 1);
  const EvalRow zero = evaluate_robust_accuracy(m, ShieldSetting::Ensemble, data,
                                                AttackKind::Saga, cfg, 1, 83, 1);
  CHECK(zero.vit_acc == clean.vit_acc);
  CHECK(zero.cnn_acc == clean.cnn_acc);
  CHECK(zero.ensemble_acc == clean.ensemble_acc);
}

TEST_CASE("evaluate grid: table layout and determinism") {
  const EnsembleModel m = toy_ensemble();
  const Dataset data = gen_data(4, 2, 16, 1, 0.1, 89);
  SagaConfig cfg;
  cfg.eps_step = 0.02;
  cfg.steps = 2;
  cfg.alpha_k = 0.5;
  const AttackReport a = evaluate_grid(m, data, cfg, 2, 97, 2);
  const AttackReport b = evaluate_grid(m, data, cfg, 2, 97, 1);  // workers must not matter
  CHECK(a.to_csv() == b.to_csv());
  CHECK(a.row_names == std::vector<std::string>{"vit", "cnn", "ensemble"});
  CHECK(a.cells.size() == 3);
  const std::string csv = a.to_csv();
  CHECK(csv.find("model,clean,random,shield_none,shield_vit,shield_cnn,shield_ensemble") == 0);
  for (const auto& row : a.cells)
    for (double v : row) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  CHECK(a.budget_violations == 0);
  CHECK(a.denied_reads == 0);
}
