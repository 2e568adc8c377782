#include "pelta/attack.hpp"

#include <cmath>
#include <cstdio>
#include <mutex>

#include "json.hpp"

#include "pelta/parallel.hpp"

namespace pelta {

const char* shield_setting_name(ShieldSetting s) {
  switch (s) {
    case ShieldSetting::None: return "none";
    case ShieldSetting::VitOnly: return "vit";
    case ShieldSetting::CnnOnly: return "cnn";
    case ShieldSetting::Ensemble: return "ensemble";
  }
  return "?";
}

UpsamplerConfig derive_upsampler(const Shape& adj, const Shape& target, std::uint64_t seed) {
  if (adj.size() != 3 || target.size() != 3)
    throw Error("derive_upsampler: expected rank-3 adjoint and target");
  const std::size_t h = adj[1], w = adj[2], H = target[1], W = target[2];
  if (h > H || w > W || h == 0)
    throw Error("upsampler shape underdetermined: adjoint " + shape_str(adj) +
                " cannot reach " + shape_str(target));
  UpsamplerConfig cfg;
  cfg.seed = seed;
  // Spatial reduction factor of the shield, then the kernel extent that
  // lands exactly on the target. out = (in - 1) * stride + kernel.
  auto solve = [](std::size_t in, std::size_t out) -> std::pair<std::size_t, std::size_t> {
    std::size_t s = in == 1 ? 1 : out / in;
    if (s == 0) s = 1;
    while (s >= 1) {
      const std::size_t covered = (in - 1) * s;
      if (covered < out) return {s, out - covered};
      --s;
    }
    throw Error("upsampler shape underdetermined");
  };
  const auto [sh, kh] = solve(h, H);
  const auto [sw, kw] = solve(w, W);
  if (sh != sw)
    throw Error("upsampler shape underdetermined: anisotropic strides " + std::to_string(sh) +
                " vs " + std::to_string(sw));
  cfg.stride = sh;
  cfg.kernel_h = kh;
  cfg.kernel_w = kw;
  return cfg;
}

Tensor random_linf(const Tensor& x, double eps, Rng& rng) {
  if (eps < 0) throw Error("random_linf: eps must be non-negative");
  Tensor out = x;
  for (Scalar& v : out.data()) v += eps * rng.sign();
  return clamp(out, 0.0, 1.0);
}

Tensor attention_rollout(const std::vector<std::vector<Tensor>>& weights, const Tensor& x_adv) {
  if (weights.empty() || weights[0].empty())
    throw Error("attention_rollout: no attention weights");
  if (x_adv.rank() != 3) throw Error("attention_rollout: x_adv must be C x H x W");
  const std::size_t T = weights[0][0].extent(0);
  for (const auto& layer : weights)
    for (const Tensor& wm : layer)
      if (wm.rank() != 2 || wm.extent(0) != T || wm.extent(1) != T)
        throw Error("attention_rollout: weights must be square " + std::to_string(T) + "x" +
                    std::to_string(T) + " matrices, got " + shape_str(wm.shape()));

  // Per layer: sum over heads of (0.5 W + 0.5 I); multiply layers in order.
  Tensor acc;
  bool first = true;
  for (const auto& layer : weights) {
    Tensor mixed(Shape{T, T});
    for (const Tensor& wm : layer)
      for (std::size_t r = 0; r < T; ++r)
        for (std::size_t c = 0; c < T; ++c)
          mixed.at(r, c) += 0.5 * wm.at(r, c) + (r == c ? 0.5 : 0.0);
    acc = first ? mixed : matmul(acc, mixed);
    first = false;
  }

  // Class-token row restricted to patch tokens, laid out on the patch grid.
  const std::size_t n_patches = T - 1;
  const std::size_t grid = static_cast<std::size_t>(std::llround(std::sqrt(double(n_patches))));
  if (grid * grid != n_patches)
    throw Error("attention_rollout: token count does not form a square patch grid");
  const std::size_t C = x_adv.extent(0), H = x_adv.extent(1), W = x_adv.extent(2);
  if (grid == 0 || H % grid != 0 || W % grid != 0)
    throw Error("attention_rollout: patch grid does not divide the image");
  const std::size_t ph = H / grid, pw = W / grid;

  Tensor phi(x_adv.shape());
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      const Scalar wgt = acc.at(0, 1 + gy * grid + gx);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t yy = 0; yy < ph; ++yy)
          for (std::size_t xx = 0; xx < pw; ++xx)
            phi.at(c, gy * ph + yy, gx * pw + xx) = wgt;
    }
  return mul(phi, x_adv);
}

Tensor blend_gradient(const Tensor& grad_cnn, const Tensor& grad_vit, const Tensor& phi,
                      double alpha_k) {
  if (!grad_cnn.same_shape(grad_vit) || !grad_cnn.same_shape(phi))
    throw ShapeError("blend_gradient: operands must share the input shape");
  return add(scale(grad_cnn, alpha_k), scale(mul(phi, grad_vit), 1.0 - alpha_k));
}

Tensor adjoint_to_spatial(const Tensor& adjoint) {
  if (adjoint.rank() == 3) return adjoint;
  if (adjoint.rank() == 2) {
    const std::size_t T = adjoint.extent(0), D = adjoint.extent(1);
    if (T < 2) throw Error("adjoint_to_spatial: need at least one patch token");
    const std::size_t n_patches = T - 1;
    const std::size_t grid = static_cast<std::size_t>(std::llround(std::sqrt(double(n_patches))));
    if (grid * grid != n_patches)
      throw Error("adjoint_to_spatial: token count does not form a square patch grid");
    Tensor out(Shape{D, grid, grid});
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx)
        for (std::size_t d = 0; d < D; ++d)
          out.at(d, gy, gx) = adjoint.at(1 + gy * grid + gx, d);
    return out;
  }
  throw Error("adjoint_to_spatial: unsupported adjoint rank " + std::to_string(adjoint.rank()));
}

Tensor bpda_upsample(const Tensor& adj, const UpsamplerConfig& cfg, std::size_t out_channels) {
  if (adj.rank() != 3) throw Error("bpda_upsample: adjoint must be spatial (rank-3)");
  Rng rng(cfg.seed);
  Tensor kernel(Shape{adj.extent(0), out_channels, cfg.kernel_h, cfg.kernel_w});
  for (Scalar& v : kernel.data()) v = rng.uniform(cfg.init_lo, cfg.init_hi);
  return transposed_conv2d(adj, kernel, cfg.stride);
}

EnsembleShieldState make_shield_state(const EnsembleModel& m, ShieldSetting setting) {
  if (m.vit.image_shape != m.cnn.image_shape || m.vit.classes != m.cnn.classes)
    throw Error("ensemble members must share input shape and class count");
  const bool mask_vit = setting == ShieldSetting::VitOnly || setting == ShieldSetting::Ensemble;
  const bool mask_cnn = setting == ShieldSetting::CnnOnly || setting == ShieldSetting::Ensemble;
  Enclave vit_enc = mask_vit ? shield(m.vit.graph, m.vit.canonical_shield) : Enclave{};
  Enclave cnn_enc = mask_cnn ? shield(m.cnn.graph, m.cnn.canonical_shield) : Enclave{};
  return EnsembleShieldState{ShieldPolicy(m.vit.graph, std::move(vit_enc)),
                             ShieldPolicy(m.cnn.graph, std::move(cnn_enc))};
}

namespace {

struct MemberGrad {
  Tensor grad;
  std::size_t denied = 0;
};

// One defender pass through a member, read out through the attacker view.
// Returns the gradient the attacker can act on: the true input gradient when
// the member is clear, otherwise the upsampled adjoint of the leftmost clear
// node (or zeros with upsampling off). For the ViT also fills `attn` with
// the clear attention weight values.
MemberGrad member_gradient(const BuiltModel& model, const ParamStore& params,
                           const ShieldPolicy& policy, const Tensor& x_adv, int label,
                           bool upsample, std::uint64_t kernel_seed,
                           std::vector<std::vector<Tensor>>* attn) {
  const ValueMap v =
      forward(model.graph, bind_sample(model, params, x_adv, static_cast<std::size_t>(label)));
  const AdjointMap a = backward(model.graph, v);
  AttackerView view(policy, v, a);

  if (attn) {
    attn->clear();
    for (const auto& layer : model.attention) {
      std::vector<Tensor> row;
      for (NodeId id : layer) row.push_back(view.value(id));
      attn->push_back(std::move(row));
    }
  }

  const AttackerGradient ag = attacker_gradient(view);
  MemberGrad out;
  if (ag.kind == GradientKind::Full) {
    out.grad = ag.tensor;
  } else if (!upsample) {
    out.grad = Tensor(model.image_shape);
  } else {
    const Tensor spatial = adjoint_to_spatial(ag.tensor);
    const UpsamplerConfig ucfg =
        derive_upsampler(spatial.shape(), model.image_shape, kernel_seed);
    out.grad = bpda_upsample(spatial, ucfg, model.image_shape[0]);
  }
  out.denied = view.denied_attempts();
  return out;
}

}  // namespace

AttackOutcome saga_attack(const EnsembleModel& m, const EnsembleShieldState& state,
                          const Tensor& x, int label, const SagaConfig& cfg) {
  if (cfg.eps_step <= 0) throw Error("saga: eps_step must be positive");
  if (cfg.alpha_k < 0 || cfg.alpha_k > 1) throw Error("saga: alpha_k must lie in [0,1]");

  AttackOutcome out;
  out.true_label = label;

  Rng orig_pick(Rng::derive(cfg.seed, 0x0819));
  out.original_class = ensemble_predict(m, x, orig_pick);

  // One upsampling kernel per attack run; per-step calls re-derive the same
  // kernel from these seeds.
  const std::uint64_t vit_kernel_seed = Rng::derive(cfg.seed, 1);
  const std::uint64_t cnn_kernel_seed = Rng::derive(cfg.seed, 2);

  out.x_adv = x;
  std::vector<std::vector<Tensor>> attn;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const MemberGrad gv = member_gradient(m.vit, m.vit_params, state.vit, out.x_adv, label,
                                          cfg.upsample, vit_kernel_seed, &attn);
    const MemberGrad gc = member_gradient(m.cnn, m.cnn_params, state.cnn, out.x_adv, label,
                                          cfg.upsample, cnn_kernel_seed, nullptr);
    out.denied_reads += gv.denied + gc.denied;
    const Tensor phi = attention_rollout(attn, out.x_adv);
    const Tensor blend = blend_gradient(gc.grad, gv.grad, phi, cfg.alpha_k);
    out.x_adv = clamp(add(out.x_adv, scale(sign(blend), cfg.eps_step)), 0.0, 1.0);
  }

  out.linf = linf_distance(out.x_adv, x);
  for (Scalar v : out.x_adv.data())
    if (v < 0 || v > 1) out.in_range = false;
  out.adv_vit_class = predict(m.vit, m.vit_params, out.x_adv);
  out.adv_cnn_class = predict(m.cnn, m.cnn_params, out.x_adv);
  // Same selection stream the clean evaluation uses, so a zero-step attack
  // reproduces it exactly.
  Rng adv_pick(Rng::derive(cfg.seed, 0xe15eb1e));
  out.adv_ensemble_class = ensemble_predict(m, out.x_adv, adv_pick);
  out.success = out.adv_ensemble_class != label;
  return out;
}

EvalRow evaluate_robust_accuracy(const EnsembleModel& m, ShieldSetting setting,
                                 const Dataset& data, AttackKind kind, const SagaConfig& cfg,
                                 std::size_t repeats, std::uint64_t seed, std::size_t workers) {
  if (repeats == 0) throw Error("evaluate: repeats must be at least 1");
  const std::size_t n = data.size();
  if (n == 0) throw Error("evaluate: empty dataset");
  const EnsembleShieldState state = make_shield_state(m, setting);
  const double budget = static_cast<double>(cfg.steps) * cfg.eps_step;

  struct Cell {
    bool vit_ok, cnn_ok, ens_ok;
    bool violated;
    std::size_t denied;
  };
  std::vector<Cell> cells(repeats * n);

  parallel_for(repeats * n, workers, [&](std::size_t j) {
    const std::size_t i = j % n;
    const std::uint64_t run_seed = Rng::derive(seed, j);
    const Tensor& x = data.images[i];
    const int label = data.labels[i];
    Cell& cell = cells[j];
    cell = {};
    if (kind == AttackKind::Clean) {
      Rng pick(Rng::derive(run_seed, 0xe15eb1e));
      cell.vit_ok = predict(m.vit, m.vit_params, x) == label;
      cell.cnn_ok = predict(m.cnn, m.cnn_params, x) == label;
      cell.ens_ok = ensemble_predict(m, x, pick) == label;
    } else if (kind == AttackKind::RandomLinf) {
      Rng noise(run_seed);
      const Tensor x_adv = random_linf(x, budget, noise);
      Rng pick(Rng::derive(run_seed, 0xe15eb1e));
      cell.vit_ok = predict(m.vit, m.vit_params, x_adv) == label;
      cell.cnn_ok = predict(m.cnn, m.cnn_params, x_adv) == label;
      cell.ens_ok = ensemble_predict(m, x_adv, pick) == label;
      cell.violated = linf_distance(x_adv, x) > budget + 1e-12;
    } else {
      SagaConfig run_cfg = cfg;
      run_cfg.seed = run_seed;
      const AttackOutcome o = saga_attack(m, state, x, label, run_cfg);
      cell.vit_ok = o.adv_vit_class == label;
      cell.cnn_ok = o.adv_cnn_class == label;
      cell.ens_ok = o.adv_ensemble_class == label;
      cell.violated = o.linf > budget + 1e-12 || !o.in_range;
      cell.denied = o.denied_reads;
    }
  });

  EvalRow row;
  for (const Cell& c : cells) {
    row.vit_acc += c.vit_ok ? 1 : 0;
    row.cnn_acc += c.cnn_ok ? 1 : 0;
    row.ensemble_acc += c.ens_ok ? 1 : 0;
    row.budget_violations += c.violated ? 1 : 0;
    row.denied_reads += c.denied;
  }
  const double total = static_cast<double>(repeats * n);
  row.vit_acc /= total;
  row.cnn_acc /= total;
  row.ensemble_acc /= total;
  return row;
}

AttackReport evaluate_grid(const EnsembleModel& m, const Dataset& data, const SagaConfig& cfg,
                           std::size_t repeats, std::uint64_t seed, std::size_t workers) {
  AttackReport rep;
  rep.row_names = {"vit", "cnn", "ensemble"};
  rep.cells.assign(3, {});

  const EvalRow clean = evaluate_robust_accuracy(m, ShieldSetting::None, data, AttackKind::Clean,
                                                 cfg, 1, Rng::derive(seed, 100), workers);
  const EvalRow rnd = evaluate_robust_accuracy(m, ShieldSetting::None, data,
                                               AttackKind::RandomLinf, cfg, repeats,
                                               Rng::derive(seed, 200), workers);
  const ShieldSetting settings[4] = {ShieldSetting::None, ShieldSetting::VitOnly,
                                     ShieldSetting::CnnOnly, ShieldSetting::Ensemble};
  EvalRow saga[4];
  for (int s = 0; s < 4; ++s) {
    saga[s] = evaluate_robust_accuracy(m, settings[s], data, AttackKind::Saga, cfg, repeats,
                                       Rng::derive(seed, 300 + static_cast<std::uint64_t>(s)),
                                       workers);
    rep.budget_violations += saga[s].budget_violations;
    rep.denied_reads += saga[s].denied_reads;
  }
  rep.budget_violations += rnd.budget_violations;

  for (int r = 0; r < 3; ++r) {
    auto pick = [&](const EvalRow& row) {
      return r == 0 ? row.vit_acc : (r == 1 ? row.cnn_acc : row.ensemble_acc);
    };
    rep.cells[r] = {pick(clean), pick(rnd), pick(saga[0]), pick(saga[1]), pick(saga[2]),
                    pick(saga[3])};
  }
  return rep;
}

std::string AttackReport::to_csv() const {
  std::string out = "model,clean,random,shield_none,shield_vit,shield_cnn,shield_ensemble\n";
  char buf[64];
  for (std::size_t r = 0; r < row_names.size(); ++r) {
    out += row_names[r];
    for (double v : cells[r]) {
      std::snprintf(buf, sizeof buf, ",%.4f", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::string AttackReport::to_json() const {
  nlohmann::ordered_json j;
  j["columns"] = {"clean", "random", "shield_none", "shield_vit", "shield_cnn",
                  "shield_ensemble"};
  for (std::size_t r = 0; r < row_names.size(); ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (double v : cells[r]) row.push_back(v);
    j["rows"][row_names[r]] = row;
  }
  j["budget_violations"] = budget_violations;
  j["denied_reads"] = denied_reads;
  return j.dump(2);
}

}  // namespace pelta
