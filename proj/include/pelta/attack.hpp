#pragma once

#include <array>

#include "pelta/models.hpp"
#include "pelta/rng.hpp"
#include "pelta/shield.hpp"

namespace pelta {

enum class ShieldSetting { None, VitOnly, CnnOnly, Ensemble };

const char* shield_setting_name(ShieldSetting s);

struct SagaConfig {
  /// Step size per pass; inputs are normalized to [0,1].
  double eps_step = 0.01;
  std::size_t steps = 10;
  /// Blend weight of the CNN gradient; the ViT side gets 1 - alpha_k.
  double alpha_k = 0.5;
  std::uint64_t seed = 0;
  /// Substitute an upsampled adjoint for a shielded member's gradient; with
  /// this off a shielded member contributes zero.
  bool upsample = true;
};

struct UpsamplerConfig {
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  double init_lo = -1.0;
  double init_hi = 1.0;
  std::uint64_t seed = 0;
};

/// Picks stride = the shield's spatial reduction factor (largest stride that
/// still reaches the target extent) and the kernel extent that lands exactly
/// on the target shape. Throws when no kernel/stride pair reaches it.
UpsamplerConfig derive_upsampler(const Shape& adjoint_spatial, const Shape& target,
                                 std::uint64_t seed);

/// x + eps * s with s drawn uniformly from {-1,+1} per element, clamped to
/// [0,1].
Tensor random_linf(const Tensor& x, double eps, Rng& rng);

/// The self-attention map term: per layer sum 0.5*W + 0.5*I over heads,
/// multiply the per-layer matrices in order, take the class-token row
/// restricted to patch tokens, nearest-neighbor-upsample the per-patch
/// scalars to the pixel grid, replicate across channels, and multiply
/// elementwise with x_adv.
Tensor attention_rollout(const std::vector<std::vector<Tensor>>& weights, const Tensor& x_adv);

/// G_blend = alpha_k * grad_cnn + (1 - alpha_k) * (phi .* grad_vit).
Tensor blend_gradient(const Tensor& grad_cnn, const Tensor& grad_vit, const Tensor& phi,
                      double alpha_k);

/// Lays an adjoint out on a spatial grid: rank-3 adjoints keep their natural
/// C x H' x W' layout, rank-2 token adjoints drop the class token and place
/// patch vectors on the (channels-last-to-first) patch grid.
Tensor adjoint_to_spatial(const Tensor& adjoint);

/// Transposed convolution of the adjoint with a kernel drawn i.i.d. uniform
/// from the config range under the config seed. Output shape equals the
/// attacked input shape by construction of the config.
Tensor bpda_upsample(const Tensor& adjoint_spatial, const UpsamplerConfig& cfg,
                     std::size_t out_channels);

/// Shield policies for both ensemble members under one grid setting.
struct EnsembleShieldState {
  ShieldPolicy vit;
  ShieldPolicy cnn;
};

EnsembleShieldState make_shield_state(const EnsembleModel& m, ShieldSetting setting);

struct AttackOutcome {
  int true_label = 0;
  int original_class = 0;  // ensemble prediction on the clean sample
  int adv_vit_class = 0;
  int adv_cnn_class = 0;
  int adv_ensemble_class = 0;
  bool success = false;  // ensemble misclassifies the adversarial sample
  double linf = 0;
  bool in_range = true;  // x_adv within [0,1]
  std::size_t denied_reads = 0;
  Tensor x_adv;
};

/// Ten(-ish) passes of x_adv <- clamp(x_adv + eps * sign(G_blend)). Clear
/// members contribute their true input gradient through the attacker view;
/// shielded members contribute the upsampled adjoint of their leftmost clear
/// node (or nothing when upsampling is off). steps == 0 degenerates to the
/// identity attack.
AttackOutcome saga_attack(const EnsembleModel& m, const EnsembleShieldState& state,
                          const Tensor& x, int label, const SagaConfig& cfg);

enum class AttackKind { Clean, RandomLinf, Saga };

struct EvalRow {
  double vit_acc = 0;
  double cnn_acc = 0;
  double ensemble_acc = 0;
  std::size_t budget_violations = 0;
  std::size_t denied_reads = 0;
};

/// Mean per-member and ensemble accuracy over `repeats` seeded runs of the
/// given attack. The random baseline perturbs within the same l-inf ball the
/// iterative attack can reach (steps * eps_step).
EvalRow evaluate_robust_accuracy(const EnsembleModel& m, ShieldSetting setting,
                                 const Dataset& data, AttackKind kind, const SagaConfig& cfg,
                                 std::size_t repeats, std::uint64_t seed, std::size_t workers);

/// Table-shaped report: member and ensemble rows, baseline and per-shield
/// columns.
struct AttackReport {
  std::vector<std::string> row_names;  // vit, cnn, ensemble
  // columns: clean, random, shield none / vit / cnn / ensemble
  std::vector<std::array<double, 6>> cells;
  std::size_t budget_violations = 0;
  std::size_t denied_reads = 0;

  std::string to_csv() const;
  std::string to_json() const;
};

AttackReport evaluate_grid(const EnsembleModel& m, const Dataset& data, const SagaConfig& cfg,
                           std::size_t repeats, std::uint64_t seed, std::size_t workers);

}  // namespace pelta
