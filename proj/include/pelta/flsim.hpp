#pragma once

#include <optional>

#include "pelta/attack.hpp"
#include "pelta/models.hpp"

namespace pelta {

struct FlConfig {
  std::size_t clients = 4;
  std::size_t rounds = 2;
  std::size_t local_epochs = 1;
  std::size_t batch = 16;
  double lr = 0.05;
  std::size_t compromised = 0;  // client id of the honest-but-curious probe
  std::uint64_t seed = 1;
  ShieldSetting shield = ShieldSetting::None;
  SagaConfig attack;
  /// Probe after every round instead of only the final one (the local copy
  /// is freshest right after a broadcast either way).
  bool attack_each_round = false;
  /// Upper bound on how many of its local samples the compromised client
  /// perturbs.
  std::size_t attack_samples = 32;
  /// The probe is read-only; turning it off must leave every parameter
  /// bit-identical (message passivity).
  bool compromised_active = true;
};

struct RoundLog {
  std::size_t round = 0;
  double clean_accuracy = 0;
  /// Misclassification rate of the adversarial samples on the attacker's own
  /// copy; empty on rounds without probing.
  std::optional<double> local_success;
  /// Same samples presented to a victim client's copy.
  std::optional<double> replication;
};

struct FlResult {
  std::vector<RoundLog> rounds;
  ParamStore vit_global;
  ParamStore cnn_global;
};

/// Elementwise arithmetic mean of homogeneous parameter stores.
ParamStore fedavg(const std::vector<ParamStore>& updates);

/// Synchronous rounds with full participation: broadcast, local SGD per
/// client shard, FedAvg, then the compromised client probes its local copy
/// through its attacker view and presents the samples to a victim copy.
/// Protocol messages are never altered.
FlResult run_rounds(const FlConfig& cfg, const VitConfig& vit_cfg, const CnnConfig& cnn_cfg,
                    const Dataset& train, const Dataset& eval_set);

/// One JSON object per round.
std::string roundlog_jsonl(const std::vector<RoundLog>& rounds);

}  // namespace pelta
