#include "pelta/flsim.hpp"

#include <algorithm>

#include "json.hpp"

namespace pelta {

ParamStore fedavg(const std::vector<ParamStore>& updates) {
  if (updates.empty()) throw Error("fedavg: no updates");
  ParamStore out = updates[0];
  for (std::size_t k = 1; k < updates.size(); ++k) {
    if (updates[k].size() != out.size()) throw ShapeError("fedavg: heterogeneous stores");
    for (auto& [id, t] : out) {
      const auto it = updates[k].find(id);
      if (it == updates[k].end()) throw ShapeError("fedavg: missing parameter node");
      t = add(t, it->second);  // add() rejects shape mismatches
    }
  }
  const double inv = 1.0 / static_cast<double>(updates.size());
  for (auto& [id, t] : out) t = scale(t, inv);
  return out;
}

namespace {

Dataset shard_of(const Dataset& data, std::size_t client, std::size_t clients) {
  Dataset s;
  for (std::size_t i = client; i < data.size(); i += clients) {
    s.images.push_back(data.images[i]);
    s.labels.push_back(data.labels[i]);
  }
  return s;
}

double ensemble_accuracy(const EnsembleModel& m, const Dataset& data, std::uint64_t seed) {
  if (data.size() == 0) return 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng pick(Rng::derive(seed, i));
    if (ensemble_predict(m, data.images[i], pick) == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace

FlResult run_rounds(const FlConfig& cfg, const VitConfig& vit_cfg, const CnnConfig& cnn_cfg,
                    const Dataset& train, const Dataset& eval_set) {
  if (cfg.clients == 0) throw Error("fl: need at least one client");
  if (cfg.compromised >= cfg.clients)
    throw Error("fl: compromised client id out of range");
  if (train.size() < cfg.clients) throw Error("fl: fewer samples than clients");

  BuiltModel vit = build_tiny_vit(vit_cfg);
  BuiltModel cnn = build_tiny_cnn(cnn_cfg);
  Rng init_rng(Rng::derive(cfg.seed, 0x1417));
  ParamStore vit_global = init_params(vit, init_rng);
  ParamStore cnn_global = init_params(cnn, init_rng);

  std::vector<Dataset> shards;
  for (std::size_t c = 0; c < cfg.clients; ++c) shards.push_back(shard_of(train, c, cfg.clients));

  FlResult result{{}, {}, {}};
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    // Broadcast: every client starts the round from the aggregated model.
    std::vector<ParamStore> vit_locals(cfg.clients, vit_global);
    std::vector<ParamStore> cnn_locals(cfg.clients, cnn_global);

    for (std::size_t c = 0; c < cfg.clients; ++c) {
      TrainOptions opt;
      opt.lr = cfg.lr;
      opt.epochs = cfg.local_epochs;
      opt.batch = cfg.batch;
      opt.seed = Rng::derive(cfg.seed, 2 * (round * cfg.clients + c));
      train_sgd(vit, vit_locals[c], shards[c], opt);
      opt.seed = Rng::derive(cfg.seed, 2 * (round * cfg.clients + c) + 1);
      train_sgd(cnn, cnn_locals[c], shards[c], opt);
    }

    vit_global = fedavg(vit_locals);
    cnn_global = fedavg(cnn_locals);

    RoundLog log;
    log.round = round;
    {
      EnsembleModel global{vit, cnn, vit_global, cnn_global};
      log.clean_accuracy = ensemble_accuracy(global, eval_set.size() ? eval_set : train,
                                             Rng::derive(cfg.seed, 0xacc0 + round));
    }

    const bool probe_now =
        cfg.compromised_active && (cfg.attack_each_round || round + 1 == cfg.rounds);
    if (probe_now) {
      // The compromised client reads its own post-broadcast copy; the victim
      // holds the identical broadcast. Probing alters no protocol message.
      EnsembleModel attacker_copy{vit, cnn, vit_global, cnn_global};
      EnsembleModel victim_copy{vit, cnn, vit_global, cnn_global};
      const EnsembleShieldState state = make_shield_state(attacker_copy, cfg.shield);
      const Dataset& local = shards[cfg.compromised];
      const std::size_t n = std::min(cfg.attack_samples, local.size());
      std::size_t local_hits = 0, victim_hits = 0;
      for (std::size_t i = 0; i < n; ++i) {
        SagaConfig acfg = cfg.attack;
        acfg.seed = Rng::derive(cfg.seed, 0xa77ac0 + round * 1000 + i);
        const AttackOutcome o =
            saga_attack(attacker_copy, state, local.images[i], local.labels[i], acfg);
        // Both sides classify the same sample with the same selection draw;
        // the predictions differ only if the broadcast was not honored.
        const std::uint64_t pick_seed = Rng::derive(acfg.seed, 0x91c4);
        Rng pick_local(pick_seed), pick_victim(pick_seed);
        const int pred_local = ensemble_predict(attacker_copy, o.x_adv, pick_local);
        const int pred_victim = ensemble_predict(victim_copy, o.x_adv, pick_victim);
        if (pred_local != o.true_label) ++local_hits;
        if (pred_victim != o.true_label) ++victim_hits;
      }
      log.local_success = n ? static_cast<double>(local_hits) / n : 0.0;
      log.replication = n ? static_cast<double>(victim_hits) / n : 0.0;
    }
    result.rounds.push_back(log);
  }

  result.vit_global = std::move(vit_global);
  result.cnn_global = std::move(cnn_global);
  return result;
}

std::string roundlog_jsonl(const std::vector<RoundLog>& rounds) {
  std::string out;
  for (const RoundLog& r : rounds) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["clean_accuracy"] = r.clean_accuracy;
    j["local_success"] = r.local_success ? nlohmann::ordered_json(*r.local_success)
                                         : nlohmann::ordered_json(nullptr);
    j["replication"] = r.replication ? nlohmann::ordered_json(*r.replication)
                                     : nlohmann::ordered_json(nullptr);
    out += j.dump();
    out += "\n";
  }
  return out;
}

}  // namespace pelta
