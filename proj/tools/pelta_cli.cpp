#include <cstdio>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "pelta/harness.hpp"

namespace {

using namespace pelta;

ExperimentConfig read_cfg(const std::string& path, std::uint64_t seed_override, bool has_seed,
                          const std::string& out_override, std::size_t workers_override,
                          bool has_workers) {
  ExperimentConfig cfg = path.empty() ? parse_config(default_config_text()) : load_config(path);
  if (has_seed) {
    // Re-derive all downstream seeds from the override.
    std::string text = path.empty() ? default_config_text() : read_file(path);
    cfg = parse_config(text);
    cfg.seed = seed_override;
    cfg.train_vit.seed = Rng::derive(cfg.seed, 0x7a1);
    cfg.train_cnn.seed = Rng::derive(cfg.seed, 0x7a2);
    cfg.attack.seed = Rng::derive(cfg.seed, 0x7a3);
    cfg.fl.seed = Rng::derive(cfg.seed, 0x7a4);
    cfg.fl.attack = cfg.attack;
  }
  if (!out_override.empty()) cfg.out = out_override;
  if (has_workers) cfg.workers = workers_override;
  return cfg;
}

// Imported container dataset when --data is given, synthetic otherwise.
Dataset dataset_of(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return gen_data(cfg.classes, cfg.per_class, cfg.image, cfg.channels, cfg.noise,
                  Rng::derive(cfg.seed, 0xda7a));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pelta gradient-shielding simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  bool dump_graph = false;
  std::string params_dir;

  app.add_option("--config", config_path, "experiment configuration file");
  app.add_option("--seed", seed, "override the configuration seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--workers", workers, "worker thread cap for the attack grid");
  app.add_option("--data", data_dir, "import a container dataset instead of synthesizing");

  auto* cmd_gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* cmd_train = app.add_subcommand("train", "train both ensemble members");
  auto* cmd_shield = app.add_subcommand("shield-report", "emit enclave memory accounting");
  cmd_shield->add_flag("--dump-graph", dump_graph, "also dump model topologies as text");
  auto* cmd_attack = app.add_subcommand("attack", "run the shield-setting attack grid");
  cmd_attack->add_option("--params", params_dir, "directory with trained parameters");
  auto* cmd_fl = app.add_subcommand("fl-run", "run the federated-learning simulation");
  auto* cmd_report = app.add_subcommand("report", "full experiment: train, grid, reports");

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = read_cfg(config_path, seed, app.count("--seed") > 0, out_dir,
                                          workers, app.count("--workers") > 0);

    if (cmd_gen->parsed()) {
      save_dataset(cfg.out, dataset_of(cfg, data_dir));
      std::printf("dataset written to %s\n", cfg.out.c_str());
    } else if (cmd_train->parsed()) {
      const Dataset data = dataset_of(cfg, data_dir);
      EnsembleModel m{build_tiny_vit(cfg.vit), build_tiny_cnn(cfg.cnn), {}, {}};
      Rng vit_init(Rng::derive(cfg.seed, 0x111)), cnn_init(Rng::derive(cfg.seed, 0x222));
      m.vit_params = init_params(m.vit, vit_init);
      m.cnn_params = init_params(m.cnn, cnn_init);
      const TrainResult rv = train_sgd(m.vit, m.vit_params, data, cfg.train_vit);
      const TrainResult rc = train_sgd(m.cnn, m.cnn_params, data, cfg.train_cnn);
      save_params(cfg.out + "/params/vit", m.vit, m.vit_params);
      save_params(cfg.out + "/params/cnn", m.cnn, m.cnn_params);
      std::printf("clean accuracy: vit %.4f, cnn %.4f\n", rv.clean_accuracy, rc.clean_accuracy);
    } else if (cmd_shield->parsed()) {
      write_file(cfg.out + "/memory.json", memory_report_json(cfg));
      if (dump_graph) {
        write_file(cfg.out + "/vit.graph.txt", build_tiny_vit(cfg.vit).graph.to_text());
        write_file(cfg.out + "/cnn.graph.txt", build_tiny_cnn(cfg.cnn).graph.to_text());
        // loading the dumps back validates them end to end
        for (const char* f : {"/vit.graph.txt", "/cnn.graph.txt"})
          (void)Graph::from_text(read_file(cfg.out + f));
      }
      std::printf("memory report written to %s/memory.json\n", cfg.out.c_str());
    } else if (cmd_attack->parsed()) {
      const Dataset data = dataset_of(cfg, data_dir);
      EnsembleModel m{build_tiny_vit(cfg.vit), build_tiny_cnn(cfg.cnn), {}, {}};
      const std::string pdir = params_dir.empty() ? cfg.out + "/params" : params_dir;
      m.vit_params = load_params(pdir + "/vit", m.vit);
      m.cnn_params = load_params(pdir + "/cnn", m.cnn);
      Dataset attacked;
      const std::size_t n = std::min(cfg.attack_samples, data.size());
      for (std::size_t i = 0; i < n; ++i) {
        attacked.images.push_back(data.images[i]);
        attacked.labels.push_back(data.labels[i]);
      }
      const AttackReport rep = evaluate_grid(m, attacked, cfg.attack, cfg.repeats,
                                             Rng::derive(cfg.seed, 0x97d), cfg.workers);
      write_file(cfg.out + "/report.csv", rep.to_csv());
      write_file(cfg.out + "/report.json", rep.to_json());
      std::printf("%s", rep.to_csv().c_str());
    } else if (cmd_fl->parsed()) {
      const Dataset data = dataset_of(cfg, data_dir);
      const FlResult fl = run_rounds(cfg.fl, cfg.vit, cfg.cnn, data, data);
      write_file(cfg.out + "/fl.jsonl", roundlog_jsonl(fl.rounds));
      std::printf("%s", roundlog_jsonl(fl.rounds).c_str());
    } else if (cmd_report->parsed()) {
      Dataset imported;
      if (!data_dir.empty()) imported = load_dataset(data_dir);
      const ExperimentResult res =
          run_experiment(cfg, cfg.out, data_dir.empty() ? nullptr : &imported);
      std::printf("clean accuracy: vit %.4f, cnn %.4f\n", res.vit_clean, res.cnn_clean);
      std::printf("%s", res.report.to_csv().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
