#pragma once

#include <string>

#include "pelta/attack.hpp"
#include "pelta/flsim.hpp"
#include "pelta/models.hpp"

namespace pelta {

struct ConfigError : Error {
  using Error::Error;
};

/// Synthetic stand-in for a natural-image set: each class is a distinct
/// oriented-stripe / checker frequency pattern plus uniform pixel noise.
/// Samples are interleaved by class so any prefix or round-robin shard stays
/// balanced. Deterministic under the seed.
Dataset gen_data(std::size_t classes, std::size_t per_class, std::size_t image,
                 std::size_t channels, double noise, std::uint64_t seed);

/// Dataset exchange through the tensor container format: images as one
/// N x C x H x W tensor, labels as a flat tensor of class indices. This is
/// also the import path for externally produced datasets.
void save_dataset(const std::string& dir, const Dataset& d);
Dataset load_dataset(const std::string& dir);

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string out = "out";
  std::size_t workers = 1;

  // dataset
  std::size_t classes = 4;
  std::size_t per_class = 64;
  std::size_t image = 16;
  std::size_t channels = 1;
  double noise = 0.1;

  VitConfig vit;
  CnnConfig cnn;
  TrainOptions train_vit;
  TrainOptions train_cnn;

  SagaConfig attack;
  std::size_t repeats = 10;
  /// How many dataset samples the attack grid touches.
  std::size_t attack_samples = 256;

  bool fl_enabled = false;
  FlConfig fl;
};

/// Parses the nested `key value` / `section { ... }` text format. Errors
/// carry the offending line number and field name.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// A small fully-specified configuration suitable for smoke tests.
std::string default_config_text();

struct ExperimentResult {
  double vit_clean = 0;
  double cnn_clean = 0;
  AttackReport report;
};

/// End-to-end run: trains both members, runs the shield-setting grid
/// {none, vit, cnn, ensemble} x {clean, random, saga}, and writes report.csv,
/// report.json, memory.json, params/, and fl.jsonl (when enabled) under
/// `out_dir`. Byte-identical artifacts for identical configs. An imported
/// dataset replaces the synthetic one when given.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const Dataset* imported = nullptr);

/// Enclave occupancy of the canonical shields: both toy members plus the
/// ViT-L/16-geometry estimate.
std::string memory_report_json(const ExperimentConfig& cfg);

void write_file(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

}  // namespace pelta
